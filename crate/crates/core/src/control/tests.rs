use super::*;
use crate::cluster::{ClusterSpec, Fleet};
use crate::diagnostics::DiagConfig;
use crate::error::Error;

fn spec(nodes: usize) -> ClusterSpec {
    ClusterSpec {
        num_nodes: nodes,
        gpus_per_node: 8,
        nic_bw: 25e9,
        pcie_bw: 20e9,
        sharedstore_bw: 5e9,
        peak_flops_per_gpu: 312e12,
        tor_group_size: 1,
        nics_per_node: None,
        intra_node_bw: 300e9,
    }
}

fn cluster(need: usize, spares: usize) -> (Fleet, LocalCluster) {
    let fleet = Fleet::new(spec(need), need + spares, &[]).unwrap();
    let lc = LocalCluster::launch(&fleet, need, AnomalyRule::defaults(), DiagConfig::default(), 0.0).unwrap();
    (fleet, lc)
}

fn traffic(bps: f64) -> Telemetry {
    Telemetry { gpu_status: vec![], logs: vec![], rdma_bps: vec![bps] }
}

/// Beats every executor at 10 s spacing from `from` through `to`.
fn beat_range(lc: &mut LocalCluster, from: u32, to: u32, bps: f64) {
    for i in from..=to {
        let t = i as f64 * 10.0;
        lc.beat(t, |_, _| Some(traffic(bps)));
        lc.tick(t);
    }
}

fn phases(m: &RecoveryMachine) -> Vec<RecoveryPhase> {
    m.trace.iter().map(|t| t.to).collect()
}

use RecoveryPhase::*;

#[test]
fn launch_with_spares_and_shortage() {
    let (_, lc) = cluster(16, 2);
    assert_eq!(lc.driver.pool().roster, (0..16).collect::<Vec<_>>());
    assert_eq!(lc.driver.pool().spares.iter().copied().collect::<Vec<_>>(), vec![16, 17]);
    assert!(lc.executors[&16].state == ExecState::Idle);

    let mut bad = crate::cluster::HardwareProfile::healthy(5, 1);
    bad.failed_gpus = vec![0];
    let fleet = Fleet::new(spec(16), 16, &[bad]).unwrap();
    let err = LocalCluster::launch(&fleet, 16, AnomalyRule::defaults(), DiagConfig::default(), 0.0).unwrap_err();
    assert!(matches!(err, Error::Shortage { need: 16, have: 15, deficit: 1 }), "{err}");
}

#[test]
fn hang_runs_full_cycle_and_swaps_in_spare() {
    let (mut fleet, mut lc) = cluster(8, 1);
    beat_range(&mut lc, 1, 3, 1e9);
    fleet.profile_mut(7).unwrap().hang_prob = 1.0;
    beat_range(&mut lc, 4, 5, 0.0);
    assert_eq!(lc.driver.phase(), Suspending);
    assert_eq!(lc.driver.machine().trigger.as_ref().unwrap().rule, Some(RuleKind::TrafficZero));
    lc.driver.set_resume_point(ResumePoint { checkpoint_id: Some(3), state_id: Some("state-3".into()), step: 30 });
    let rep = lc.pump(&fleet, 50.0);

    assert_eq!(lc.driver.phase(), Running);
    assert_eq!(phases(lc.driver.machine()), vec![Suspending, Diagnosing, Evicting, Rescheduling, Resuming, Running]);
    assert!(recovery::trace_is_valid(&lc.driver.machine().trace));
    assert_eq!(lc.driver.pool().roster[7], 8);
    assert!(lc.driver.pool().evicted.contains(&7));
    let ev = &lc.driver.machine().evidence[&7];
    assert!(matches!(ev[0], Evidence::DiagnosticFailure { .. }));
    assert_eq!(lc.driver.machine().evidence.len(), 1);
    for (slot, n) in lc.driver.pool().roster.iter().enumerate() {
        let e = &lc.executors[n];
        assert_eq!((e.state, e.slot, e.step, e.checkpoint_id), (ExecState::Running, Some(slot), 30, Some(3)));
    }
    assert_eq!(lc.executors[&7].state, ExecState::Evicted);
    let d = PhaseDurations::default();
    assert!(rep.end >= 50.0 + d.suspend + d.evict + d.reschedule + d.resume);
    let events = lc.driver.drain_events();
    assert!(events.iter().any(|e| matches!(e, ControlEvent::Replaced { node: 7, slot: 7, replacement: 8, .. })));
}

#[test]
fn missed_heartbeats_evict_silent_node_even_if_others_pass() {
    let (fleet, mut lc) = cluster(4, 1);
    beat_range(&mut lc, 1, 10, 1e9);
    lc.dead.insert(2);
    // node 2's last beat was at t=100; keep the others healthy
    for i in 11..=13 {
        let t = i as f64 * 10.0;
        lc.beat(t, |_, _| Some(traffic(1e9)));
        lc.tick(t);
    }
    assert_eq!(lc.driver.phase(), Running);
    lc.beat(131.0, |_, _| Some(traffic(1e9)));
    lc.tick(131.0);
    assert_eq!(lc.driver.phase(), Suspending);
    assert_eq!(lc.driver.machine().trigger.as_ref().unwrap().rule, Some(RuleKind::MissedHeartbeat));
    lc.pump(&fleet, 131.0);
    assert_eq!(lc.driver.phase(), Running);
    assert_eq!(lc.driver.pool().roster, vec![0, 1, 4, 3]);
    assert!(matches!(lc.driver.machine().evidence[&2][0], Evidence::Silent { .. }));
}

#[test]
fn machine_down_detected_by_traffic_then_waits_out_silence() {
    let (fleet, mut lc) = cluster(4, 1);
    beat_range(&mut lc, 1, 3, 1e9);
    lc.dead.insert(1);
    beat_range(&mut lc, 4, 5, 0.0);
    assert_eq!(lc.driver.phase(), Suspending);
    let rep = lc.pump(&fleet, 50.0);
    assert_eq!(lc.driver.phase(), Running);
    assert_eq!(lc.driver.pool().roster, vec![0, 4, 2, 3]);
    assert!(matches!(lc.driver.machine().evidence[&1][0], Evidence::Silent { .. }));
    // suspension of node 1 could only give up once its beats were missed
    assert!(rep.end > 60.0);
}

#[test]
fn process_exit_restarts_in_place_when_hardware_passes() {
    let (fleet, mut lc) = cluster(4, 1);
    beat_range(&mut lc, 1, 3, 1e9);
    lc.beat(40.0, |n, _| {
        let mut t = traffic(1e9);
        if n == 3 {
            t.gpu_status = vec![ProcStatus::Running; 8];
            t.gpu_status[2] = ProcStatus::Exited(139);
        }
        Some(t)
    });
    assert_eq!(lc.driver.machine().trigger.as_ref().unwrap().rule, Some(RuleKind::ProcessExit));
    lc.pump(&fleet, 40.0);
    assert_eq!(phases(lc.driver.machine()), vec![Suspending, Diagnosing, Evicting, Rescheduling, Resuming, Running]);
    assert_eq!(lc.driver.pool().roster, vec![0, 1, 2, 3]);
    assert!(lc.driver.machine().evidence.is_empty());
}

#[test]
fn keyword_in_logs_triggers_recovery() {
    let (_, mut lc) = cluster(2, 0);
    lc.beat(10.0, |n, _| {
        let mut t = traffic(1e9);
        if n == 1 {
            t.logs.push("CUDA error: uncorrectable ECC error encountered".into());
        }
        Some(t)
    });
    let trig = lc.driver.machine().trigger.clone().unwrap();
    assert_eq!(trig.rule, Some(RuleKind::Keyword));
    assert_eq!(trig.nodes.into_iter().collect::<Vec<_>>(), vec![1]);
}

#[test]
fn manual_evict_skips_diagnosis() {
    let (fleet, mut lc) = cluster(4, 1);
    beat_range(&mut lc, 1, 2, 1e9);
    assert_eq!(lc.driver.manual_evict(3, "operator", 25.0).unwrap(), Evicting);
    assert!(matches!(lc.driver.manual_evict(1, "again", 26.0), Err(Error::AlreadyRecovering(_))));
    lc.pump(&fleet, 25.0);
    assert_eq!(phases(lc.driver.machine()), vec![Evicting, Rescheduling, Resuming, Running]);
    assert_eq!(lc.driver.pool().roster, vec![0, 1, 2, 4]);
    assert!(matches!(lc.driver.machine().evidence[&3][0], Evidence::Manual { .. }));
    assert!(matches!(lc.driver.manual_evict(3, "gone", 500.0), Err(Error::UnknownNode(3))));
}

#[test]
fn no_spare_stays_stuck_until_repair() {
    let (mut fleet, mut lc) = cluster(2, 0);
    lc.driver.manual_evict(1, "bad fan", 0.0).unwrap();
    lc.pump(&fleet, 0.0);
    assert_eq!(lc.driver.phase(), Rescheduling);
    assert!(lc.driver.machine().alert.is_some());
    assert!(lc.driver.drain_events().iter().any(|e| matches!(e, ControlEvent::Stuck { .. })));

    fleet.repair(1);
    lc.rejoin(1, 8, 1000.0);
    lc.pump(&fleet, 1000.0);
    assert_eq!(lc.driver.phase(), Running);
    assert_eq!(lc.driver.pool().roster, vec![0, 1]);
    assert!(lc.driver.machine().alert.is_none());
}

#[test]
fn failing_spare_is_quarantined_and_next_one_used() {
    let mut bad = crate::cluster::HardwareProfile::healthy(5, 1);
    bad.link_degradations = vec![0.3];
    let healthy_fleet = Fleet::new(spec(4), 6, &[]).unwrap();
    let mut lc = LocalCluster::launch(&healthy_fleet, 4, AnomalyRule::defaults(), DiagConfig::default(), 0.0).unwrap();
    // spare 4 degrades while idle
    let mut p4 = bad.clone();
    p4.node_id = 4;
    let fleet = Fleet::new(spec(4), 6, &[p4]).unwrap();
    lc.driver.manual_evict(0, "test", 0.0).unwrap();
    lc.pump(&fleet, 0.0);
    assert_eq!(lc.driver.phase(), Running);
    assert_eq!(lc.driver.pool().roster[0], 5);
    assert!(lc.driver.pool().quarantined.contains(&4));
    assert!(lc.driver.drain_events().iter().any(|e| matches!(e, ControlEvent::SpareRejected { node: 4 })));
}

#[test]
fn traffic_drop_only_alerts() {
    let (_, mut lc) = cluster(2, 0);
    beat_range(&mut lc, 1, 6, 1e9);
    beat_range(&mut lc, 7, 7, 1e8);
    assert_eq!(lc.driver.phase(), Running);
    let alerts: Vec<_> = lc
        .driver
        .drain_events()
        .into_iter()
        .filter_map(|e| match e {
            ControlEvent::Alert(a) => Some(a.rule),
            _ => None,
        })
        .collect();
    assert!(alerts.contains(&RuleKind::TrafficDrop));
}

#[test]
fn effective_rate_examples() {
    assert!((effective_time_rate(100, 10.0, 1200.0).unwrap() - 1000.0 / 1200.0).abs() < 1e-12);
    assert_eq!(effective_time_rate(10, 1.0, 10.0).unwrap(), 1.0);
    assert!(matches!(effective_time_rate(10, 1.0, 0.0), Err(Error::ZeroElapsed)));
}

fn campaign_cfg(faults: usize, duration: f64, seed: u64) -> CampaignConfig {
    CampaignConfig {
        cluster: spec(8),
        spares: 4,
        iteration_time: 10.0,
        duration,
        faults,
        checkpoint_interval: 30,
        checkpoint_stall: 2.0,
        checkpoint_upload: 60.0,
        resume_time: 60.0,
        repair_time: 6.0 * 3600.0,
        traffic_bps: 1e9,
        durations: PhaseDurations::default(),
        diag: DiagConfig::default(),
        rules: AnomalyRule::defaults(),
        seed,
    }
}

#[test]
fn fault_free_campaign_loses_only_checkpoint_stalls() {
    let r = run_campaign(&campaign_cfg(0, 30_000.0, 1)).unwrap();
    assert!(r.records.is_empty());
    let expect = r.iterations as f64 * 10.0 / 30_000.0;
    assert!((r.effective_time_rate - expect).abs() < 1e-12);
    assert!(r.effective_time_rate < 1.0 && r.effective_time_rate > 0.99);
    assert!((r.iterations as f64 * 10.0 + r.checkpoint_stall_total - 30_000.0).abs() <= 10.0 + 2.0);
}

#[test]
fn small_campaign_recovers_every_fault() {
    let r = run_campaign(&campaign_cfg(10, 7.0 * 86400.0, 7)).unwrap();
    assert_eq!(r.records.len(), 10);
    assert_eq!(r.resumes, 10);
    for rec in &r.records {
        assert!(rec.trace_ok, "{rec:?}");
        assert!(rec.detection_and_diagnosis() < 600.0, "{rec:?}");
        assert!(rec.resume_step <= rec.step);
        match rec.kind {
            CampaignFault::SoftwareCrash => assert!(rec.evicted.is_empty()),
            _ => assert_eq!(rec.evicted, vec![rec.node], "{rec:?}"),
        }
    }
    assert!(r.effective_time_rate > 0.9, "{}", r.effective_time_rate);
    assert_eq!(r, run_campaign(&campaign_cfg(10, 7.0 * 86400.0, 7)).unwrap());
}

#[test]
fn live_cluster_walks_through_manual_eviction() {
    let (fleet, lc) = cluster(2, 1);
    let live = LiveCluster::spawn(lc, fleet, LiveConfig { speed: 2000.0, ..LiveConfig::default() });
    let h = live.handle();
    assert!(matches!(h.evict(7, "x"), Err(Error::UnknownNode(7))));
    assert_eq!(h.evict(1, "operator").unwrap(), Evicting);
    assert!(matches!(h.evict(0, "again"), Err(Error::AlreadyRecovering(_))));
    let start = std::time::Instant::now();
    loop {
        let s = live.status();
        if s.phase == Running && s.cycles == 1 {
            assert_eq!(s.roster, vec![0, 2]);
            break;
        }
        assert!(start.elapsed().as_secs() < 20, "{s:?}");
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    let events = live.view.lock().unwrap().events.clone();
    let seen: Vec<RecoveryPhase> = events
        .iter()
        .filter_map(|e| match e {
            ControlEvent::Transition(t) => Some(t.to),
            _ => None,
        })
        .collect();
    assert_eq!(seen, vec![Evicting, Rescheduling, Resuming, Running]);
    live.shutdown();
}
