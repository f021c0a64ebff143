//! Driver and executors talking over real sockets.

use std::net::TcpListener;
use std::time::{Duration, Instant};

use trainsim::cluster::{ClusterSpec, Fleet};
use trainsim::control::pool::NodePool;
use trainsim::control::{AnomalyRule, DriverServer, DriverStatus, ExecState, Executor, ExecutorClient, RecoveryPhase};
use trainsim::diagnostics::DiagConfig;
use trainsim::Error;

const BEAT: Duration = Duration::from_millis(40);

fn fleet(total: usize) -> Fleet {
    let spec = ClusterSpec {
        num_nodes: 2,
        gpus_per_node: 8,
        nic_bw: 25e9,
        pcie_bw: 20e9,
        sharedstore_bw: 5e9,
        peak_flops_per_gpu: 312e12,
        tor_group_size: 1,
        nics_per_node: None,
        intra_node_bw: 300e9,
    };
    Fleet::new(spec, total, &[]).unwrap()
}

fn wait_for(server: &DriverServer, what: &str, pred: impl Fn(&DriverStatus) -> bool) -> DriverStatus {
    let h = server.handle();
    let start = Instant::now();
    loop {
        let s = h.status().unwrap();
        if pred(&s) {
            return s;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "timed out waiting for {what}: {s:?}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn manual_evict_then_machine_loss_over_tcp() {
    let fleet = fleet(4);
    let pool = NodePool::allocate(4, 2, |_| true).unwrap();
    let rules = vec![AnomalyRule::MissedHeartbeat { interval: BEAT.as_secs_f64(), window: 3 }, AnomalyRule::ProcessExit];
    let driver = trainsim::control::Driver::new(pool.clone(), rules, 0.0).unwrap();
    let server = DriverServer::spawn(TcpListener::bind("127.0.0.1:0").unwrap(), driver, Duration::from_millis(10)).unwrap();

    let mut clients = Vec::new();
    for n in 0..4 {
        let state = if pool.contains(n) { ExecState::Running } else { ExecState::Idle };
        let mut e = Executor::new(n, 8, state);
        e.slot = pool.slot_of(n);
        clients.push(Some(ExecutorClient::spawn(server.addr, e, fleet.clone(), DiagConfig::default(), BEAT).unwrap()));
    }
    std::thread::sleep(BEAT * 3);
    let h = server.handle();
    assert!(matches!(h.evict(9, "nope"), Err(Error::UnknownNode(9))));

    assert_eq!(h.evict(1, "operator request").unwrap(), RecoveryPhase::Evicting);
    assert!(matches!(h.evict(0, "again"), Err(Error::AlreadyRecovering(_))));
    let s = wait_for(&server, "first recovery", |s| s.phase == RecoveryPhase::Running && s.cycles == 1);
    assert_eq!(s.roster, vec![0, 2]);
    let to: Vec<_> = s.trace.iter().map(|t| t.to).collect();
    assert_eq!(to, vec![RecoveryPhase::Evicting, RecoveryPhase::Rescheduling, RecoveryPhase::Resuming, RecoveryPhase::Running]);
    assert_eq!(*clients[1].as_ref().unwrap().state.lock().unwrap(), ExecState::Evicted);
    assert_eq!(*clients[2].as_ref().unwrap().state.lock().unwrap(), ExecState::Running);

    clients[0].take().unwrap().kill();
    let s = wait_for(&server, "second recovery", |s| s.phase == RecoveryPhase::Running && s.cycles == 2);
    assert_eq!(s.roster, vec![3, 2]);
    assert!(s.evidence.contains_key(&0));
    let tail: Vec<_> = s.trace[4..].iter().map(|t| t.to).collect();
    assert_eq!(
        tail,
        vec![
            RecoveryPhase::Suspending,
            RecoveryPhase::Diagnosing,
            RecoveryPhase::Evicting,
            RecoveryPhase::Rescheduling,
            RecoveryPhase::Resuming,
            RecoveryPhase::Running
        ]
    );
    assert!(!server.events.lock().unwrap().is_empty());
    drop(clients);
    server.shutdown();
}
