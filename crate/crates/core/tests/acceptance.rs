//! Acceptance suite AC1..AC10. One PASS/FAIL line per criterion; exits
//! nonzero if any fails. Pass criterion ids (e.g. `AC4`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trainsim::bubbles::{compare_large_batch, simulate_bubbles};
use trainsim::checkpoint::{checkpoint, recover, CheckpointConfig, Durability};
use trainsim::cluster::{build_topology, ClusterSpec, HardwareProfile, ParallelConfig, Topology};
use trainsim::control::{run_campaign, AnomalyRule, CampaignConfig, PhaseDurations, RecoveryPhase};
use trainsim::diagnostics::DiagConfig;
use trainsim::groupinit::{loglog_slope, scaling_table};
use trainsim::observe::{analyze_mfu_decay, build_heatmap, detect_stragglers, Attribution, HeatDim, SpanTable};
use trainsim::runner::{run_scenario, write_artifacts, Outcome, RECOVERY_TRACE, SCENARIO_COPY, SPAN_LOG, SUMMARY};
use trainsim::scenario::{ControlParams, Scenario, SimParams};
use trainsim::schedule::{apply_overlap_transforms, compute_mfu, gen_interleaved_1f1b, CostModel, EventGraph, EventKind, FlopsFormula};
use trainsim::sim::{self, FaultSpec, Onset, RunStatus, SimConfig, SimInput, SimResult};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let checks: [(&str, &str, fn() -> Check); 10] = [
        ("AC1", "throughput and MFU arithmetic", ac1_mfu_table),
        ("AC2", "bubble oracle", ac2_bubble_oracle),
        ("AC3", "overlap transforms", ac3_overlap),
        ("AC4", "straggler pipeline", ac4_stragglers),
        ("AC5", "hang pinpointing and recovery", ac5_hangs),
        ("AC6", "effective training time rate", ac6_campaign),
        ("AC7", "checkpoint identities", ac7_checkpoint),
        ("AC8", "group-init scaling", ac8_groupinit),
        ("AC9", "MFU-decay analyzer", ac9_decay),
        ("AC10", "determinism", ac10_determinism),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, title, f) in checks {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t0 = Instant::now();
        let res = f();
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {id} {title} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} {title} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn pcfg(tp: usize, pp: usize, dp: usize, v: usize, m: usize) -> ParallelConfig {
    ParallelConfig {
        tp,
        pp,
        dp,
        vpp: v,
        micro_batches: m,
        global_batch: dp * m,
        seq_len: 1024,
        window: None,
        layers: pp * v * 2,
        hidden: 256,
        heads: 4,
        vocab: 1000,
        params: None,
    }
}

fn cluster(nodes: usize, gpus: usize) -> ClusterSpec {
    ClusterSpec {
        num_nodes: nodes,
        gpus_per_node: gpus,
        nic_bw: 1e9,
        pcie_bw: 1e9,
        sharedstore_bw: 1e9,
        peak_flops_per_gpu: 1e12,
        tor_group_size: 1,
        nics_per_node: None,
        intra_node_bw: 1e10,
    }
}

/// Everything one simulator run needs, owned.
struct Job {
    graph: EventGraph,
    cost: CostModel,
    cluster: ClusterSpec,
    topology: Topology,
    profiles: Vec<HardwareProfile>,
}

impl Job {
    fn new(cfg: &ParallelConfig, gpus: usize, cost: CostModel) -> Self {
        let cluster = cluster(cfg.ranks().div_ceil(gpus), gpus);
        let topology = build_topology(&cluster, cfg).unwrap();
        let profiles = (0..cluster.num_nodes).map(|n| HardwareProfile::healthy(n, cluster.nics())).collect();
        Job { graph: gen_interleaved_1f1b(cfg).unwrap(), cost, cluster, topology, profiles }
    }

    fn run(&self, faults: &[FaultSpec], cfg: SimConfig) -> SimResult {
        let input = SimInput {
            graph: &self.graph,
            cost: &self.cost,
            cluster: &self.cluster,
            topology: &self.topology,
            profiles: &self.profiles,
            faults,
        };
        sim::run(&input, &cfg)
    }
}

fn steps(n: usize, seed: u64) -> SimConfig {
    SimConfig { steps: n, seed, ..SimConfig::default() }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

// AC1 ----------------------------------------------------------------------

/// 175B rows: (global batch, GPUs, iteration s, tokens/s in k, MFU %).
const TABLE_175B: [(usize, usize, f64, f64, f64); 16] = [
    (768, 256, 40.0, 39.3, 53.0),
    (768, 512, 21.2, 74.1, 49.9),
    (768, 768, 15.2, 103.8, 46.7),
    (768, 1024, 11.9, 132.7, 44.7),
    (768, 256, 32.0, 49.0, 65.3),
    (768, 512, 16.5, 95.1, 63.5),
    (768, 768, 11.5, 136.7, 61.3),
    (768, 1024, 8.9, 176.9, 59.0),
    (6144, 3072, 29.02, 433.6, 48.7),
    (6144, 6144, 14.78, 851.6, 47.8),
    (6144, 8192, 12.24, 1027.9, 43.3),
    (6144, 12288, 8.57, 1466.8, 41.2),
    (6144, 3072, 23.66, 531.9, 59.1),
    (6144, 6144, 12.21, 1030.9, 57.3),
    (6144, 8192, 9.56, 1315.6, 54.9),
    (6144, 12288, 6.34, 1984.0, 55.2),
];

fn ac1_mfu_table() -> Check {
    let mut worst_mfu: f64 = 0.0;
    let mut worst_tps: f64 = 0.0;
    let mut display_matches = 0;
    for &(batch, gpus, t, k_tps, mfu_pct) in &TABLE_175B {
        let dp = gpus / 64;
        let cfg = ParallelConfig {
            tp: 8,
            pp: 8,
            dp,
            vpp: 1,
            micro_batches: batch / dp,
            global_batch: batch,
            seq_len: 2048,
            window: None,
            layers: 96,
            hidden: 12288,
            heads: 128,
            vocab: 64_000,
            params: None,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let cl = ClusterSpec { peak_flops_per_gpu: 312e12, ..cluster(gpus / 8, 8) };
        let r = compute_mfu(t, &cfg, &cl, FlopsFormula::SixNPlusAttention);
        let expect = (batch * 2048) as f64 / t;
        ensure!(r.tokens_per_s == expect, "{gpus} GPUs: tokens/s {} != {expect}", r.tokens_per_s);
        if format!("{:.1}", r.tokens_per_s / 1e3) == format!("{k_tps:.1}") {
            display_matches += 1;
        }
        worst_tps = worst_tps.max((r.tokens_per_s / 1e3 - k_tps).abs() / k_tps);
        let d = (100.0 * r.mfu - mfu_pct).abs();
        ensure!(d <= 2.0, "{gpus} GPUs at {t}s: MFU {:.2}% vs {mfu_pct}%", 100.0 * r.mfu);
        worst_mfu = worst_mfu.max(d);
        // halving the iteration time doubles throughput and MFU
        let h = compute_mfu(t / 2.0, &cfg, &cl, FlopsFormula::SixNPlusAttention);
        ensure!((h.mfu / r.mfu - 2.0).abs() < 1e-12, "t/2 scaling");
    }
    Ok(format!(
        "{} rows: tokens/s = batch*seq/t exactly, {display_matches} rows equal the printed column at 0.1k, \
         largest deviation from printed tokens/s {:.2}%, largest MFU gap {worst_mfu:.2} pp",
        TABLE_175B.len(),
        100.0 * worst_tps
    ))
}

// AC2 ----------------------------------------------------------------------

/// Idle slots of one iteration under unit costs, found by stepping a clock
/// one slot at a time and starting each stage's next op once its inputs
/// finished. Per-stage op order is the interleaved 1F1B order; warm-up
/// deepens uniformly until the schedule completes.
fn oracle_idle(p: usize, v: usize, m: usize) -> usize {
    let total = m * v;
    // micro-batches advance in groups of p, each group through every chunk
    let order = |backward: bool| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for g in (0..m).step_by(p) {
            for c in 0..v {
                let c = if backward { v - 1 - c } else { c };
                out.extend((g..(g + p).min(m)).map(|mb| (c, mb)));
            }
        }
        out
    };
    let (fo, bo) = (order(false), order(true));
    for extra in 0..=total {
        let ops: Vec<Vec<(bool, usize, usize)>> = (0..p)
            .map(|r| {
                let base = if v == 1 { p - r - 1 } else { 2 * (p - r - 1) + (v - 1) * p };
                let w = (base.min(total) + extra).min(total);
                let mut s: Vec<_> = fo[..w].iter().map(|&(c, mb)| (true, c, mb)).collect();
                for i in 0..total - w {
                    s.push((true, fo[w + i].0, fo[w + i].1));
                    s.push((false, bo[i].0, bo[i].1));
                }
                s.extend(bo[total - w..].iter().map(|&(c, mb)| (false, c, mb)));
                s
            })
            .collect();
        // finish slot of (fwd, virtual stage, micro-batch)
        let mut fin: BTreeMap<(bool, usize, usize), usize> = BTreeMap::new();
        let mut next = vec![0usize; p];
        let mut t = 0;
        let mut stuck = 0;
        while next.iter().any(|&i| i < 2 * total) {
            let mut started = Vec::new();
            for r in 0..p {
                let Some(&(fwd, c, mb)) = ops[r].get(next[r]) else { continue };
                let vs = c * p + r;
                let dep = if fwd {
                    vs.checked_sub(1).map(|u| (true, u, mb))
                } else if vs + 1 < p * v {
                    Some((false, vs + 1, mb))
                } else {
                    Some((true, vs, mb))
                };
                if dep.is_none_or(|d| fin.get(&d).is_some_and(|&f| f <= t)) {
                    started.push(((fwd, vs, mb), t + 1));
                    next[r] += 1;
                }
            }
            stuck = if started.is_empty() { stuck + 1 } else { 0 };
            if stuck > 2 {
                break;
            }
            fin.extend(started);
            t += 1;
        }
        if next.iter().all(|&i| i == 2 * total) {
            let makespan = *fin.values().max().unwrap();
            return p * makespan - p * 2 * total;
        }
    }
    unreachable!("all-forwards-first always completes")
}

fn ac2_bubble_oracle() -> Check {
    let mut n = 0;
    for p in 1..=4 {
        for v in 1..=2 {
            for m in 1..=8 {
                let cfg = pcfg(1, p, 1, v, m);
                let sim = simulate_bubbles(&cfg, &CostModel::unit(), 1).map_err(|e| e.to_string())?;
                let oracle = oracle_idle(p, v, m) as f64;
                ensure!(
                    (sim.total_idle_slots - oracle).abs() < 1e-9,
                    "p={p} v={v} m={m}: simulated {} idle slots, oracle {oracle}",
                    sim.total_idle_slots
                );
                n += 1;
            }
        }
    }
    let c = compare_large_batch(&pcfg(1, 4, 1, 2, 8), &CostModel::unit(), 4).map_err(|e| e.to_string())?;
    ensure!((c.simulated_ratio - 16.0).abs() < 1e-9, "simulated LAMB ratio {}", c.simulated_ratio);
    ensure!((c.analytic_ratio - 16.0).abs() < 1e-9, "formula LAMB ratio {}", c.analytic_ratio);
    ensure!(c.quoted_reduction == 0.875 && !c.note.is_empty(), "report must carry the quoted 87.5%");
    Ok(format!("{n} shapes match the oracle; LAMB ratio {} ({})", c.simulated_ratio, c.note))
}

// AC3 ----------------------------------------------------------------------

fn ac3_overlap() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gains = [0usize; 3];
    for case in 0..200 {
        let tp = [1, 2][rng.random_range(0..2)];
        let pp = rng.random_range(1..=4);
        let dp = rng.random_range(1..=2);
        let v = rng.random_range(1..=3);
        let m = rng.random_range(1..=8);
        let cost = CostModel {
            t_fwd_chunk: rng.random_range(0.5..2.0),
            t_bwd_chunk: rng.random_range(1.0..4.0),
            t_dataload: rng.random_range(0.0..1.0),
            t_opt: rng.random_range(0.0..0.5),
            dp_bytes_per_chunk: rng.random_range(0.0..2e9),
            p2p_bytes: rng.random_range(0.0..1e9),
            tp_bytes_per_chunk: rng.random_range(0.0..4e9),
            gemm_chunks: rng.random_range(1..=4),
            ..CostModel::default()
        };
        let cfg = pcfg(tp, pp, dp, v, m);
        let job = Job::new(&cfg, tp, cost.clone());
        let base = job.run(&[], steps(2, case));
        ensure!(base.status == RunStatus::Completed, "case {case}: baseline {:?}", base.status);
        for (i, which) in ["dp", "pp", "tp"].into_iter().enumerate() {
            let c = CostModel { overlap_dp: i == 0, overlap_pp: i == 1, overlap_tp: i == 2, ..cost.clone() };
            let (g, _) = apply_overlap_transforms(&job.graph, &c).map_err(|e| e.to_string())?;
            let fast = Job { graph: g, cost: c, cluster: job.cluster.clone(), topology: job.topology.clone(), profiles: job.profiles.clone() };
            let r = fast.run(&[], steps(2, case));
            ensure!(r.status == RunStatus::Completed, "case {case} {which}: {:?}", r.status);
            for (a, b) in r.iteration_times.iter().zip(&base.iteration_times) {
                ensure!(*a <= b + 1e-9 * b.max(1.0), "case {case} ({tp},{pp},{dp},{v},{m}) {which}: {a} > {b}");
                if *a < b - 1e-9 {
                    gains[i] += 1;
                }
            }
        }
    }
    let g = gen_interleaved_1f1b(&pcfg(1, 2, 2, 3, 4)).unwrap();
    let (_, rep) = apply_overlap_transforms(&g, &CostModel { overlap_dp: true, ..CostModel::unit() }).map_err(|e| e.to_string())?;
    ensure!(rep.before.ops == 6 && rep.before.exposed_allgather == 1, "v=3 before: {:?}", rep.before);
    ensure!(rep.after.exposed_allgather == 0, "v=3 after: {:?}", rep.after);
    ensure!(rep.before.exposed_reducescatter == rep.after.exposed_reducescatter, "reduce-scatter exposure changed");
    ensure!((rep.removed_fraction - 1.0 / 6.0).abs() < 1e-12, "removed fraction {}", rep.removed_fraction);
    Ok(format!(
        "200 configs never slower; strictly faster steps dp/pp/tp = {}/{}/{}; v=3 removes {:.4} of exposed DP ops",
        gains[0], gains[1], gains[2], rep.removed_fraction
    ))
}

// AC4 ----------------------------------------------------------------------

fn ac4_stragglers() -> Check {
    // 128 nodes x 8 GPUs
    let cfg = ParallelConfig { global_batch: 32 * 4, ..pcfg(8, 4, 32, 1, 4) };
    let cost = CostModel { dp_bytes_per_chunk: 2e7, p2p_bytes: 1e6, compute_noise: 0.01, ..CostModel::default() };
    let job = Job::new(&cfg, 8, cost);
    ensure!(job.topology.ranks() == 1024 && job.cluster.num_nodes == 128, "layout");
    let mut gains = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slow: Vec<usize> = sample(&mut rng, 128, 5).into_vec();
        slow.sort();
        let faults: Vec<FaultSpec> = slow.iter().map(|&n| FaultSpec::straggler(n, 1.1)).collect();
        let r = job.run(&faults, steps(5, seed));
        ensure!(r.status == RunStatus::Completed, "seed {seed}: {:?}", r.status);
        let hm = build_heatmap(&SpanTable::from_spans(r.spans), &job.topology, HeatDim::Node).map_err(|e| e.to_string())?;
        let found = detect_stragglers(&hm, 0.05).map_err(|e| e.to_string())?;
        ensure!(found == slow, "seed {seed}: flagged {found:?}, injected {slow:?}");
        // the removal comparison runs on every tenth seed
        if seed % 10 != 0 {
            continue;
        }
        let clean = job.run(&[], steps(5, seed));
        let mfu = |it: &[f64]| compute_mfu(median(it), &cfg, &job.cluster, FlopsFormula::default()).mfu;
        let (with, without) = (mfu(&r.iteration_times), mfu(&clean.iteration_times));
        ensure!(without > with, "seed {seed}: MFU {with} with stragglers, {without} without");
        gains.push(without / with - 1.0);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    Ok(format!(
        "100/100 seeds flag exactly the 5 slow nodes; removing them raises MFU on {} of {} seeds checked, by {:.2}% on average",
        gains.len(),
        gains.len(),
        100.0 * mean
    ))
}

// AC5 ----------------------------------------------------------------------

fn hang_scenario(seed: u64, rank: usize, step: usize) -> Scenario {
    Scenario {
        version: 1,
        name: format!("hang-{seed}"),
        seed,
        steps: 10,
        cluster: cluster(8, 2),
        parallel: ParallelConfig { global_batch: 16, ..pcfg(2, 2, 4, 1, 4) },
        cost: CostModel { dp_bytes_per_chunk: 1e8, p2p_bytes: 1e7, tp_bytes_per_chunk: 1e7, ..CostModel::unit() },
        profiles: vec![],
        faults: vec![FaultSpec::hang(rank, Onset::Step(step))],
        control: ControlParams { spares: 2, ..ControlParams::default() },
        checkpoint: CheckpointConfig { interval: 2, partition_bytes: 1e9 },
        sim: SimParams::default(),
        data: None,
        output_dir: None,
    }
}

fn ac5_hangs() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for i in 0..100u64 {
        let rank = rng.random_range(0..16);
        let step = rng.random_range(3..9);
        let sc = hang_scenario(i, rank, step);
        let node = sc.topology().unwrap().node_of(rank);
        let a = run_scenario(&sc).map_err(|e| format!("scenario {i}: {e}"))?;
        let s = &a.summary;
        ensure!(s.outcome == Outcome::Completed && s.steps_completed == sc.steps, "scenario {i}: {:?}", s.outcome);
        ensure!(s.recoveries.len() == 1, "scenario {i}: {} recoveries", s.recoveries.len());
        let r = &s.recoveries[0];
        let hang = r.hang.as_ref().ok_or(format!("scenario {i}: no pinpoint"))?;
        let want = BTreeSet::from([rank]);
        tp += hang.silent_ranks.intersection(&want).count();
        fp += hang.silent_ranks.difference(&want).count();
        fnn += want.difference(&hang.silent_ranks).count();
        ensure!(hang.nodes == BTreeSet::from([node]), "scenario {i}: nodes {:?}, want {node}", hang.nodes);
        ensure!(r.evicted == vec![node], "scenario {i}: evicted {:?}", r.evicted);
        ensure!(r.trace_valid && r.resumed_state_ok, "scenario {i}: trace {:?}", r.trace);
        let phases: Vec<RecoveryPhase> = r.trace.iter().map(|t| t.to).collect();
        use RecoveryPhase::*;
        ensure!(phases == [Suspending, Diagnosing, Evicting, Rescheduling, Resuming, Running], "scenario {i}: {phases:?}");
        // resumed from the newest checkpoint that was durable at detection
        let durable = s.checkpoints.iter().filter(|c| c.stage2_done_at <= r.detected_at).map(|c| c.ckpt_id).max();
        ensure!(durable.is_some() && r.resume.checkpoint_id == durable, "scenario {i}: resumed {:?}, durable {durable:?}", r.resume);
        ensure!(r.resume.step as u64 == durable.unwrap(), "scenario {i}: resume step {}", r.resume.step);
        ensure!(!s.final_roster.contains(&node), "scenario {i}: hung node still in roster");
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    ensure!(precision == 1.0 && recall == 1.0, "precision {precision}, recall {recall}");
    Ok(format!("100 hangs: precision {precision}, recall {recall}, every recovery resumed from a durable checkpoint"))
}

// AC6 ----------------------------------------------------------------------

fn ac6_campaign() -> Check {
    let cfg = CampaignConfig {
        cluster: ClusterSpec { nic_bw: 25e9, ..cluster(64, 8) },
        spares: 8,
        iteration_time: 10.0,
        duration: 21.0 * 86400.0,
        faults: 120,
        checkpoint_interval: 30,
        checkpoint_stall: 2.0,
        checkpoint_upload: 60.0,
        resume_time: 60.0,
        repair_time: 12.0 * 3600.0,
        traffic_bps: 1e10,
        durations: PhaseDurations::default(),
        diag: DiagConfig::default(),
        rules: AnomalyRule::defaults(),
        seed: 6,
    };
    let r = run_campaign(&cfg).map_err(|e| e.to_string())?;
    ensure!(r.records.len() > 100, "{} faults injected", r.records.len());
    ensure!(r.resumes > 100, "{} resumes", r.resumes);
    ensure!(r.effective_time_rate > 0.9, "effective time rate {}", r.effective_time_rate);
    for rec in &r.records {
        ensure!(rec.trace_ok, "broken trace: {rec:?}");
        ensure!(rec.detection_and_diagnosis() < 600.0, "detection+diagnosis {}: {rec:?}", rec.detection_and_diagnosis());
        ensure!(rec.catch_up < 900.0, "catch-up {}: {rec:?}", rec.catch_up);
    }
    Ok(format!(
        "{} faults over 21 days, {} resumes, rate {:.4}, worst detect+diagnose {:.0}s, worst catch-up {:.0}s",
        r.records.len(),
        r.resumes,
        r.effective_time_rate,
        r.max_detection_and_diagnosis,
        r.max_catch_up
    ))
}

// AC7 ----------------------------------------------------------------------

fn ac7_checkpoint() -> Check {
    for dp in [1, 2, 4, 8] {
        let cl = ClusterSpec { nic_bw: 25e9, pcie_bw: 20e9, sharedstore_bw: 5e9, ..cluster(2 * 4 * dp, 1) };
        let cfg = ParallelConfig { tp: 1, pp: 8, dp, micro_batches: 8, global_batch: 8 * dp, ..pcfg(1, 8, dp, 1, 8) };
        let topo = build_topology(&cl, &cfg).map_err(|e| e.to_string())?;
        let (mut meta, stall) = checkpoint(10, 100.0, 4e9, &cl, &topo);
        ensure!(stall == 4e9 / cl.pcie_bw, "dp={dp}: blocking time {stall}");
        ensure!((meta.stage1_done_at - 100.0 - stall).abs() < 1e-12, "dp={dp}: stage 1 end");
        ensure!(meta.stage2_done_at > meta.stage1_done_at, "dp={dp}: upload must run after the snapshot");
        ensure!(recover(&meta, &topo, &cl, true).is_err(), "dp={dp}: host-only checkpoint must not be resumable");
        meta.durability = Durability::Durable;
        let d = recover(&meta, &topo, &cl, true).map_err(|e| e.to_string())?;
        let n = recover(&meta, &topo, &cl, false).map_err(|e| e.to_string())?;
        ensure!(d.store_bytes_read * dp as f64 == n.store_bytes_read, "dp={dp}: {} x {dp} != {}", d.store_bytes_read, n.store_bytes_read);
    }
    // in a run, each checkpoint costs the job exactly its snapshot copy
    let mut sc = hang_scenario(1, 0, 0);
    sc.faults.clear();
    sc.checkpoint = CheckpointConfig { interval: 0, partition_bytes: 2e9 };
    let plain = run_scenario(&sc).map_err(|e| e.to_string())?.summary;
    sc.checkpoint.interval = 3;
    let ck = run_scenario(&sc).map_err(|e| e.to_string())?.summary;
    let stall = 2e9 / sc.cluster.pcie_bw;
    let extra = ck.elapsed - plain.elapsed;
    let n = ck.checkpoints.len() as f64;
    ensure!(n > 0.0 && (extra - n * stall).abs() < 1e-6, "{n} checkpoints cost {extra}s, expected {}", n * stall);
    Ok(format!("designated reads x dp = naive reads for dp in 1,2,4,8; {n} checkpoints blocked training {extra:.3}s = {n} x stage-1"))
}

// AC8 ----------------------------------------------------------------------

fn ac8_groupinit() -> Check {
    let ns = [64, 128, 256, 512, 1024, 2048];
    let rows = scaling_table(&ns, 2, 4, 5e-4, 1e4).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let naive: Vec<f64> = rows.iter().map(|r| r.naive_blocking.messages as f64).collect();
    let opt: Vec<f64> = rows.iter().map(|r| r.optimized.messages as f64).collect();
    let (sn, so) = (loglog_slope(&xs, &naive), loglog_slope(&xs, &opt));
    ensure!((sn - 2.0).abs() <= 0.1, "naive slope {sn}");
    ensure!((so - 1.0).abs() <= 0.1, "optimized slope {so}");
    for r in &rows {
        ensure!(
            r.naive_blocking.time > r.naive_nonblocking.time && r.naive_nonblocking.time > r.optimized.time,
            "n={}: {} / {} / {}",
            r.n,
            r.naive_blocking.time,
            r.naive_nonblocking.time,
            r.optimized.time
        );
    }
    let last = rows.last().unwrap();
    Ok(format!(
        "slopes {sn:.3} (naive) vs {so:.3} (optimized); at n=2048 {:.1}s > {:.1}s > {:.2}s",
        last.naive_blocking.time, last.naive_nonblocking.time, last.optimized.time
    ))
}

// AC9 ----------------------------------------------------------------------

fn ac9_decay() -> Check {
    let cost = CostModel { t_fwd_chunk: 0.01, t_bwd_chunk: 0.02, dp_bytes_per_chunk: 1e6, ..CostModel::default() };
    let job = Job::new(&pcfg(1, 2, 2, 1, 4), 1, cost);
    let r = job.run(&[FaultSpec::skew(3, 0, 0.002)], steps(200, 9));
    ensure!(r.status == RunStatus::Completed, "{:?}", r.status);
    let rep = analyze_mfu_decay(&SpanTable::from_spans(r.spans), &job.topology).map_err(|e| e.to_string())?;
    let err = (rep.rs_skew_slope - 0.002).abs() / 0.002;
    ensure!(err <= 0.05, "recovered {} s/step", rep.rs_skew_slope);
    ensure!(rep.attribution == Attribution::ReduceScatterSkew, "attribution {:?}", rep.attribution);
    ensure!(rep.lagging_rank == Some(3), "lagging rank {:?}", rep.lagging_rank);
    let unstable: Vec<EventKind> = rep.phases.iter().filter(|p| !p.stable).map(|p| p.kind).collect();
    ensure!(unstable.is_empty(), "unstable compute phases {unstable:?}");
    ensure!(rep.iteration_slope > 0.0, "iteration time must grow");
    Ok(format!(
        "slope {:.6} s/step ({:.2}% off), blamed on reduce-scatter launch skew of rank 3, compute phases stable",
        rep.rs_skew_slope,
        100.0 * err
    ))
}

// AC10 ---------------------------------------------------------------------

fn ac10_determinism() -> Check {
    let mut with_faults = hang_scenario(42, 5, 4);
    with_faults.faults.push(FaultSpec::straggler(1, 1.1));
    with_faults.cost.compute_noise = 0.02;
    let mut crash = hang_scenario(43, 0, 0);
    crash.faults = vec![FaultSpec::crash(trainsim::sim::Target::Rank(9), Onset::Step(5))];
    let scenarios = [hang_scenario(41, 0, 0), with_faults, crash];
    let mut files = 0;
    for (i, sc) in scenarios.iter().enumerate() {
        let mut sc = sc.clone();
        if i == 0 {
            sc.faults.clear();
        }
        let d1 = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d2 = tempfile::tempdir().map_err(|e| e.to_string())?;
        for d in [&d1, &d2] {
            let a = run_scenario(&sc).map_err(|e| e.to_string())?;
            write_artifacts(d.path(), &sc, &a).map_err(|e| e.to_string())?;
        }
        for f in [SPAN_LOG, SUMMARY, RECOVERY_TRACE, SCENARIO_COPY] {
            let a = std::fs::read(d1.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
            let b = std::fs::read(d2.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
            ensure!(!a.is_empty() && a == b, "scenario {i}: {f} differs between runs");
            files += 1;
        }
        // and a different seed changes the noisy run
        if sc.cost.compute_noise > 0.0 {
            let mut other = sc.clone();
            other.seed += 1;
            let a = run_scenario(&sc).map_err(|e| e.to_string())?;
            let b = run_scenario(&other).map_err(|e| e.to_string())?;
            ensure!(a.spans != b.spans, "seed has no effect");
        }
    }
    Ok(format!("{} scenarios, {files} artifact files byte-identical across reruns", scenarios.len()))
}
