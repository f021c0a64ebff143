//! Lightweight node self-checks. Tests only see bandwidth and liveness
//! measurements through [`Probe`]; the hardware profiles stay hidden.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::cluster::{ClusterSpec, Fleet};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Transfer endpoint inside a host for loopback tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Memory,
    Gpu(usize),
}

/// Measurement access to nodes. Every call is one simulated benchmark run.
pub trait Probe {
    fn spec(&self) -> &ClusterSpec;
    fn node_count(&self) -> usize;
    /// NIC to endpoint bandwidth in bytes/s, before measurement noise.
    fn loopback(&self, node: usize, nic: usize, endpoint: Endpoint) -> f64;
    fn rnic_pair(&self, node: usize, a: usize, b: usize) -> f64;
    /// Intra-host all-to-all bandwidth; `None` when some GPU never answers.
    fn alltoall(&self, node: usize) -> Option<f64>;
    /// Per-node cross-host bandwidth into a collective; `None` when the
    /// node's GPUs hang in the collective on this attempt.
    fn collective_link(&self, node: usize, rng: &mut ChaCha8Rng) -> Option<f64>;
}

impl Probe for Fleet {
    fn spec(&self) -> &ClusterSpec {
        Fleet::spec(self)
    }

    fn node_count(&self) -> usize {
        self.len()
    }

    fn loopback(&self, node: usize, nic: usize, endpoint: Endpoint) -> f64 {
        let p = &self.profiles()[node];
        let dead = matches!(endpoint, Endpoint::Gpu(g) if p.failed_gpus.contains(&g));
        if dead {
            return 0.0;
        }
        self.spec().pcie_bw * p.link(nic)
    }

    fn rnic_pair(&self, node: usize, a: usize, b: usize) -> f64 {
        let p = &self.profiles()[node];
        self.spec().nic_bw * p.link(a).min(p.link(b))
    }

    fn alltoall(&self, node: usize) -> Option<f64> {
        let p = &self.profiles()[node];
        p.failed_gpus.is_empty().then_some(self.spec().intra_node_bw)
    }

    fn collective_link(&self, node: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
        let p = &self.profiles()[node];
        let hang = p.hang_prob >= 1.0 || (p.hang_prob > 0.0 && rng.random::<f64>() < p.hang_prob);
        (!hang).then_some(self.spec().nic_bw * p.min_link())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    pub threshold: f64,
    /// Relative std-dev of Gaussian measurement noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Achievable fraction of link bandwidth for collectives.
    pub collective_efficiency: f64,
    pub loopback_s: f64,
    pub rnic_s: f64,
    pub alltoall_s: f64,
    pub allreduce_s: f64,
    /// Time before a hung all-reduce is declared failed.
    pub allreduce_timeout_s: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            threshold: 0.8,
            noise_sigma: 0.0,
            seed: 0,
            collective_efficiency: 0.9,
            loopback_s: 30.0,
            rnic_s: 30.0,
            alltoall_s: 45.0,
            allreduce_s: 45.0,
            allreduce_timeout_s: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Loopback,
    RnicToRnic,
    IntraHostAlltoall,
    NeighborAllreduce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    /// Worst measured value across the test's entries, bytes/s.
    pub measured: f64,
    pub expected: f64,
    pub passed: bool,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub node_id: usize,
    pub tests: Vec<TestResult>,
    pub duration: f64,
}

impl DiagReport {
    pub fn passed(&self) -> bool {
        self.tests.iter().all(|t| t.passed)
    }

    fn push(&mut self, t: TestResult) {
        self.duration += t.duration;
        self.tests.push(t);
    }
}

fn noisy(rng: &mut ChaCha8Rng, sigma: f64, v: f64) -> f64 {
    if sigma == 0.0 {
        return v;
    }
    let z: f64 = StandardNormal.sample(rng);
    (v * (1.0 + sigma * z)).max(0.0)
}

fn result(test: TestKind, measured: f64, expected: f64, cfg: &DiagConfig, duration: f64) -> TestResult {
    TestResult {
        test,
        measured,
        expected,
        passed: measured >= cfg.threshold * expected,
        duration,
        matrix: None,
        note: String::new(),
    }
}

fn test_rng(cfg: &DiagConfig, node: usize, test: TestKind, round: u64) -> ChaCha8Rng {
    keyed_rng(cfg.seed, &[node as u64, test as u64, round])
}

/// Rows are NICs, columns are memory followed by each GPU.
pub fn loopback_test(probe: &dyn Probe, node: usize, cfg: &DiagConfig) -> TestResult {
    let spec = probe.spec();
    let mut rng = test_rng(cfg, node, TestKind::Loopback, 0);
    let endpoints: Vec<Endpoint> =
        std::iter::once(Endpoint::Memory).chain((0..spec.gpus_per_node).map(Endpoint::Gpu)).collect();
    let matrix: Vec<Vec<f64>> = (0..spec.nics())
        .map(|nic| endpoints.iter().map(|&e| noisy(&mut rng, cfg.noise_sigma, probe.loopback(node, nic, e))).collect())
        .collect();
    let worst = matrix.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let mut r = result(TestKind::Loopback, worst, spec.pcie_bw, cfg, cfg.loopback_s);
    r.matrix = Some(matrix);
    r
}

/// Pairwise NIC bandwidth; the diagonal is left at the nominal value.
pub fn rnic_to_rnic_test(probe: &dyn Probe, node: usize, cfg: &DiagConfig) -> TestResult {
    let spec = probe.spec();
    let n = spec.nics();
    let mut rng = test_rng(cfg, node, TestKind::RnicToRnic, 0);
    let mut matrix = vec![vec![spec.nic_bw; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                matrix[a][b] = noisy(&mut rng, cfg.noise_sigma, probe.rnic_pair(node, a, b));
            }
        }
    }
    let worst = matrix.iter().flatten().copied().fold(spec.nic_bw, f64::min);
    let mut r = result(TestKind::RnicToRnic, worst, spec.nic_bw, cfg, cfg.rnic_s);
    r.matrix = Some(matrix);
    r
}

pub fn intra_host_alltoall(probe: &dyn Probe, node: usize, cfg: &DiagConfig) -> TestResult {
    let spec = probe.spec();
    let expected = spec.intra_node_bw * cfg.collective_efficiency;
    let mut rng = test_rng(cfg, node, TestKind::IntraHostAlltoall, 0);
    match probe.alltoall(node) {
        Some(bw) => {
            let m = noisy(&mut rng, cfg.noise_sigma, bw * cfg.collective_efficiency);
            result(TestKind::IntraHostAlltoall, m, expected, cfg, cfg.alltoall_s)
        }
        None => {
            let mut r = result(TestKind::IntraHostAlltoall, 0.0, expected, cfg, cfg.alltoall_s);
            r.note = "GPU did not respond".into();
            r
        }
    }
}

/// Outcome of one all-reduce among `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllreduceRun {
    pub nodes: Vec<usize>,
    /// `None` on timeout.
    pub bandwidth: Option<f64>,
    pub expected: f64,
    pub passed: bool,
    pub duration: f64,
}

/// Tracks which nodes may join an all-reduce test.
#[derive(Debug, Default)]
pub struct DiagSession {
    intra_passed: BTreeSet<usize>,
}

impl DiagSession {
    pub fn record_intra(&mut self, node: usize, passed: bool) {
        if passed {
            self.intra_passed.insert(node);
        }
    }

    /// All-reduce among `nodes`; every node must have passed its intra-host
    /// test first.
    pub fn neighbor_allreduce(
        &self,
        probe: &dyn Probe,
        nodes: &[usize],
        cfg: &DiagConfig,
        round: u64,
    ) -> Result<AllreduceRun> {
        if let Some(&n) = nodes.iter().find(|n| !self.intra_passed.contains(n)) {
            return Err(Error::OrderingViolation(n));
        }
        let spec = probe.spec();
        let expected = spec.nic_bw * cfg.collective_efficiency;
        let mut bw = Some(f64::INFINITY);
        for &n in nodes {
            let mut rng = test_rng(cfg, n, TestKind::NeighborAllreduce, round);
            match (bw, probe.collective_link(n, &mut rng)) {
                (Some(b), Some(l)) => bw = Some(b.min(noisy(&mut rng, cfg.noise_sigma, l * cfg.collective_efficiency))),
                _ => bw = None,
            }
        }
        let passed = matches!(bw, Some(b) if b >= cfg.threshold * expected);
        Ok(AllreduceRun {
            nodes: nodes.to_vec(),
            bandwidth: bw,
            expected,
            passed,
            duration: if bw.is_some() { cfg.allreduce_s } else { cfg.allreduce_timeout_s },
        })
    }

    /// Runs the all-reduce on `nodes` and, if it fails, splits the group in
    /// halves until the failing nodes are isolated. Returns the culprits,
    /// every run performed and the number of rounds.
    pub fn bisect_allreduce(
        &self,
        probe: &dyn Probe,
        nodes: &[usize],
        cfg: &DiagConfig,
    ) -> Result<(BTreeSet<usize>, Vec<AllreduceRun>, u32)> {
        let mut runs = Vec::new();
        let mut culprits = BTreeSet::new();
        let mut frontier = vec![nodes.to_vec()];
        let mut round = 0u32;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for group in frontier {
                let run = self.neighbor_allreduce(probe, &group, cfg, round as u64)?;
                let failed = !run.passed;
                runs.push(run);
                if !failed {
                    continue;
                }
                if group.len() == 1 {
                    culprits.insert(group[0]);
                } else {
                    let mid = group.len() / 2;
                    next.push(group[..mid].to_vec());
                    next.push(group[mid..].to_vec());
                }
            }
            frontier = next;
            if !frontier.is_empty() {
                round += 1;
            }
        }
        Ok((culprits, runs, round))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub reports: Vec<DiagReport>,
    pub implicated: BTreeSet<usize>,
    /// Wall time of the suite; nodes test concurrently.
    pub duration: f64,
}

impl SuiteResult {
    pub fn report(&self, node: usize) -> Option<&DiagReport> {
        self.reports.iter().find(|r| r.node_id == node)
    }
}

/// Runs every test on `nodes`. The all-reduce runs per ToR group among the
/// members that passed their intra-host test.
pub fn run_suite(probe: &dyn Probe, nodes: &[usize], cfg: &DiagConfig) -> SuiteResult {
    let spec = probe.spec().clone();
    let mut session = DiagSession::default();
    let mut reports: Vec<DiagReport> = Vec::new();
    for &n in nodes {
        let mut rep = DiagReport { node_id: n, tests: Vec::new(), duration: 0.0 };
        rep.push(loopback_test(probe, n, cfg));
        rep.push(rnic_to_rnic_test(probe, n, cfg));
        let intra = intra_host_alltoall(probe, n, cfg);
        session.record_intra(n, intra.passed);
        rep.push(intra);
        reports.push(rep);
    }
    let mut by_tor: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &n in nodes {
        if session.intra_passed.contains(&n) {
            by_tor.entry(spec.tor_of(n)).or_default().push(n);
        }
    }
    for group in by_tor.values() {
        let (culprits, runs, rounds) = session
            .bisect_allreduce(probe, group, cfg)
            .expect("groups only hold nodes that passed the intra-host test");
        let first = &runs[0];
        for &n in group {
            // every member spends the group's time, including bisection
            // rounds it took part in
            let mine: Vec<&AllreduceRun> = runs.iter().filter(|r| r.nodes.contains(&n)).collect();
            let duration: f64 = mine.iter().map(|r| r.duration).sum();
            let bad = culprits.contains(&n);
            let own = mine.last().unwrap();
            let measured = if bad { own.bandwidth.unwrap_or(0.0) } else { own.bandwidth.unwrap_or(first.expected) };
            let mut t = result(TestKind::NeighborAllreduce, measured, first.expected, cfg, duration);
            t.passed = !bad;
            if bad && own.bandwidth.is_none() {
                t.note = "all-reduce timed out".into();
            }
            if rounds > 0 {
                t.note = format!("{}bisected in {rounds} rounds", if t.note.is_empty() { String::new() } else { format!("{}; ", t.note) });
            }
            reports.iter_mut().find(|r| r.node_id == n).unwrap().push(t);
        }
    }
    let implicated = reports.iter().filter(|r| !r.passed()).map(|r| r.node_id).collect();
    let duration = reports.iter().map(|r| r.duration).fold(0.0, f64::max);
    SuiteResult { reports, implicated, duration }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::HardwareProfile;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn spec(nodes: usize, tor: usize) -> ClusterSpec {
        ClusterSpec {
            num_nodes: nodes,
            gpus_per_node: 4,
            nic_bw: 25e9,
            pcie_bw: 20e9,
            sharedstore_bw: 5e9,
            peak_flops_per_gpu: 1e12,
            tor_group_size: tor,
            nics_per_node: Some(4),
            intra_node_bw: 300e9,
        }
    }

    fn degraded(node: usize, nic: usize, d: f64) -> HardwareProfile {
        let mut p = HardwareProfile::healthy(node, 4);
        p.link_degradations[nic] = d;
        p
    }

    #[test]
    fn healthy_loopback_is_nominal() {
        let f = Fleet::new(spec(1, 1), 1, &[]).unwrap();
        let r = loopback_test(&f, 0, &DiagConfig::default());
        assert!(r.passed);
        assert!(r.matrix.unwrap().iter().flatten().all(|&v| v == 20e9));
    }

    #[test]
    fn degraded_nic_scales_its_row_only() {
        let f = Fleet::new(spec(1, 1), 1, &[degraded(0, 2, 0.5)]).unwrap();
        let m = loopback_test(&f, 0, &DiagConfig::default()).matrix.unwrap();
        for (i, row) in m.iter().enumerate() {
            let want = if i == 2 { 10e9 } else { 20e9 };
            assert!(row.iter().all(|&v| v == want));
        }
        let m = rnic_to_rnic_test(&f, 0, &DiagConfig::default()).matrix.unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let want = if a != b && (a == 2 || b == 2) { 12.5e9 } else { 25e9 };
                assert_eq!(m[a][b], want);
            }
        }
    }

    #[test]
    fn loopback_flag_rate_matches_normal_tail() {
        // one NIC at 0.85 with 3% noise: each of its 5 entries is flagged
        // when 0.85 (1 + 0.03 z) < 0.8
        let cfg0 = DiagConfig { noise_sigma: 0.03, ..DiagConfig::default() };
        let f = Fleet::new(spec(1, 1), 1, &[degraded(0, 1, 0.85)]).unwrap();
        let trials = 10_000;
        let mut flagged = 0;
        for seed in 0..trials {
            let cfg = DiagConfig { seed, ..cfg0.clone() };
            let m = loopback_test(&f, 0, &cfg).matrix.unwrap();
            if m[1].iter().any(|&v| v < 0.8 * 20e9) {
                flagged += 1;
            }
        }
        let z = (0.8 / 0.85 - 1.0) / 0.03;
        let p1 = Normal::new(0.0, 1.0).unwrap().cdf(z);
        let expected = 1.0 - (1.0 - p1).powi(5);
        let rate = flagged as f64 / trials as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((rate - expected).abs() < 4.0 * se, "rate {rate} expected {expected}");
    }

    #[test]
    fn allreduce_before_intra_host_is_rejected() {
        let f = Fleet::new(spec(4, 4), 4, &[]).unwrap();
        let s = DiagSession::default();
        assert!(matches!(
            s.neighbor_allreduce(&f, &[0, 1], &DiagConfig::default(), 0),
            Err(Error::OrderingViolation(0))
        ));
    }

    #[test]
    fn hang_prone_node_is_bisected_out() {
        let mut p = HardwareProfile::healthy(6, 4);
        p.hang_prob = 1.0;
        let f = Fleet::new(spec(8, 4), 8, &[p]).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let r = run_suite(&f, &all, &DiagConfig::default());
        assert_eq!(r.implicated, BTreeSet::from([6]));
        // tor group {4..7} bisects twice: {4,5},{6,7} then {6},{7}
        let rep = r.report(6).unwrap();
        let ar = rep.tests.iter().find(|t| t.test == TestKind::NeighborAllreduce).unwrap();
        assert!(ar.note.contains("2 rounds"));
        assert!(r.duration < 600.0);
    }

    #[test]
    fn group_bandwidth_is_the_weakest_member() {
        let f = Fleet::new(spec(4, 4), 4, &[degraded(2, 0, 0.5)]).unwrap();
        let mut s = DiagSession::default();
        for n in 0..4 {
            s.record_intra(n, true);
        }
        let run = s.neighbor_allreduce(&f, &[0, 1, 2, 3], &DiagConfig::default(), 0).unwrap();
        assert_eq!(run.bandwidth, Some(25e9 * 0.5 * 0.9));
    }

    #[test]
    fn compute_stragglers_pass() {
        let mut p = HardwareProfile::healthy(1, 4);
        p.compute_multiplier = 1.1;
        let f = Fleet::new(spec(4, 4), 4, &[p]).unwrap();
        let r = run_suite(&f, &[0, 1, 2, 3], &DiagConfig::default());
        assert!(r.implicated.is_empty());
    }

    #[test]
    fn report_duration_is_sum_of_tests() {
        let f = Fleet::new(spec(4, 2), 4, &[degraded(3, 1, 0.3)]).unwrap();
        let r = run_suite(&f, &[0, 1, 2, 3], &DiagConfig::default());
        for rep in &r.reports {
            let sum: f64 = rep.tests.iter().map(|t| t.duration).sum();
            assert_eq!(rep.duration, sum);
            for t in &rep.tests {
                if t.test != TestKind::NeighborAllreduce {
                    assert_eq!(t.passed, t.measured >= 0.8 * t.expected);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// With no noise the suite implicates exactly the nodes with a weak
        /// link, a hang-prone GPU or a dead GPU.
        #[test]
        fn zero_noise_ground_truth(
            faults in proptest::collection::vec((0usize..4, 0usize..4, 0.1f64..1.0, any::<bool>(), any::<bool>(), 1.0f64..1.3), 8)
        ) {
            let mut profiles = Vec::new();
            let mut truth = BTreeSet::new();
            for (n, &(kind, nic, d, hang, gpu, mult)) in faults.iter().enumerate() {
                let mut p = HardwareProfile::healthy(n, 4);
                p.compute_multiplier = mult;
                if kind == 0 {
                    p.link_degradations[nic] = d;
                    if d < 0.8 {
                        truth.insert(n);
                    }
                }
                if kind == 1 && hang {
                    p.hang_prob = 1.0;
                    truth.insert(n);
                }
                if kind == 2 && gpu {
                    p.failed_gpus = vec![nic];
                    truth.insert(n);
                }
                profiles.push(p);
            }
            let f = Fleet::new(spec(8, 4), 8, &profiles).unwrap();
            let nodes: Vec<usize> = (0..8).collect();
            let r = run_suite(&f, &nodes, &DiagConfig::default());
            prop_assert_eq!(r.implicated, truth);
            prop_assert!(r.reports.iter().all(|rep| rep.duration < 600.0));
        }
    }
}
