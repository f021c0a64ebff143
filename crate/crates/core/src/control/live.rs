//! A [`LocalCluster`] driven against the wall clock, so operators can watch
//! and poke a recovery while it unfolds.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::driver::{ControlEvent, DriverStatus};
use super::executor::Telemetry;
use super::heartbeat::HEARTBEAT_INTERVAL;
use super::local::{Batch, LocalCluster};
use super::recovery::RecoveryPhase;
use crate::cluster::Fleet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    pub tick: Duration,
    /// Per-node RDMA rate reported while running.
    pub traffic_bps: f64,
    /// Evicted nodes come back as spares after this many simulated seconds.
    pub repair_after: Option<f64>,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig { speed: 10.0, tick: Duration::from_millis(20), traffic_bps: 1e9, repair_after: Some(600.0) }
    }
}

enum Cmd {
    Evict { node: usize, reason: String, reply: Sender<Result<RecoveryPhase>> },
    Stop,
}

/// Snapshot plus event log, readable without going through the loop.
#[derive(Debug, Default)]
pub struct LiveView {
    pub status: Option<DriverStatus>,
    pub events: Vec<ControlEvent>,
}

pub struct LiveCluster {
    tx: Sender<Cmd>,
    pub view: Arc<Mutex<LiveView>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

/// Cloneable eviction entry point.
#[derive(Clone)]
pub struct LiveHandle {
    tx: Sender<Cmd>,
}

impl LiveHandle {
    pub fn evict(&self, node: usize, reason: &str) -> Result<RecoveryPhase> {
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(Cmd::Evict { node, reason: reason.to_string(), reply })
            .map_err(|_| Error::Io("control loop stopped".into()))?;
        rx.recv().map_err(|_| Error::Io("control loop stopped".into()))?
    }
}

impl LiveCluster {
    pub fn spawn(mut lc: LocalCluster, mut fleet: Fleet, cfg: LiveConfig) -> Self {
        let (tx, rx) = mpsc::channel::<Cmd>();
        let view = Arc::new(Mutex::new(LiveView { status: Some(lc.driver.status()), events: Vec::new() }));
        let stop = Arc::new(AtomicBool::new(false));
        let (v, stp) = (view.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            let wall0 = Instant::now();
            let sim0 = lc.driver.status().at;
            let clock = |w: Instant| sim0 + w.duration_since(wall0).as_secs_f64() * cfg.speed;
            let gpus = fleet.spec().gpus_per_node;
            let nics = fleet.spec().nics();
            let mut next_beat = sim0 + HEARTBEAT_INTERVAL;
            let mut pending: Option<Batch> = None;
            let mut repairs: Vec<(f64, usize)> = Vec::new();
            let mut seen_evicted = lc.driver.pool().evicted.len();
            while !stp.load(Ordering::Acquire) {
                match rx.recv_timeout(cfg.tick) {
                    Ok(Cmd::Evict { node, reason, reply }) => {
                        let r = lc.driver.manual_evict(node, &reason, clock(Instant::now()));
                        // Publish before replying so the caller's next read sees the new phase.
                        let events = lc.driver.drain_events();
                        let mut g = v.lock().unwrap();
                        g.status = Some(lc.driver.status());
                        g.events.extend(events);
                        drop(g);
                        let _ = reply.send(r);
                    }
                    Ok(Cmd::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                    Err(RecvTimeoutError::Timeout) => {}
                }
                let now = clock(Instant::now());
                while next_beat <= now {
                    let running = lc.driver.phase() == RecoveryPhase::Running;
                    let bps = if running { cfg.traffic_bps / nics as f64 } else { 0.0 };
                    lc.beat(next_beat, |_, _| Some(Telemetry { gpu_status: vec![], logs: vec![], rdma_bps: vec![bps; nics] }));
                    lc.tick(next_beat);
                    next_beat += HEARTBEAT_INTERVAL;
                }
                if pending.is_none() {
                    pending = lc.dispatch(&fleet, now);
                }
                if pending.as_ref().is_some_and(|b| b.at <= now) {
                    lc.deliver(pending.take().unwrap());
                    if pending.is_none() {
                        pending = lc.dispatch(&fleet, now);
                    }
                }
                let evicted = &lc.driver.pool().evicted;
                if let Some(after) = cfg.repair_after {
                    repairs.extend(evicted[seen_evicted..].iter().map(|&n| (now + after, n)));
                }
                seen_evicted = evicted.len();
                repairs.retain(|&(at, n)| {
                    if at > now {
                        return true;
                    }
                    fleet.repair(n);
                    lc.rejoin(n, gpus, now);
                    false
                });
                let events = lc.driver.drain_events();
                let mut g = v.lock().unwrap();
                g.status = Some(lc.driver.status());
                g.events.extend(events);
            }
        });
        LiveCluster { tx, view, stop, thread: Some(thread) }
    }

    pub fn handle(&self) -> LiveHandle {
        LiveHandle { tx: self.tx.clone() }
    }

    pub fn status(&self) -> DriverStatus {
        self.view.lock().unwrap().status.clone().expect("set at spawn")
    }

    pub fn shutdown(mut self) {
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        self.stop.store(true, Ordering::Release);
        let _ = self.tx.send(Cmd::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for LiveCluster {
    fn drop(&mut self) {
        self.stop_thread();
    }
}
