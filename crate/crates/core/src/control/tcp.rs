//! Socket transport: one driver thread owns the [`Driver`] and applies
//! every executor message and operator command in arrival order.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::driver::{ControlEvent, Driver, DriverStatus};
use super::executor::{Executor, Telemetry};
use super::recovery::RecoveryPhase;
use super::wire::{read_frame, write_frame, ExecState, Message};
use crate::diagnostics::{run_suite, DiagConfig, Probe};
use crate::error::{Error, Result};

enum Command {
    Connected(u64, TcpStream),
    Frame(u64, Message),
    Closed(u64),
    Evict { node: usize, reason: String, reply: Sender<Result<RecoveryPhase>> },
    Status(Sender<DriverStatus>),
    Shutdown,
}

/// Cloneable entry point for operator requests.
#[derive(Clone)]
pub struct DriverHandle {
    tx: Sender<Command>,
}

impl DriverHandle {
    pub fn evict(&self, node: usize, reason: &str) -> Result<RecoveryPhase> {
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(Command::Evict { node, reason: reason.to_string(), reply })
            .map_err(|_| Error::Io("driver stopped".into()))?;
        rx.recv().map_err(|_| Error::Io("driver stopped".into()))?
    }

    pub fn status(&self) -> Result<DriverStatus> {
        let (reply, rx) = mpsc::channel();
        self.tx.send(Command::Status(reply)).map_err(|_| Error::Io("driver stopped".into()))?;
        rx.recv().map_err(|_| Error::Io("driver stopped".into()))
    }
}

pub struct DriverServer {
    pub addr: SocketAddr,
    tx: Sender<Command>,
    stop: Arc<AtomicBool>,
    /// Control events in emission order.
    pub events: Arc<Mutex<Vec<ControlEvent>>>,
    threads: Vec<JoinHandle<()>>,
}

impl DriverServer {
    /// Serves `driver` on `listener`; the clock is seconds since spawn and
    /// silence is checked every `tick`.
    pub fn spawn(listener: TcpListener, mut driver: Driver, tick: Duration) -> Result<Self> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let (tx, rx) = mpsc::channel::<Command>();
        let stop = Arc::new(AtomicBool::new(false));
        let events = Arc::new(Mutex::new(Vec::new()));

        let (atx, astop) = (tx.clone(), stop.clone());
        let acceptor = std::thread::spawn(move || {
            let mut next_id = 0u64;
            while !astop.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let id = next_id;
                        next_id += 1;
                        let Ok(read_half) = stream.try_clone() else { continue };
                        if atx.send(Command::Connected(id, stream)).is_err() {
                            break;
                        }
                        let rtx = atx.clone();
                        std::thread::spawn(move || {
                            let mut r = BufReader::new(read_half);
                            while let Ok(Some(m)) = read_frame(&mut r) {
                                if rtx.send(Command::Frame(id, m)).is_err() {
                                    return;
                                }
                            }
                            let _ = rtx.send(Command::Closed(id));
                        });
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(5)),
                }
            }
        });

        let ev = events.clone();
        let main = std::thread::spawn(move || {
            let start = Instant::now();
            let mut conns: HashMap<u64, TcpStream> = HashMap::new();
            let mut node_conn: HashMap<usize, u64> = HashMap::new();
            let mut conn_node: HashMap<u64, usize> = HashMap::new();
            loop {
                let cmd = match rx.recv_timeout(tick) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                };
                let now = start.elapsed().as_secs_f64();
                match cmd {
                    Some(Command::Connected(id, s)) => {
                        conns.insert(id, s);
                    }
                    Some(Command::Frame(id, m)) => {
                        if let Message::Hello { node_id, .. } = &m {
                            node_conn.insert(*node_id, id);
                            conn_node.insert(id, *node_id);
                        }
                        if let Some(&n) = conn_node.get(&id) {
                            let _ = driver.handle(n, m, now);
                        }
                    }
                    Some(Command::Closed(id)) => {
                        conns.remove(&id);
                    }
                    Some(Command::Evict { node, reason, reply }) => {
                        let _ = reply.send(driver.manual_evict(node, &reason, now));
                    }
                    Some(Command::Status(reply)) => {
                        let _ = reply.send(driver.status());
                    }
                    Some(Command::Shutdown) => break,
                    None => {}
                }
                driver.tick(now);
                for (to, m) in driver.drain_outbox() {
                    if let Some(s) = node_conn.get(&to).and_then(|c| conns.get_mut(c)) {
                        let _ = write_frame(s, &m);
                    }
                }
                let new = driver.drain_events();
                if !new.is_empty() {
                    ev.lock().unwrap().extend(new);
                }
            }
        });
        Ok(DriverServer { addr, tx, stop, events, threads: vec![acceptor, main] })
    }

    pub fn handle(&self) -> DriverHandle {
        DriverHandle { tx: self.tx.clone() }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Release);
        let _ = self.tx.send(Command::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Executor process: connects, says hello, beats every `interval` and obeys
/// driver commands, running self-checks on its own node through `probe`.
pub struct ExecutorClient {
    stop: Arc<AtomicBool>,
    pub state: Arc<Mutex<ExecState>>,
    pub telemetry: Arc<Mutex<Telemetry>>,
    thread: Option<JoinHandle<()>>,
}

impl ExecutorClient {
    pub fn spawn<P: Probe + Send + 'static>(
        addr: SocketAddr,
        mut exec: Executor,
        probe: P,
        diag: DiagConfig,
        interval: Duration,
    ) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let mut writer = stream.try_clone()?;
        let stop = Arc::new(AtomicBool::new(false));
        let state = Arc::new(Mutex::new(exec.state));
        let telemetry = Arc::new(Mutex::new(Telemetry::default()));
        let (mtx, mrx): (Sender<Message>, Receiver<Message>) = mpsc::channel();
        std::thread::spawn(move || {
            let mut r = BufReader::new(stream);
            while let Ok(Some(m)) = read_frame(&mut r) {
                if mtx.send(m).is_err() {
                    return;
                }
            }
        });
        let (st, tel, stp) = (state.clone(), telemetry.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            let start = Instant::now();
            if write_frame(&mut writer, &exec.hello()).is_err() {
                return;
            }
            let mut next_beat = Instant::now();
            while !stp.load(Ordering::Acquire) {
                if Instant::now() >= next_beat {
                    let t = tel.lock().unwrap().clone();
                    let hb = exec.heartbeat(start.elapsed().as_secs_f64(), t);
                    if write_frame(&mut writer, &hb).is_err() {
                        return;
                    }
                    next_beat += interval;
                }
                let wait = next_beat.saturating_duration_since(Instant::now());
                match mrx.recv_timeout(wait) {
                    Ok(m) => {
                        let mut diagnose = |n: usize| {
                            let suite = run_suite(&probe, &[n], &diag);
                            suite.reports.into_iter().next().expect("one node requested")
                        };
                        for reply in exec.handle(&m, &mut diagnose) {
                            if write_frame(&mut writer, &reply).is_err() {
                                return;
                            }
                        }
                        *st.lock().unwrap() = exec.state;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            }
            let _ = writer.shutdown(std::net::Shutdown::Both);
        });
        Ok(ExecutorClient { stop, state, telemetry, thread: Some(thread) })
    }

    /// Stops beating and closes the connection, like a machine going down.
    pub fn kill(mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ExecutorClient {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
