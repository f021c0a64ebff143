use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::schedule::EventKind;
use crate::sim::{Span, SpanStatus};

/// Append-only record log shared by one producer and any number of
/// consumers, each tracking its own offset.
#[derive(Debug, Default)]
pub struct SpanQueue {
    records: Mutex<Vec<String>>,
    grew: Condvar,
}

impl SpanQueue {
    pub fn push(&self, lines: Vec<String>) {
        if lines.is_empty() {
            return;
        }
        self.records.lock().unwrap().extend(lines);
        self.grew.notify_all();
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_from(&self, offset: usize) -> Vec<String> {
        let r = self.records.lock().unwrap();
        r.get(offset..).map(<[String]>::to_vec).unwrap_or_default()
    }

    /// Blocks until the log holds more than `offset` records or `timeout`
    /// passes.
    pub fn wait_past(&self, offset: usize, timeout: Duration) {
        let r = self.records.lock().unwrap();
        let _ = self.grew.wait_timeout_while(r, timeout, |r| r.len() <= offset);
    }
}

/// Follows a growing JSONL file, forwarding complete lines.
#[derive(Debug)]
pub struct FileTailer {
    path: PathBuf,
    offset: u64,
    partial: String,
}

impl FileTailer {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileTailer { path: path.into(), offset: 0, partial: String::new() }
    }

    /// Reads whatever was appended since the last poll. Returns the number of
    /// lines forwarded.
    pub fn poll(&mut self, queue: &SpanQueue) -> Result<usize> {
        let mut f = File::open(&self.path)?;
        let len = f.metadata()?.len();
        if len < self.offset {
            // truncated or replaced
            self.offset = 0;
            self.partial.clear();
        }
        f.seek(SeekFrom::Start(self.offset))?;
        let mut buf = String::new();
        let n = f.read_to_string(&mut buf)?;
        self.offset += n as u64;
        self.partial.push_str(&buf);
        let mut lines: Vec<String> = Vec::new();
        while let Some(i) = self.partial.find('\n') {
            let line: String = self.partial.drain(..=i).collect();
            let line = line.trim();
            if !line.is_empty() {
                lines.push(line.to_string());
            }
        }
        let count = lines.len();
        queue.push(lines);
        Ok(count)
    }
}

/// Dedup key: the full record, so replays and reordering are harmless.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct SpanKey {
    step: usize,
    rank: usize,
    t_start: u64,
    t_end: u64,
    kind: EventKind,
    eid: Option<usize>,
    chunk: Option<u32>,
    mb: Option<u32>,
    piece: Option<u32>,
    status: SpanStatus,
}

impl SpanKey {
    fn of(s: &Span) -> Self {
        SpanKey {
            step: s.step,
            rank: s.rank,
            t_start: s.t_start.to_bits(),
            t_end: s.t_end.to_bits(),
            kind: s.kind,
            eid: s.eid,
            chunk: s.chunk,
            mb: s.mb,
            piece: s.piece,
            status: s.status,
        }
    }
}

/// Immutable view of the ingested spans, ordered by (step, rank, start).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpanTable {
    rows: Vec<Span>,
}

impl SpanTable {
    pub fn from_spans(spans: impl IntoIterator<Item = Span>) -> Self {
        let mut t = SpanTable::default();
        t.merge(spans.into_iter().collect());
        t
    }

    /// Adds spans, dropping exact duplicates. Returns how many were new.
    fn merge(&mut self, new: Vec<Span>) -> usize {
        let before = self.rows.len();
        let mut all: Vec<Option<Span>> = std::mem::take(&mut self.rows).into_iter().chain(new).map(Some).collect();
        // sort small keys rather than whole spans
        let mut keys: Vec<(SpanKey, usize)> =
            all.iter().enumerate().map(|(i, s)| (SpanKey::of(s.as_ref().unwrap()), i)).collect();
        keys.sort_unstable();
        keys.dedup_by(|a, b| a.0 == b.0);
        self.rows = keys.into_iter().map(|(_, i)| all[i].take().unwrap()).collect();
        self.rows.len() - before
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn spans(&self) -> impl Iterator<Item = &Span> {
        self.rows.iter()
    }

    /// Spans of one (step, rank, kind).
    pub fn select(&self, step: usize, rank: usize, kind: EventKind) -> impl Iterator<Item = &Span> {
        let from = self.rows.partition_point(|s| (s.step, s.rank) < (step, rank));
        self.rows[from..]
            .iter()
            .take_while(move |s| s.step == step && s.rank == rank)
            .filter(move |s| s.kind == kind)
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|s| s.step).collect();
        v.dedup();
        v
    }
}

/// Ingested span table with a watermark over the queue. One writer; readers
/// take cheap snapshots and never wait on ingestion work.
#[derive(Debug, Default)]
pub struct AnalyticalStore {
    current: RwLock<Arc<SpanTable>>,
    watermark: AtomicUsize,
    malformed: AtomicUsize,
    writer: Mutex<()>,
}

impl AnalyticalStore {
    pub fn snapshot(&self) -> Arc<SpanTable> {
        self.current.read().unwrap().clone()
    }

    pub fn watermark(&self) -> usize {
        self.watermark.load(Ordering::Acquire)
    }

    pub fn malformed(&self) -> usize {
        self.malformed.load(Ordering::Acquire)
    }

    /// Pulls every record past the watermark. Returns how many new spans
    /// were added.
    pub fn consume(&self, queue: &SpanQueue) -> usize {
        let _w = self.writer.lock().unwrap();
        let from = self.watermark();
        let lines = queue.read_from(from);
        if lines.is_empty() {
            return 0;
        }
        let mut next = (*self.snapshot()).clone();
        let mut fresh = Vec::with_capacity(lines.len());
        let mut bad = 0;
        for l in &lines {
            match serde_json::from_str::<Span>(l) {
                Ok(s) => fresh.push(s),
                Err(_) => bad += 1,
            }
        }
        let added = next.merge(fresh);
        *self.current.write().unwrap() = Arc::new(next);
        self.malformed.fetch_add(bad, Ordering::AcqRel);
        self.watermark.store(from + lines.len(), Ordering::Release);
        added
    }
}

/// Reads a whole span log through the tailer, queue and store.
pub fn ingest_file(path: &Path) -> Result<AnalyticalStore> {
    if !path.is_file() {
        return Err(Error::Io(format!("cannot read span log {}", path.display())));
    }
    let queue = SpanQueue::default();
    let store = AnalyticalStore::default();
    FileTailer::new(path).poll(&queue)?;
    store.consume(&queue);
    Ok(store)
}

/// Background streamer and consumer following a live span log.
pub struct LivePipeline {
    pub queue: Arc<SpanQueue>,
    pub store: Arc<AnalyticalStore>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl LivePipeline {
    pub fn spawn(path: impl Into<PathBuf>, poll: Duration) -> Self {
        let queue = Arc::new(SpanQueue::default());
        let store = Arc::new(AnalyticalStore::default());
        let stop = Arc::new(AtomicBool::new(false));
        let mut tailer = FileTailer::new(path);
        let (q, s1) = (queue.clone(), stop.clone());
        let streamer = std::thread::spawn(move || {
            while !s1.load(Ordering::Acquire) {
                // the file may not exist yet
                let _ = tailer.poll(&q);
                std::thread::sleep(poll);
            }
        });
        let (q, st, s2) = (queue.clone(), store.clone(), stop.clone());
        let consumer = std::thread::spawn(move || {
            while !s2.load(Ordering::Acquire) {
                q.wait_past(st.watermark(), poll);
                st.consume(&q);
            }
        });
        LivePipeline { queue, store, stop, threads: vec![streamer, consumer] }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for LivePipeline {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
