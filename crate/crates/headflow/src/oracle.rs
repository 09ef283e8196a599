//! The "evaluate a masked forward" abstraction.
//!
//! Attribution and evaluation code never touches model internals; it sees an
//! [`Oracle`]: give it a [`MaskQuery`] (which heads are intact, which text
//! rows may see the image, which image columns are visible) and get back the
//! raw adjusted target logit. Three implementations:
//!
//! * [`InProcessOracle`] — runs the toy transformer directly, through the
//!   image-prefix cache (the image-side work is paid once per sequence, not
//!   once per mask).
//! * [`ExternalOracle`] — drives a subprocess over a newline-delimited JSON
//!   protocol, so any model in any language can stand in.
//! * [`CachedOracle`] — a bounded LRU in front of either; enabling it never
//!   changes a returned value.
//!
//! Determinism contract: identical queries yield bit-identical values;
//! batches equal sequential evaluation regardless of worker count.
//!
//! # Wire protocol (`headflow/1`)
//!
//! UTF-8 lines, `\n`-terminated, no BOM. The oracle speaks first:
//!
//! ```text
//! {"protocol":"headflow/1","n_heads":16,"n_text":8,"n_image":16}
//! ```
//!
//! Each request names a client-unique id and up to three masks as 0/1
//! strings; absent masks mean all-ones:
//!
//! ```text
//! {"id":7,"head_mask":"0110...","text_mask":"111...","image_mask":"0001..."}
//! ```
//!
//! Each response is `{"id":7,"logit":-3.25}` or `{"id":7,"error":"..."}`;
//! responses may arrive out of order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::intervention::{BaselineKV, BitMask, HeadMask, ImageMask, InterventionPlan, TextMask};
use crate::model::{adjusted_logit, ModelConfig, MultimodalSequence, PrefixCache, TextOnlyRunner, WeightSet};
use crate::{Error, Result};

pub const PROTOCOL_NAME: &str = "headflow/1";
/// Default LRU capacity; curve/sweep evaluation re-queries masks heavily.
pub const DEFAULT_CACHE_CAPACITY: usize = 1 << 20;
/// Default per-response wait for external oracles.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

// ---------------------------------------------------------------------------
// Queries and descriptors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleDims {
    pub n_heads: usize,
    pub n_text: usize,
    pub n_image: usize,
}

/// Dimensions plus the two normalization anchors: the raw logits with all
/// heads ablated (`raw_zero`) and all heads intact (`raw_one`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleDescriptor {
    pub dims: OracleDims,
    pub raw_zero: f64,
    pub raw_one: f64,
}

/// One point of π(x; u, v): head mask x, text mask u, image mask v.
/// Bit = 1 means intact/visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskQuery {
    pub heads: HeadMask,
    pub text: TextMask,
    pub image: ImageMask,
}

impl MaskQuery {
    pub fn all_ones(dims: &OracleDims) -> Self {
        MaskQuery {
            heads: HeadMask::ones(dims.n_heads),
            text: TextMask::ones(dims.n_text),
            image: ImageMask::ones(dims.n_image),
        }
    }

    /// Head mask as given; text and image fully visible.
    pub fn heads_only(dims: &OracleDims, heads: HeadMask) -> Self {
        MaskQuery {
            heads,
            text: TextMask::ones(dims.n_text),
            image: ImageMask::ones(dims.n_image),
        }
    }

    pub fn validate(&self, dims: &OracleDims) -> Result<()> {
        if self.heads.len() != dims.n_heads
            || self.text.len() != dims.n_text
            || self.image.len() != dims.n_image
        {
            return Err(Error::invalid(format!(
                "query dims ({}, {}, {}) do not match oracle dims ({}, {}, {})",
                self.heads.len(),
                self.text.len(),
                self.image.len(),
                dims.n_heads,
                dims.n_text,
                dims.n_image
            )));
        }
        Ok(())
    }

    /// Canonical cache/wire key.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}",
            self.heads.bits().to_bit_string(),
            self.text.bits().to_bit_string(),
            self.image.bits().to_bit_string()
        )
    }
}

/// Seeded random queries for round-trip verification: the first two are the
/// normalization anchors, the rest draw every bit uniformly.
pub fn random_queries(dims: &OracleDims, n: usize, seed: u64) -> Vec<MaskQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        out.push(MaskQuery::all_ones(dims));
    }
    if n > 1 {
        out.push(MaskQuery::heads_only(dims, HeadMask::zeros(dims.n_heads)));
    }
    while out.len() < n {
        let draw = |len: usize, rng: &mut ChaCha8Rng| {
            let mut m = BitMask::zeros(len);
            for i in 0..len {
                m.set(i, rng.gen_bool(0.5));
            }
            m
        };
        out.push(MaskQuery {
            heads: HeadMask(draw(dims.n_heads, &mut rng)),
            text: TextMask(draw(dims.n_text, &mut rng)),
            image: ImageMask(draw(dims.n_image, &mut rng)),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// The trait
// ---------------------------------------------------------------------------

pub trait Oracle: Send + Sync {
    fn dims(&self) -> OracleDims;

    /// Raw adjusted target logit under the query's masks. Deterministic:
    /// identical queries yield bit-identical values.
    fn evaluate(&self, query: &MaskQuery) -> Result<f64>;

    /// Order-preserving batch; result equals sequential evaluation. The
    /// first failing query aborts the batch with its index.
    fn evaluate_batch(&self, queries: &[MaskQuery]) -> Result<Vec<f64>> {
        queries
            .iter()
            .enumerate()
            .map(|(i, q)| self.evaluate(q).map_err(|e| Error::oracle(format!("query {i}: {e}"))))
            .collect()
    }

    /// Dims plus normalization anchors (two evaluations).
    fn describe(&self) -> Result<OracleDescriptor> {
        let dims = self.dims();
        let raw_one = self.evaluate(&MaskQuery::all_ones(&dims))?;
        let raw_zero =
            self.evaluate(&MaskQuery::heads_only(&dims, HeadMask::zeros(dims.n_heads)))?;
        Ok(OracleDescriptor { dims, raw_zero, raw_one })
    }
}

// ---------------------------------------------------------------------------
// In-process oracle
// ---------------------------------------------------------------------------

/// Evaluates masks against one (weights, sequence, baseline) triple through
/// the text-only fast path.
pub struct InProcessOracle {
    cfg: ModelConfig,
    weights: Arc<WeightSet>,
    seq: MultimodalSequence,
    baseline: Arc<BaselineKV>,
    runner: TextOnlyRunner,
    prefix: PrefixCache,
    workers: usize,
}

impl InProcessOracle {
    pub fn new(
        cfg: &ModelConfig,
        weights: Arc<WeightSet>,
        seq: MultimodalSequence,
        baseline: Arc<BaselineKV>,
    ) -> Result<Self> {
        seq.validate(cfg)?;
        baseline.validate(cfg)?;
        let runner = TextOnlyRunner::new(cfg, &weights)?;
        let prefix = runner.build_cache(&weights, &seq)?;
        Ok(InProcessOracle {
            cfg: *cfg,
            weights,
            seq,
            baseline,
            runner,
            prefix,
            workers: 1,
        })
    }

    /// Worker-thread count for batches; values ≤ 1 mean sequential. Results
    /// are identical either way.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn sequence(&self) -> &MultimodalSequence {
        &self.seq
    }

    fn eval_one(&self, query: &MaskQuery) -> Result<f64> {
        let dims = self.dims();
        query.validate(&dims)?;
        let plan = InterventionPlan {
            heads: query.heads.clone(),
            text: query.text.clone(),
            image: query.image.clone(),
            baseline: self.baseline.clone(),
        };
        let logits = self.runner.logits(&self.weights, &self.seq, &self.prefix, Some(&plan))?;
        adjusted_logit(&logits, self.seq.target_token)
    }
}

impl Oracle for InProcessOracle {
    fn dims(&self) -> OracleDims {
        OracleDims {
            n_heads: self.cfg.n_total_heads(),
            n_text: self.seq.n_text(),
            n_image: self.cfg.n_image,
        }
    }

    fn evaluate(&self, query: &MaskQuery) -> Result<f64> {
        self.eval_one(query)
    }

    fn evaluate_batch(&self, queries: &[MaskQuery]) -> Result<Vec<f64>> {
        if self.workers <= 1 || queries.len() < 2 * self.workers {
            return queries
                .iter()
                .enumerate()
                .map(|(i, q)| self.eval_one(q).map_err(|e| Error::oracle(format!("query {i}: {e}"))))
                .collect();
        }
        let chunk = queries.len().div_ceil(self.workers);
        let mut results: Vec<Result<Vec<f64>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .enumerate()
                .map(|(ci, qs)| {
                    scope.spawn(move || {
                        qs.iter()
                            .enumerate()
                            .map(|(i, q)| {
                                self.eval_one(q).map_err(|e| {
                                    Error::oracle(format!("query {}: {e}", ci * chunk + i))
                                })
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("oracle worker panicked"));
            }
        });
        let mut out = Vec::with_capacity(queries.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// LRU cache
// ---------------------------------------------------------------------------

const NIL: usize = usize::MAX;

struct LruSlot {
    key: String,
    val: f64,
    prev: usize,
    next: usize,
}

/// Exact LRU over (query key → value); intrusive doubly-linked list through
/// a slot arena, O(1) get/insert/evict.
struct Lru {
    cap: usize,
    map: HashMap<String, usize>,
    slots: Vec<LruSlot>,
    head: usize,
    tail: usize,
}

impl Lru {
    fn new(cap: usize) -> Self {
        Lru { cap, map: HashMap::new(), slots: Vec::new(), head: NIL, tail: NIL }
    }

    fn unlink(&mut self, i: usize) {
        let (p, n) = (self.slots[i].prev, self.slots[i].next);
        if p != NIL {
            self.slots[p].next = n;
        } else {
            self.head = n;
        }
        if n != NIL {
            self.slots[n].prev = p;
        } else {
            self.tail = p;
        }
    }

    fn push_front(&mut self, i: usize) {
        self.slots[i].prev = NIL;
        self.slots[i].next = self.head;
        if self.head != NIL {
            self.slots[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn get(&mut self, key: &str) -> Option<f64> {
        let &i = self.map.get(key)?;
        self.unlink(i);
        self.push_front(i);
        Some(self.slots[i].val)
    }

    fn insert(&mut self, key: String, val: f64) {
        if self.cap == 0 {
            return;
        }
        if let Some(&i) = self.map.get(&key) {
            self.slots[i].val = val;
            self.unlink(i);
            self.push_front(i);
            return;
        }
        if self.map.len() >= self.cap {
            let victim = self.tail;
            self.unlink(victim);
            let old_key = std::mem::take(&mut self.slots[victim].key);
            self.map.remove(&old_key);
            self.slots[victim].key = key.clone();
            self.slots[victim].val = val;
            self.map.insert(key, victim);
            self.push_front(victim);
        } else {
            let i = self.slots.len();
            self.slots.push(LruSlot { key: key.clone(), val, prev: NIL, next: NIL });
            self.map.insert(key, i);
            self.push_front(i);
        }
    }

    fn len(&self) -> usize {
        self.map.len()
    }
}

/// Memoizing wrapper. Transparency contract: every value returned comes from
/// the inner oracle's arithmetic; the cache can only skip re-evaluation,
/// never change a result.
pub struct CachedOracle<O> {
    inner: O,
    lru: Mutex<Lru>,
}

impl<O: Oracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self::with_capacity(inner, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(inner: O, capacity: usize) -> Self {
        CachedOracle { inner, lru: Mutex::new(Lru::new(capacity)) }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn cached_entries(&self) -> usize {
        self.lru.lock().unwrap().len()
    }
}

impl<O: Oracle> Oracle for CachedOracle<O> {
    fn dims(&self) -> OracleDims {
        self.inner.dims()
    }

    fn evaluate(&self, query: &MaskQuery) -> Result<f64> {
        let key = query.key();
        if let Some(v) = self.lru.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let v = self.inner.evaluate(query)?;
        self.lru.lock().unwrap().insert(key, v);
        Ok(v)
    }

    fn evaluate_batch(&self, queries: &[MaskQuery]) -> Result<Vec<f64>> {
        let keys: Vec<String> = queries.iter().map(|q| q.key()).collect();
        let mut out: Vec<Option<f64>> = vec![None; queries.len()];
        // Positions of cache misses, deduplicated by key (identical queries
        // in one batch are evaluated once — determinism makes this safe).
        let mut miss_order: Vec<usize> = Vec::new();
        let mut miss_by_key: HashMap<&str, Vec<usize>> = HashMap::new();
        {
            let mut lru = self.lru.lock().unwrap();
            for (i, key) in keys.iter().enumerate() {
                if let Some(v) = lru.get(key) {
                    out[i] = Some(v);
                } else {
                    let entry = miss_by_key.entry(key.as_str()).or_default();
                    if entry.is_empty() {
                        miss_order.push(i);
                    }
                    entry.push(i);
                }
            }
        }
        if !miss_order.is_empty() {
            let unique: Vec<MaskQuery> =
                miss_order.iter().map(|&i| queries[i].clone()).collect();
            let vals = self.inner.evaluate_batch(&unique)?;
            let mut lru = self.lru.lock().unwrap();
            for (&first, v) in miss_order.iter().zip(&vals) {
                for &i in &miss_by_key[keys[first].as_str()] {
                    out[i] = Some(*v);
                }
                lru.insert(keys[first].clone(), *v);
            }
        }
        Ok(out.into_iter().map(|v| v.unwrap()).collect())
    }
}

// ---------------------------------------------------------------------------
// NDJSON server
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Handshake<'a> {
    protocol: &'a str,
    n_heads: usize,
    n_text: usize,
    n_image: usize,
}

#[derive(Deserialize)]
struct RequestLine {
    id: u64,
    head_mask: Option<String>,
    text_mask: Option<String>,
    image_mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ResponseLine {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn parse_mask(field: Option<&str>, len: usize, what: &str) -> Result<BitMask> {
    match field {
        None => Ok(BitMask::ones(len)),
        Some(s) => {
            let m = BitMask::from_bit_string(s)?;
            if m.len() != len {
                return Err(Error::format(format!(
                    "{what} has {} bits, oracle expects {len}",
                    m.len()
                )));
            }
            Ok(m)
        }
    }
}

/// Serves `oracle` over the wire protocol until EOF on `input`. Writes the
/// handshake first; responds line-by-line, flushing after each response. A
/// malformed request line cannot name an id, so its error response carries
/// id 0 (valid client ids start at 1).
pub fn serve_ndjson<R: BufRead, W: Write>(oracle: &dyn Oracle, input: R, output: &mut W) -> Result<()> {
    let dims = oracle.dims();
    let hs = Handshake {
        protocol: PROTOCOL_NAME,
        n_heads: dims.n_heads,
        n_text: dims.n_text,
        n_image: dims.n_image,
    };
    writeln!(output, "{}", serde_json::to_string(&hs).map_err(|e| Error::format(e.to_string()))?)?;
    output.flush()?;

    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<RequestLine>(&line) {
            Err(e) => ResponseLine {
                id: 0,
                logit: None,
                error: Some(format!("malformed request: {e}")),
            },
            Ok(req) => {
                let answer = (|| -> Result<f64> {
                    let query = MaskQuery {
                        heads: HeadMask(parse_mask(req.head_mask.as_deref(), dims.n_heads, "head_mask")?),
                        text: TextMask(parse_mask(req.text_mask.as_deref(), dims.n_text, "text_mask")?),
                        image: ImageMask(parse_mask(req.image_mask.as_deref(), dims.n_image, "image_mask")?),
                    };
                    oracle.evaluate(&query)
                })();
                match answer {
                    Ok(v) => ResponseLine { id: req.id, logit: Some(v), error: None },
                    Err(e) => ResponseLine { id: req.id, logit: None, error: Some(e.to_string()) },
                }
            }
        };
        writeln!(
            output,
            "{}",
            serde_json::to_string(&resp).map_err(|e| Error::format(e.to_string()))?
        )?;
        output.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// External subprocess oracle
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RequestOut<'a> {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    head_mask: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_mask: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_mask: Option<&'a str>,
}

#[derive(Default)]
struct DemuxState {
    results: HashMap<u64, std::result::Result<f64, String>>,
    /// Set when the stream died; fails all pending and future waits.
    dead: Option<String>,
}

struct Demux {
    state: Mutex<DemuxState>,
    cond: Condvar,
}

/// Drives a subprocess speaking the wire protocol. Writes are serialized
/// under a lock; a background thread reads responses and demultiplexes them
/// by id, so any number of worker threads can have queries in flight.
pub struct ExternalOracle {
    dims: OracleDims,
    writer: Mutex<ChildStdin>,
    demux: Arc<Demux>,
    next_id: AtomicU64,
    timeout: Duration,
    retries: u32,
    child: Mutex<Child>,
}

impl ExternalOracle {
    /// Spawns `command` via `sh -c` and performs the handshake (waiting at
    /// most `timeout`).
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::transport(format!("failed to spawn oracle command: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let demux = Arc::new(Demux { state: Mutex::new(DemuxState::default()), cond: Condvar::new() });
        let (hs_tx, hs_rx) = std::sync::mpsc::channel::<std::result::Result<String, String>>();
        {
            let demux = demux.clone();
            std::thread::spawn(move || reader_loop(stdout, demux, hs_tx));
        }

        let hs_line = match hs_rx.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                let _ = child.kill();
                return Err(Error::transport(format!("handshake failed: {e}")));
            }
            Err(_) => {
                let _ = child.kill();
                return Err(Error::transport(format!(
                    "no handshake within {:.1}s",
                    timeout.as_secs_f64()
                )));
            }
        };
        #[derive(Deserialize)]
        struct Hs {
            protocol: String,
            n_heads: usize,
            n_text: usize,
            n_image: usize,
        }
        let hs: Hs = serde_json::from_str(&hs_line).map_err(|e| {
            let _ = child.kill();
            Error::transport(format!("malformed handshake line {hs_line:?}: {e}"))
        })?;
        if hs.protocol != PROTOCOL_NAME {
            let _ = child.kill();
            return Err(Error::transport(format!(
                "oracle speaks {:?}, expected {PROTOCOL_NAME:?}",
                hs.protocol
            )));
        }
        Ok(ExternalOracle {
            dims: OracleDims { n_heads: hs.n_heads, n_text: hs.n_text, n_image: hs.n_image },
            writer: Mutex::new(stdin),
            demux,
            next_id: AtomicU64::new(1),
            timeout,
            retries: 0,
            child: Mutex::new(child),
        })
    }

    /// Transport-level retries per query (protocol errors are never
    /// retried silently; default 0 — determinism over availability).
    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn send(&self, id: u64, query: &MaskQuery) -> Result<()> {
        // Omit all-ones masks: they are the protocol default.
        let hm = query.heads.bits().to_bit_string();
        let tm = query.text.bits().to_bit_string();
        let im = query.image.bits().to_bit_string();
        let req = RequestOut {
            id,
            head_mask: (!query.heads.bits().is_all_ones()).then_some(hm.as_str()),
            text_mask: (!query.text.bits().is_all_ones()).then_some(tm.as_str()),
            image_mask: (!query.image.bits().is_all_ones()).then_some(im.as_str()),
        };
        let line = serde_json::to_string(&req).map_err(|e| Error::format(e.to_string()))?;
        let mut w = self.writer.lock().unwrap();
        writeln!(w, "{line}").map_err(|e| Error::transport(format!("write to oracle failed: {e}")))?;
        w.flush().map_err(|e| Error::transport(format!("flush to oracle failed: {e}")))?;
        Ok(())
    }

    fn wait(&self, id: u64) -> Result<f64> {
        let deadline = Instant::now() + self.timeout;
        let mut state = self.demux.state.lock().unwrap();
        loop {
            if let Some(res) = state.results.remove(&id) {
                return res.map_err(Error::Oracle);
            }
            if let Some(dead) = &state.dead {
                return Err(Error::transport(dead.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::transport(format!(
                    "no response for id {id} within {:.1}s",
                    self.timeout.as_secs_f64()
                )));
            }
            let (s, _) = self.demux.cond.wait_timeout(state, deadline - now).unwrap();
            state = s;
        }
    }

    fn eval_once(&self, query: &MaskQuery) -> Result<f64> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.send(id, query)?;
        self.wait(id)
    }
}

fn reader_loop(
    stdout: std::process::ChildStdout,
    demux: Arc<Demux>,
    hs_tx: std::sync::mpsc::Sender<std::result::Result<String, String>>,
) {
    let mut reader = BufReader::new(stdout);
    let mut first = String::new();
    match reader.read_line(&mut first) {
        Ok(0) => {
            let _ = hs_tx.send(Err("oracle closed its stream before the handshake".to_string()));
            return;
        }
        Ok(_) => {
            let _ = hs_tx.send(Ok(first.trim_end().to_string()));
        }
        Err(e) => {
            let _ = hs_tx.send(Err(format!("reading handshake: {e}")));
            return;
        }
    }
    loop {
        let mut line = String::new();
        let died = match reader.read_line(&mut line) {
            Ok(0) => Some("oracle closed its stream".to_string()),
            Err(e) => Some(format!("reading from oracle: {e}")),
            Ok(_) => {
                let trimmed = line.trim_end();
                if trimmed.is_empty() {
                    None
                } else {
                    match serde_json::from_str::<ResponseLine>(trimmed) {
                        Ok(resp) => {
                            let entry = match (resp.logit, resp.error) {
                                (Some(v), None) if v.is_finite() => Ok(v),
                                (Some(v), None) => {
                                    Err(format!("non-finite logit {v} from oracle"))
                                }
                                (_, Some(e)) => Err(e),
                                (None, None) => {
                                    Err("response carries neither logit nor error".to_string())
                                }
                            };
                            let mut state = demux.state.lock().unwrap();
                            state.results.insert(resp.id, entry);
                            demux.cond.notify_all();
                            None
                        }
                        Err(e) => Some(format!("unparseable response line {trimmed:?}: {e}")),
                    }
                }
            }
        };
        if let Some(msg) = died {
            let mut state = demux.state.lock().unwrap();
            state.dead = Some(msg);
            demux.cond.notify_all();
            return;
        }
    }
}

impl Oracle for ExternalOracle {
    fn dims(&self) -> OracleDims {
        self.dims
    }

    fn evaluate(&self, query: &MaskQuery) -> Result<f64> {
        query.validate(&self.dims)?;
        let mut last = None;
        for _ in 0..=self.retries {
            match self.eval_once(query) {
                Ok(v) => return Ok(v),
                // Only transport failures are retried; an oracle-reported
                // error is an answer, not an outage.
                Err(e @ Error::Transport(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap())
    }

    fn evaluate_batch(&self, queries: &[MaskQuery]) -> Result<Vec<f64>> {
        for q in queries {
            q.validate(&self.dims)?;
        }
        // Pipeline: write everything, then collect by id.
        let ids: Vec<u64> = queries
            .iter()
            .map(|_| self.next_id.fetch_add(1, Ordering::Relaxed))
            .collect();
        for (id, q) in ids.iter().zip(queries) {
            self.send(*id, q)?;
        }
        let mut out = Vec::with_capacity(queries.len());
        for (i, id) in ids.iter().enumerate() {
            out.push(self.wait(*id).map_err(|e| match e {
                Error::Transport(m) => Error::transport(format!("query {i}: {m}")),
                Error::Oracle(m) => Error::oracle(format!("query {i}: {m}")),
                other => other,
            })?);
        }
        Ok(out)
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved oracle exit on EOF; kill covers
        // the rest. The detached reader thread ends when the pipe closes.
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

// ---------------------------------------------------------------------------
// Round-trip verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct VerifyMismatch {
    pub index: usize,
    pub reference: f64,
    pub candidate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub total: usize,
    pub matched: usize,
    pub mismatches: Vec<VerifyMismatch>,
}

impl VerifyOutcome {
    pub fn all_matched(&self) -> bool {
        self.matched == self.total
    }
}

/// Evaluates `n` seeded queries on both oracles and compares bit-for-bit.
pub fn verify_pair(
    reference: &dyn Oracle,
    candidate: &dyn Oracle,
    n: usize,
    seed: u64,
) -> Result<VerifyOutcome> {
    let dims = reference.dims();
    if candidate.dims() != dims {
        return Err(Error::invalid(format!(
            "oracle dims differ: reference {:?}, candidate {:?}",
            dims,
            candidate.dims()
        )));
    }
    let queries = random_queries(&dims, n, seed);
    let a = reference.evaluate_batch(&queries)?;
    let b = candidate.evaluate_batch(&queries)?;
    let mut mismatches = Vec::new();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if x.to_bits() != y.to_bits() {
            mismatches.push(VerifyMismatch { index: i, reference: *x, candidate: *y });
        }
    }
    Ok(VerifyOutcome { total: n, matched: n - mismatches.len(), mismatches })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
