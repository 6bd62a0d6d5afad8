//! Deterministic in-process network for running party programs.
//!
//! Each party is an `async` program. The scheduler polls them round-robin;
//! a party yields only when it waits for a message that has not arrived. All
//! traffic is logged to a [`Transcript`] together with simulated send and
//! arrival times computed from a [`LinkModel`]. Links only move clocks; they
//! never change what is delivered.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::future::Future;
use std::io::Write as _;
use std::path::Path;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bandwidth and latency of a point-to-point link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub name: String,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl LinkModel {
    pub fn new(name: impl Into<String>, bandwidth: f64, latency: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0 && latency.is_finite() && latency > 0.0) {
            return Err(Error::Parameter(format!(
                "link needs positive bandwidth and latency, got {bandwidth} B/s and {latency} s"
            )));
        }
        Ok(LinkModel {
            name: name.into(),
            bandwidth,
            latency,
        })
    }

    /// Modeling assumption: 1 GB/s, 0.1 ms.
    pub fn six_g() -> Self {
        LinkModel::new("6g", 1e9, 1e-4).unwrap()
    }

    /// Modeling assumption: 12.5 MB/s, 50 ms.
    pub fn four_g() -> Self {
        LinkModel::new("4g", 12.5e6, 5e-2).unwrap()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "6g" => Ok(Self::six_g()),
            "4g" => Ok(Self::four_g()),
            other => Err(Error::Parameter(format!("unknown link preset {other:?} (expected 6g or 4g)"))),
        }
    }

    /// `latency + bytes / bandwidth`, in seconds.
    pub fn cost(&self, bytes: usize) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }

    pub fn cost_ns(&self, bytes: usize) -> u64 {
        (self.cost(bytes) * 1e9).round() as u64
    }
}

/// Link table: one default model plus per-direction overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Links {
    pub default: LinkModel,
    pub overrides: BTreeMap<(usize, usize), LinkModel>,
}

impl Links {
    pub fn uniform(link: LinkModel) -> Self {
        Links {
            default: link,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, from: usize, to: usize, link: LinkModel) -> Self {
        self.overrides.insert((from, to), link);
        self
    }

    pub fn between(&self, from: usize, to: usize) -> &LinkModel {
        self.overrides.get(&(from, to)).unwrap_or(&self.default)
    }
}

impl Default for Links {
    fn default() -> Self {
        Links::uniform(LinkModel::six_g())
    }
}

/// What a message carries. Used for accounting and by the transcript audit;
/// it is simulation metadata and is not counted in the payload length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MessageKind {
    /// An input provider delivering one share of its private input.
    InputShare { owner: usize },
    /// Beaver opening of `x - a` and `y - b` for the named triple.
    BeaverOpen { triple: u64 },
    /// Opening of `y + mask` for the named comparison key.
    MaskedOpen { key: u64 },
    /// A value the protocol reveals by design (e.g. the predicted class).
    Reveal,
    /// Free-form traffic (tests and examples).
    Plain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub session: u64,
    pub round: u64,
    pub from: usize,
    pub to: usize,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub session: u64,
    pub round: u64,
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub kind: MessageKind,
    pub bytes: usize,
    pub sent_ns: u64,
    /// Arrival time at the receiver.
    pub sim_time_ns: u64,
    #[serde(skip)]
    pub digest: [u8; 32],
    #[serde(skip)]
    pub payload: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub prg: String,
    pub seed: u64,
    pub parties: usize,
}

/// Append-only message log with per-party byte counters and clocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub records: Vec<TranscriptRecord>,
    pub sent: Vec<u64>,
    pub received: Vec<u64>,
    pub clocks_ns: Vec<u64>,
}

impl Transcript {
    fn new(header: TranscriptHeader) -> Self {
        let n = header.parties;
        Transcript {
            header,
            records: Vec::new(),
            sent: vec![0; n],
            received: vec![0; n],
            clocks_ns: vec![0; n],
        }
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.iter().sum()
    }

    pub fn logged_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes as u64).sum()
    }

    /// Latest clock over all parties.
    pub fn makespan_ns(&self) -> u64 {
        self.clocks_ns.iter().copied().max().unwrap_or(0)
    }

    fn hasher_with_contents(&self) -> Sha256 {
        let mut h = Sha256::new();
        h.update(self.header.prg.as_bytes());
        h.update(self.header.seed.to_le_bytes());
        h.update((self.header.parties as u64).to_le_bytes());
        for r in &self.records {
            h.update(r.session.to_le_bytes());
            h.update(r.round.to_le_bytes());
            h.update((r.from as u64).to_le_bytes());
            h.update((r.to as u64).to_le_bytes());
            h.update(serde_json::to_vec(&r.kind).expect("kind serializes"));
            h.update((r.bytes as u64).to_le_bytes());
            h.update(r.digest);
        }
        h
    }

    /// Hash of message contents and order, ignoring simulated times.
    pub fn content_hash(&self) -> String {
        hex::encode(self.hasher_with_contents().finalize())
    }

    /// Hash of everything, including simulated times and counters.
    pub fn hash(&self) -> String {
        let mut h = self.hasher_with_contents();
        for r in &self.records {
            h.update(r.sent_ns.to_le_bytes());
            h.update(r.sim_time_ns.to_le_bytes());
        }
        for v in self.sent.iter().chain(&self.received).chain(&self.clocks_ns) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Appends another transcript (e.g. a later run on the same network).
    pub fn merge(&mut self, other: Transcript) {
        self.records.extend(other.records);
        for (a, b) in self.sent.iter_mut().zip(other.sent) {
            *a += b;
        }
        for (a, b) in self.received.iter_mut().zip(other.received) {
            *a += b;
        }
        for (a, b) in self.clocks_ns.iter_mut().zip(other.clocks_ns) {
            *a = (*a).max(b);
        }
    }

    /// One JSON object per line: session, round, from, to, kind, bytes,
    /// sent_ns, sim_time_ns.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        out
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct NetState {
    links: Links,
    compute_rate: f64,
    record_payloads: bool,
    queues: HashMap<(usize, usize, u64), VecDeque<(Message, u64)>>,
    finished: Vec<bool>,
    waiting: Vec<Option<(usize, u64)>>,
    events: u64,
    transcript: Transcript,
}

/// Handle a party program uses to talk to the network.
pub struct PartyCtx {
    id: usize,
    session: Cell<u64>,
    round: Cell<u64>,
    rng: RefCell<ChaCha20Rng>,
    state: Rc<RefCell<NetState>>,
}

impl PartyCtx {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn session(&self) -> u64 {
        self.session.get()
    }

    pub fn set_session(&self, session: u64) {
        self.session.set(session);
        self.round.set(0);
    }

    pub fn round(&self) -> u64 {
        self.round.get()
    }

    /// Starts a new protocol round and returns its index.
    pub fn next_round(&self) -> u64 {
        let r = self.round.get() + 1;
        self.round.set(r);
        r
    }

    /// Party-local randomness, derived from the simulation seed.
    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha20Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    pub fn clock_ns(&self) -> u64 {
        self.state.borrow().transcript.clocks_ns[self.id]
    }

    /// Advances this party's clock by `units / compute_rate` seconds.
    pub fn compute(&self, units: u64) {
        let mut st = self.state.borrow_mut();
        if st.compute_rate.is_finite() && st.compute_rate > 0.0 {
            let ns = (units as f64 * 1e9 / st.compute_rate).round() as u64;
            st.transcript.clocks_ns[self.id] += ns;
        }
    }

    pub fn send(&self, to: usize, kind: MessageKind, payload: Vec<u8>) -> Result<()> {
        let mut st = self.state.borrow_mut();
        let parties = st.finished.len();
        if to >= parties || to == self.id {
            return Err(Error::Protocol(format!("party {} cannot send to party {to}", self.id)));
        }
        let session = self.session.get();
        let round = self.round.get();
        let bytes = payload.len();
        let sent_ns = st.transcript.clocks_ns[self.id];
        let arrival = sent_ns + st.links.between(self.id, to).cost_ns(bytes);
        let digest: [u8; 32] = Sha256::digest(&payload).into();
        let record_payload = st.record_payloads.then(|| payload.clone());
        st.transcript.records.push(TranscriptRecord {
            session,
            round,
            from: self.id,
            to,
            kind,
            bytes,
            sent_ns,
            sim_time_ns: arrival,
            digest,
            payload: record_payload,
        });
        st.transcript.sent[self.id] += bytes as u64;
        st.events += 1;
        let msg = Message {
            session,
            round,
            from: self.id,
            to,
            kind,
            payload,
        };
        st.queues
            .entry((self.id, to, session))
            .or_default()
            .push_back((msg, arrival));
        Ok(())
    }

    /// Waits for the next message from `from` in the current session.
    pub fn recv(&self, from: usize) -> Recv<'_> {
        Recv { ctx: self, from }
    }
}

pub struct Recv<'a> {
    ctx: &'a PartyCtx,
    from: usize,
}

impl Future for Recv<'_> {
    type Output = Result<Message>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let me = self.ctx.id;
        let session = self.ctx.session.get();
        let mut st = self.ctx.state.borrow_mut();
        if self.from >= st.finished.len() {
            return Poll::Ready(Err(Error::Protocol(format!("no party {}", self.from))));
        }
        let popped = st
            .queues
            .get_mut(&(self.from, me, session))
            .and_then(|q| q.pop_front());
        match popped {
            Some((msg, arrival)) => {
                let clock = &mut st.transcript.clocks_ns[me];
                *clock = (*clock).max(arrival);
                st.transcript.received[me] += msg.len() as u64;
                st.waiting[me] = None;
                st.events += 1;
                Poll::Ready(Ok(msg))
            }
            None if st.finished[self.from] => Poll::Ready(Err(Error::Abort(format!(
                "party {me} waits on party {} in session {session}, which has finished",
                self.from
            )))),
            None => {
                st.waiting[me] = Some((self.from, session));
                Poll::Pending
            }
        }
    }
}

pub type PartyProgram<'a, T> = Pin<Box<dyn Future<Output = Result<T>> + 'a>>;

/// A set of parties sharing one simulated network. Several runs may be
/// executed back to back; clocks and the transcript carry over.
pub struct Simulation {
    seed: u64,
    parties: usize,
    state: Rc<RefCell<NetState>>,
}

impl Simulation {
    pub fn new(parties: usize, links: Links, seed: u64) -> Self {
        let header = TranscriptHeader {
            prg: crate::fss::PRG_NAME.to_string(),
            seed,
            parties,
        };
        Simulation {
            seed,
            parties,
            state: Rc::new(RefCell::new(NetState {
                links,
                compute_rate: f64::INFINITY,
                record_payloads: false,
                queues: HashMap::new(),
                finished: vec![false; parties],
                waiting: vec![None; parties],
                events: 0,
                transcript: Transcript::new(header),
            })),
        }
    }

    /// Abstract compute operations per second charged via [`PartyCtx::compute`].
    /// Infinite (the default) means local computation takes no simulated time.
    pub fn set_compute_rate(&self, ops_per_sec: f64) {
        self.state.borrow_mut().compute_rate = ops_per_sec;
    }

    /// Keep raw payloads in the transcript (needed by the audit).
    pub fn record_payloads(&self, on: bool) {
        self.state.borrow_mut().record_payloads = on;
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn context(&self, id: usize) -> PartyCtx {
        assert!(id < self.parties, "party {id} is not registered");
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(id as u64).to_le_bytes());
        PartyCtx {
            id,
            session: Cell::new(0),
            round: Cell::new(0),
            rng: RefCell::new(ChaCha20Rng::from_seed(seed)),
            state: Rc::clone(&self.state),
        }
    }

    /// Runs the programs to completion under the round-robin scheduler.
    /// Outputs are returned in program order. Any program error aborts the
    /// whole run.
    pub fn run<'a, T>(&self, programs: Vec<(usize, PartyProgram<'a, T>)>) -> Result<Vec<T>> {
        {
            let mut st = self.state.borrow_mut();
            st.finished.iter_mut().for_each(|f| *f = true);
            for (id, _) in &programs {
                if *id >= self.parties {
                    return Err(Error::Parameter(format!("party {id} is not registered")));
                }
                st.finished[*id] = false;
            }
            st.waiting.iter_mut().for_each(|w| *w = None);
        }
        let mut slots: Vec<(usize, Option<PartyProgram<'a, T>>)> =
            programs.into_iter().map(|(id, p)| (id, Some(p))).collect();
        let mut outputs: Vec<Option<T>> = (0..slots.len()).map(|_| None).collect();
        let mut cx = Context::from_waker(Waker::noop());
        let mut live = slots.len();

        while live > 0 {
            let before = self.state.borrow().events;
            let mut completed = false;
            for (i, (id, slot)) in slots.iter_mut().enumerate() {
                let Some(fut) = slot.as_mut() else { continue };
                match fut.as_mut().poll(&mut cx) {
                    Poll::Ready(Ok(v)) => {
                        outputs[i] = Some(v);
                        *slot = None;
                        live -= 1;
                        completed = true;
                        let mut st = self.state.borrow_mut();
                        st.finished[*id] = true;
                        st.waiting[*id] = None;
                    }
                    Poll::Ready(Err(e)) => {
                        self.state.borrow_mut().finished.iter_mut().for_each(|f| *f = true);
                        return Err(e);
                    }
                    Poll::Pending => {}
                }
            }
            if live > 0 && !completed && self.state.borrow().events == before {
                let st = self.state.borrow();
                let mut report = String::new();
                for (id, w) in st.waiting.iter().enumerate() {
                    if let Some((from, session)) = w {
                        let _ = write!(report, "party {id} waits on party {from} (session {session}); ");
                    }
                }
                return Err(Error::Deadlock(report.trim_end_matches("; ").to_string()));
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("every program completed")).collect())
    }

    /// Undelivered messages left in the queues.
    pub fn pending_messages(&self) -> usize {
        self.state.borrow().queues.values().map(|q| q.len()).sum()
    }

    pub fn transcript(&self) -> Transcript {
        self.state.borrow().transcript.clone()
    }

    /// Takes the transcript accumulated so far, leaving an empty one with
    /// the same clocks.
    pub fn take_transcript(&self) -> Transcript {
        let mut st = self.state.borrow_mut();
        let header = st.transcript.header.clone();
        let clocks = st.transcript.clocks_ns.clone();
        let mut fresh = Transcript::new(header);
        fresh.clocks_ns = clocks;
        std::mem::replace(&mut st.transcript, fresh)
    }
}

/// Builds a fresh simulation, lets `build` create one program per party from
/// the party contexts, and runs them.
pub fn run_parties<'a, T, F>(parties: usize, links: Links, seed: u64, build: F) -> Result<(Vec<T>, Transcript)>
where
    F: FnOnce(Vec<PartyCtx>) -> Vec<(usize, PartyProgram<'a, T>)>,
{
    let sim = Simulation::new(parties, links, seed);
    let ctxs = (0..parties).map(|i| sim.context(i)).collect();
    let programs = build(ctxs);
    let out = sim.run(programs)?;
    Ok((out, sim.transcript()))
}
