//! Deterministic discrete-event network. Simulated time is in ns. Every
//! event is ordered by (timestamp, insertion sequence), every random draw
//! comes from a stream keyed by (link, purpose), so a fixed (seed, config)
//! reproduces a bit-identical trace regardless of host or thread count.
//!
//! Messages pay a propagation delay on the wire plus a processing delay at
//! the receiver; processing is serialized per node (a busy receiver queues
//! work), which is what makes too-short rounds overflow.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use thiserror::Error;

use crate::trace::{TraceKind, TraceLog};
use crate::types::Fnv1a;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("node {0} is already registered")]
    DuplicateRegistration(u32),
    #[error("node {0} is not registered")]
    Unregistered(u32),
    #[error("determinism violation: event for t={event} scheduled at t={now}")]
    SchedulingIntoPast { now: u64, event: u64 },
}

/// A delay distribution over nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    Constant(u64),
    Uniform { lo: u64, hi: u64 },
    /// Lognormal in ns with an additive shift (floor).
    LogNormal { mu: f64, sigma: f64, shift: u64 },
    Empirical(Vec<u64>),
}

impl Dist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            Dist::Constant(c) => *c,
            Dist::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            Dist::LogNormal { mu, sigma, shift } => {
                let d = rand_distr::LogNormal::new(*mu, *sigma).expect("sigma >= 0");
                shift + d.sample(rng).round().max(0.0) as u64
            }
            Dist::Empirical(vals) => {
                assert!(!vals.is_empty(), "empirical distribution needs samples");
                vals[rng.random_range(0..vals.len())]
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Constant(c) => *c as f64,
            Dist::Uniform { lo, hi } => (*lo as f64 + *hi as f64) / 2.0,
            Dist::LogNormal { mu, sigma, shift } => {
                *shift as f64 + (mu + sigma * sigma / 2.0).exp()
            }
            Dist::Empirical(vals) => {
                vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64
            }
        }
    }
}

/// Network-wide delay and loss model. Per-link overrides take precedence
/// over the global distributions.
#[derive(Debug, Clone)]
pub struct DelayModel {
    pub prop: Dist,
    pub proc: Dist,
    pub drop_rate: f64,
    pub link_prop: BTreeMap<(u32, u32), Dist>,
    pub link_proc: BTreeMap<(u32, u32), Dist>,
}

impl DelayModel {
    pub fn new(prop: Dist, proc: Dist, drop_rate: f64) -> Self {
        assert!((0.0..=1.0).contains(&drop_rate), "drop rate outside [0,1]");
        DelayModel { prop, proc, drop_rate, link_prop: BTreeMap::new(), link_proc: BTreeMap::new() }
    }

    fn prop_for(&self, from: u32, to: u32) -> &Dist {
        self.link_prop.get(&(from, to)).unwrap_or(&self.prop)
    }

    fn proc_for(&self, from: u32, to: u32) -> &Dist {
        self.link_proc.get(&(from, to)).unwrap_or(&self.proc)
    }
}

/// Pulsing-round parameters.
#[derive(Debug, Clone, Copy)]
pub struct RoundConfig {
    pub length_ns: u64,
    pub early_exit: bool,
    /// Start offset of round 0 per node (default 0 everywhere).
    pub offset_ns: u64,
}

impl RoundConfig {
    pub fn new(length_ns: u64, early_exit: bool) -> Self {
        assert!(length_ns > 0, "round length must be positive");
        RoundConfig { length_ns, early_exit, offset_ns: 0 }
    }
}

/// A message handed to a node by `recv`, with its wire metadata.
#[derive(Debug, Clone)]
pub struct Delivered<M> {
    pub from: u32,
    pub msg: M,
    /// Sender's pulsing round at send time, if it was in one.
    pub send_round: Option<u64>,
    pub at: u64,
}

/// Simulation callbacks. The driver owns protocol state; the net owns time.
pub trait Driver<M> {
    /// A message finished processing at `node` and is available via `recv`.
    fn on_deliver(&mut self, net: &mut Net<M>, node: u32, now: u64);
    /// A timer set with `set_timer` fired.
    fn on_timer(&mut self, net: &mut Net<M>, node: u32, token: u64, now: u64);
    /// A pulsing round began at `node` (including round at `start_pulsing`).
    fn on_round_begin(&mut self, net: &mut Net<M>, node: u32, round: u64, now: u64);
}

/// Driver that ignores everything; for direct low-level tests.
pub struct NullDriver;

impl<M> Driver<M> for NullDriver {
    fn on_deliver(&mut self, _: &mut Net<M>, _: u32, _: u64) {}
    fn on_timer(&mut self, _: &mut Net<M>, _: u32, _: u64, _: u64) {}
    fn on_round_begin(&mut self, _: &mut Net<M>, _: u32, _: u64, _: u64) {}
}

enum Ev<M> {
    /// Copy arrived at the receiver's NIC; processing starts when the
    /// receiver is free.
    Arrival { to: u32, from: u32, msg_id: u64, round: Option<u64>, msg: M, prop: u64 },
    /// Processing finished; message becomes receivable.
    Ready { to: u32, from: u32, msg_id: u64, round: Option<u64>, msg: M, prop: u64, proc: u64 },
    Timer { node: u32, token: u64 },
    RoundStart { node: u32, round: u64 },
    RoundTimeout { node: u32, round: u64 },
}

struct QueueEntry<M> {
    time: u64,
    seq: u64,
    ev: Ev<M>,
}

impl<M> PartialEq for QueueEntry<M> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<M> Eq for QueueEntry<M> {}
impl<M> PartialOrd for QueueEntry<M> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for QueueEntry<M> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Debug)]
struct NodeState<M> {
    crashed: bool,
    busy_until: u64,
    busy_accum: u64,
    mailbox: Vec<Delivered<M>>,
    pulsing: bool,
    round: u64,
    round_start: u64,
    round_length: u64,
    sent_this_round: bool,
    peers_seen: BTreeSet<u32>,
}

impl<M> NodeState<M> {
    fn new() -> Self {
        NodeState {
            crashed: false,
            busy_until: 0,
            busy_accum: 0,
            mailbox: Vec::new(),
            pulsing: false,
            round: 0,
            round_start: 0,
            round_length: 0,
            sent_this_round: false,
            peers_seen: BTreeSet::new(),
        }
    }
}

const PURPOSE_PROP: u64 = 1;
const PURPOSE_PROC: u64 = 2;
const PURPOSE_DROP: u64 = 3;
/// Node-scoped streams (client arrivals, backoff jitter) start here.
pub const PURPOSE_NODE_BASE: u64 = 16;

pub struct Net<M> {
    seed: u64,
    now: u64,
    seq: u64,
    msg_seq: u64,
    queue: BinaryHeap<Reverse<QueueEntry<M>>>,
    nodes: BTreeMap<u32, NodeState<M>>,
    model: DelayModel,
    round_cfg: RoundConfig,
    /// Nodes inside the set cannot exchange messages with nodes outside it
    /// until the heal time (None = until cleared).
    partition: Option<(BTreeSet<u32>, Option<u64>)>,
    streams: BTreeMap<(u32, u32, u64), ChaCha8Rng>,
    pub trace: TraceLog,
    poisoned: Option<NetError>,
}

impl<M: Clone> Net<M> {
    pub fn new(seed: u64, model: DelayModel, round_cfg: RoundConfig) -> Self {
        Net {
            seed,
            now: 0,
            seq: 0,
            msg_seq: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            model,
            round_cfg,
            partition: None,
            streams: BTreeMap::new(),
            trace: TraceLog::new(),
            poisoned: None,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn register(&mut self, node: u32) -> Result<(), NetError> {
        if self.nodes.contains_key(&node) {
            return Err(NetError::DuplicateRegistration(node));
        }
        self.nodes.insert(node, NodeState::new());
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> Vec<u32> {
        self.nodes.keys().copied().collect()
    }

    pub fn is_crashed(&self, node: u32) -> bool {
        self.nodes.get(&node).map(|n| n.crashed).unwrap_or(true)
    }

    pub fn crash(&mut self, node: u32) {
        let now = self.now;
        if let Some(n) = self.nodes.get_mut(&node) {
            n.crashed = true;
            n.pulsing = false;
            n.mailbox.clear();
        } else {
            return;
        }
        self.trace.push(now, node, TraceKind::Crash);
    }

    /// Total receiver processing time charged to `node` so far.
    pub fn busy_time(&self, node: u32) -> u64 {
        self.nodes.get(&node).map(|n| n.busy_accum).unwrap_or(0)
    }

    pub fn set_drop_rate(&mut self, rate: f64) {
        assert!((0.0..=1.0).contains(&rate));
        self.model.drop_rate = rate;
    }

    pub fn set_delay_model(&mut self, model: DelayModel) {
        self.model = model;
    }

    pub fn delay_model(&self) -> &DelayModel {
        &self.model
    }

    /// Isolate `side` from the rest until `heal_at` (None = until cleared).
    pub fn set_partition(&mut self, side: BTreeSet<u32>, heal_at: Option<u64>) {
        self.partition = Some((side, heal_at));
    }

    pub fn clear_partition(&mut self) {
        self.partition = None;
    }

    fn blocked(&self, from: u32, to: u32) -> bool {
        match &self.partition {
            Some((side, heal)) => {
                let active = heal.map(|t| self.now < t).unwrap_or(true);
                active && (side.contains(&from) != side.contains(&to))
            }
            None => false,
        }
    }

    /// The (link, purpose) random stream; independent of all others.
    fn stream(&mut self, from: u32, to: u32, purpose: u64) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry((from, to, purpose)).or_insert_with(|| {
            let mut h = Fnv1a::new();
            h.write_u64(seed);
            h.write_u64(from as u64);
            h.write_u64(to as u64);
            h.write_u64(purpose);
            ChaCha8Rng::seed_from_u64(h.finish())
        })
    }

    /// Node-scoped stream for driver-side randomness (workloads, jitter).
    pub fn node_rng(&mut self, node: u32, purpose: u64) -> &mut ChaCha8Rng {
        self.stream(node, u32::MAX, PURPOSE_NODE_BASE + purpose)
    }

    fn push(&mut self, time: u64, ev: Ev<M>) {
        if time < self.now && self.poisoned.is_none() {
            self.poisoned = Some(NetError::SchedulingIntoPast { now: self.now, event: time });
            return;
        }
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(QueueEntry { time, seq, ev }));
    }

    pub fn set_timer(&mut self, node: u32, at: u64, token: u64) {
        self.push(at, Ev::Timer { node, token });
    }

    fn ship(&mut self, from: u32, to: u32, msg_id: u64, round: Option<u64>, msg: M) {
        if self.blocked(from, to) || self.is_crashed(to) {
            self.trace.push(self.now, to, TraceKind::Drop { msg: msg_id, from });
            return;
        }
        if self.model.drop_rate > 0.0 {
            let rate = self.model.drop_rate;
            let roll: f64 = self.stream(from, to, PURPOSE_DROP).random();
            if roll < rate {
                self.trace.push(self.now, to, TraceKind::Drop { msg: msg_id, from });
                return;
            }
        }
        let dist = self.model.prop_for(from, to).clone();
        let prop = dist.sample(self.stream(from, to, PURPOSE_PROP));
        self.push(self.now + prop, Ev::Arrival { to, from, msg_id, round, msg, prop });
    }

    /// One-per-round multicast. Returns false (and sends nothing) on a
    /// second attempt within the same pulsing round; outside pulsing there
    /// is no budget.
    pub fn multicast(&mut self, from: u32, msg: M) -> bool {
        let (round, budget_ok) = {
            let n = match self.nodes.get_mut(&from) {
                Some(n) if !n.crashed => n,
                _ => return false,
            };
            if n.pulsing {
                if n.sent_this_round {
                    (Some(n.round), false)
                } else {
                    n.sent_this_round = true;
                    (Some(n.round), true)
                }
            } else {
                (None, true)
            }
        };
        if !budget_ok {
            return false;
        }
        let msg_id = self.msg_seq;
        self.msg_seq += 1;
        self.trace.push(self.now, from, TraceKind::Send { msg: msg_id, mcast: true, to: None, round });
        let peers: Vec<u32> = self.nodes.keys().copied().filter(|&p| p != from).collect();
        for to in peers {
            self.ship(from, to, msg_id, round, msg.clone());
        }
        true
    }

    /// Point-to-point send; never budgeted.
    pub fn send(&mut self, from: u32, to: u32, msg: M) {
        if self.is_crashed(from) {
            return;
        }
        let round = self.nodes.get(&from).and_then(|n| n.pulsing.then_some(n.round));
        let msg_id = self.msg_seq;
        self.msg_seq += 1;
        self.trace.push(self.now, from, TraceKind::Send { msg: msg_id, mcast: false, to: Some(to), round });
        self.ship(from, to, msg_id, round, msg);
    }

    /// Drain all messages processed by `now`, in (ready-time, seq) order.
    pub fn recv(&mut self, node: u32, now: u64) -> Vec<Delivered<M>> {
        match self.nodes.get_mut(&node) {
            Some(n) => {
                let mut due = Vec::new();
                let mut rest = Vec::new();
                for d in n.mailbox.drain(..) {
                    if d.at <= now {
                        due.push(d);
                    } else {
                        rest.push(d);
                    }
                }
                n.mailbox = rest;
                due
            }
            None => Vec::new(),
        }
    }

    /// Enter pulsing at `start`: round `round` begins there, with the
    /// configured length (or the node's last override).
    pub fn start_pulsing(&mut self, node: u32, start: u64) {
        let round = {
            let n = self.nodes.get_mut(&node).expect("unregistered node");
            n.pulsing = true;
            if n.round_length == 0 {
                n.round_length = self.round_cfg.length_ns;
            }
            n.round
        };
        self.push(start.max(self.now), Ev::RoundStart { node, round });
    }

    pub fn stop_pulsing(&mut self, node: u32) {
        if let Some(n) = self.nodes.get_mut(&node) {
            n.pulsing = false;
        }
    }

    pub fn is_pulsing(&self, node: u32) -> bool {
        self.nodes.get(&node).map(|n| n.pulsing).unwrap_or(false)
    }

    pub fn current_round(&self, node: u32) -> u64 {
        self.nodes.get(&node).map(|n| n.round).unwrap_or(0)
    }

    pub fn round_length(&self, node: u32) -> u64 {
        self.nodes.get(&node).map(|n| n.round_length).unwrap_or(self.round_cfg.length_ns)
    }

    /// Override the pulsing round length for one node from the next round.
    pub fn set_round_length(&mut self, node: u32, length_ns: u64) {
        assert!(length_ns > 0);
        if let Some(n) = self.nodes.get_mut(&node) {
            n.round_length = length_ns;
        }
    }

    fn begin_round<D: Driver<M>>(&mut self, node: u32, round: u64, driver: &mut D) {
        let now = self.now;
        let timeout = {
            let n = self.nodes.get_mut(&node).expect("unregistered node");
            n.round = round;
            n.round_start = now;
            n.sent_this_round = false;
            n.peers_seen.clear();
            now + n.round_length
        };
        self.trace.push(now, node, TraceKind::RoundBegin { round });
        self.push(timeout, Ev::RoundTimeout { node, round });
        driver.on_round_begin(self, node, round, now);
    }

    fn end_round<D: Driver<M>>(&mut self, node: u32, driver: &mut D) {
        let now = self.now;
        let (round, start) = {
            let n = &self.nodes[&node];
            (n.round, n.round_start)
        };
        self.trace.push(now, node, TraceKind::RoundEnd { round, len_ns: now - start });
        self.begin_round(node, round + 1, driver);
    }

    fn all_peers_seen(&self, node: u32) -> bool {
        let n = &self.nodes[&node];
        self.nodes.keys().all(|&p| p == node || n.peers_seen.contains(&p))
    }

    /// Run the event loop until the horizon (inclusive) or queue drain.
    pub fn run<D: Driver<M>>(&mut self, until: u64, driver: &mut D) -> Result<(), NetError> {
        loop {
            if let Some(err) = self.poisoned.take() {
                return Err(err);
            }
            let next_time = match self.queue.peek() {
                Some(Reverse(e)) => e.time,
                None => break,
            };
            if next_time > until {
                break;
            }
            let Reverse(entry) = self.queue.pop().unwrap();
            self.now = entry.time;
            match entry.ev {
                Ev::Arrival { to, from, msg_id, round, msg, prop } => {
                    if self.is_crashed(to) {
                        continue;
                    }
                    let dist = self.model.proc_for(from, to).clone();
                    let proc = dist.sample(self.stream(from, to, PURPOSE_PROC));
                    let n = self.nodes.get_mut(&to).unwrap();
                    let start = self.now.max(n.busy_until);
                    let done = start + proc;
                    n.busy_until = done;
                    n.busy_accum += proc;
                    self.push(done, Ev::Ready { to, from, msg_id, round, msg, prop, proc });
                }
                Ev::Ready { to, from, msg_id, round, msg, prop, proc } => {
                    if self.is_crashed(to) {
                        continue;
                    }
                    self.trace.push(self.now, to, TraceKind::Deliver {
                        msg: msg_id,
                        from,
                        prop_ns: prop,
                        proc_ns: proc,
                        round,
                    });
                    let pulsing = {
                        let n = self.nodes.get_mut(&to).unwrap();
                        n.mailbox.push(Delivered { from, msg, send_round: round, at: self.now });
                        n.peers_seen.insert(from);
                        n.pulsing
                    };
                    let exit_early =
                        pulsing && self.round_cfg.early_exit && self.all_peers_seen(to);
                    driver.on_deliver(self, to, self.now);
                    if exit_early && self.is_pulsing(to) && !self.is_crashed(to) {
                        self.end_round(to, driver);
                    }
                }
                Ev::Timer { node, token } => {
                    if self.is_crashed(node) {
                        continue;
                    }
                    driver.on_timer(self, node, token, self.now);
                }
                Ev::RoundStart { node, round } => {
                    if self.is_crashed(node) || !self.is_pulsing(node) {
                        continue;
                    }
                    self.begin_round(node, round, driver);
                }
                Ev::RoundTimeout { node, round } => {
                    if self.is_crashed(node) || !self.is_pulsing(node) {
                        continue;
                    }
                    if self.nodes[&node].round != round {
                        continue;
                    }
                    self.end_round(node, driver);
                }
            }
        }
        if self.now < until {
            self.now = until;
        }
        Ok(())
    }
}
