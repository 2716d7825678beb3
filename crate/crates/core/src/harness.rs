//! Scenario runner: wires replicas (or baseline protocols), closed-loop
//! clients, fault injection, and the network simulator into one
//! reproducible experiment, then distills the trace into run statistics
//! and checker verdicts. Seeds fan out across a thread pool; each run is
//! fully independent, so results are identical at any pool size.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{BaseAction, MenciusMsg, MenciusReplica, PaxosMsg, PaxosReplica};
use crate::checker::{check_all, CheckerReport, SyncWindow};
use crate::metrics::{
    mean, msgs_per_commit, percentile, s_chora, DelaySamples, SynchronyReport,
};
use crate::netsim::{DelayModel, Dist, Driver, Net, NetError, RoundConfig};
use crate::replica::{Action, Mode, Mutation, Replica, ReplicaConfig, RoundMessage};
use crate::trace::{TraceKind, TraceLog};
use crate::types::{ClientOp, ReplicaId, ReqId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    ChoraPulsing,
    ChoraResponsive,
    ChoraAuto,
    MultiPaxos,
    Mencius,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::ChoraPulsing => "chora-pulsing",
            Protocol::ChoraResponsive => "chora-responsive",
            Protocol::ChoraAuto => "chora-auto",
            Protocol::MultiPaxos => "multipaxos",
            Protocol::Mencius => "mencius",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "chora-pulsing" => Some(Protocol::ChoraPulsing),
            "chora-responsive" => Some(Protocol::ChoraResponsive),
            "chora-auto" => Some(Protocol::ChoraAuto),
            "multipaxos" => Some(Protocol::MultiPaxos),
            "mencius" => Some(Protocol::Mencius),
            _ => None,
        }
    }

    fn is_chora(&self) -> bool {
        matches!(self, Protocol::ChoraPulsing | Protocol::ChoraResponsive | Protocol::ChoraAuto)
    }

    /// Initial operating mode string recorded in the trace header.
    fn mode_name(&self) -> &'static str {
        match self {
            Protocol::ChoraPulsing => "pulsing",
            Protocol::ChoraResponsive => "responsive",
            Protocol::ChoraAuto => "auto",
            _ => "event",
        }
    }
}

#[derive(Debug, Clone)]
pub enum FaultAction {
    /// Silence a node permanently.
    Crash(u32),
    /// Cut `side` off from the rest until the heal time.
    Partition { side: BTreeSet<u32>, until: u64 },
    SetDropRate(f64),
    SetDelayModel(DelayModel),
}

#[derive(Debug, Clone)]
pub struct Fault {
    pub at: u64,
    pub action: FaultAction,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub protocol: Protocol,
    pub replicas: u32,
    /// Closed-loop clients, attached round-robin, one outstanding request
    /// each; together with `think_ns` this sets the offered load.
    pub clients: u32,
    pub think_ns: u64,
    pub delay: DelayModel,
    pub round_length_ns: u64,
    pub early_exit: bool,
    pub duration_ns: u64,
    pub faults: Vec<Fault>,
    pub batch_cap: usize,
    pub coord_interval_ns: u64,
    pub ack_delay_ns: u64,
    /// Rounds of silence before the failure detector suspects a peer.
    pub detector_rounds: u64,
    /// Restrict the view-0 proposer set to the first k replica ids.
    pub proposers: Option<u32>,
    pub mutation: Option<Mutation>,
    /// Run a perfect-synchrony reference to fill the efficiency columns.
    pub compute_ideal: bool,
    /// Declare a progress window when the run is fault- and loss-free.
    pub declare_windows: bool,
}

impl Scenario {
    pub fn new(protocol: Protocol, replicas: u32) -> Self {
        Scenario {
            protocol,
            replicas,
            clients: replicas * 4,
            think_ns: 1_000,
            delay: DelayModel::new(
                Dist::Uniform { lo: 2_000, hi: 4_000 },
                Dist::Constant(500),
                0.0,
            ),
            round_length_ns: 4_000,
            early_exit: false,
            duration_ns: 1_000_000,
            faults: Vec::new(),
            batch_cap: 64,
            coord_interval_ns: 32_000,
            ack_delay_ns: 2_000,
            detector_rounds: 10,
            proposers: None,
            mutation: None,
            compute_ideal: false,
            declare_windows: true,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.replicas < 3 || self.replicas % 2 == 0 {
            return bad(format!("replicas must be odd and >= 3, got {}", self.replicas));
        }
        if self.clients == 0 {
            return bad("need at least one client".into());
        }
        if self.duration_ns == 0 || self.round_length_ns == 0 {
            return bad("duration and round length must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delay.drop_rate) {
            return bad(format!("drop rate {} outside [0,1]", self.delay.drop_rate));
        }
        if let Some(k) = self.proposers {
            if k == 0 || k > self.replicas {
                return bad(format!("proposer count {} outside 1..={}", k, self.replicas));
            }
        }
        for f in &self.faults {
            if f.at > self.duration_ns {
                return bad(format!("fault at {} is past the duration", f.at));
            }
            match &f.action {
                FaultAction::Crash(n) if *n >= self.replicas => {
                    return bad(format!("crash target {} does not exist", n));
                }
                FaultAction::SetDropRate(p) if !(0.0..=1.0).contains(p) => {
                    return bad(format!("drop rate {} outside [0,1]", p));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn has_faults_or_loss(&self) -> bool {
        !self.faults.is_empty() || self.delay.drop_rate > 0.0 || self.mutation.is_some()
    }

    /// Synchronous windows for the progress check: one generous window
    /// covering the run's tail, only when nothing disturbs the run.
    pub fn progress_windows(&self) -> Vec<SyncWindow> {
        if !self.declare_windows || self.has_faults_or_loss() {
            return Vec::new();
        }
        let rtt = 2.0 * (self.delay.prop.mean() + self.delay.proc.mean());
        let queueing = self.clients as u64 * self.delay.proc.mean() as u64;
        let bound_ns = 8 * self.round_length_ns
            + 8 * rtt as u64
            + 4 * self.ack_delay_ns
            + queueing
            + self.think_ns;
        vec![SyncWindow { start: self.duration_ns / 5, end: self.duration_ns, bound_ns }]
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("protocol fault at node {node}: {err}")]
    Protocol { node: u32, err: String },
    #[error("malformed trace: {0}")]
    Trace(String),
}

/// Statistics distilled from one run's trace.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub protocol: String,
    pub mode: String,
    pub replicas: u32,
    pub round_length_ns: u64,
    pub drop_rate: f64,
    pub committed_ops: u64,
    pub total_rounds: u64,
    pub sim_time_ns: u64,
    pub throughput_ops_per_s: f64,
    pub mean_latency_ns: Option<f64>,
    pub p50_latency_ns: Option<u64>,
    pub p90_latency_ns: Option<u64>,
    pub p99_latency_ns: Option<u64>,
    pub broadcasts: u64,
    pub msgs_per_commit: Option<f64>,
    pub synchrony: Option<SynchronyReport>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub kappa: Option<f64>,
    pub checker: CheckerReport,
    /// All safety checks passed (progress excluded: it is window-gated).
    pub safety_pass: bool,
    pub time_to_recover_ns: Option<u64>,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub result: RunResult,
    pub trace: TraceLog,
    /// Per-node receiver processing time, for utilization studies.
    pub busy_ns: BTreeMap<u32, u64>,
}

// Timer token layout: low 4 bits select the kind, the rest carry an index.
const TOK_COORD: u64 = 1;
const TOK_ACK: u64 = 2;
const TOK_DETECT: u64 = 3;
const TOK_CLIENT: u64 = 5;
const TOK_FAULT: u64 = 6;
const TOK_RETRANS: u64 = 7;
const TOK_MODE: u64 = 8;

fn tok(kind: u64, index: usize) -> u64 {
    kind | ((index as u64) << 4)
}

// node_rng purposes
const RNG_CLIENT: u64 = 0;
const RNG_BACKOFF: u64 = 1;

#[derive(Debug)]
struct Client {
    home: u32,
    next_seq: u64,
    outstanding: Option<u64>,
}

/// Closed-loop client pool: each client keeps one request in flight and
/// thinks for a fixed time after its commit lands at its home replica.
struct ClientPool {
    clients: Vec<Client>,
    homes: Vec<u32>,
    think_ns: u64,
}

impl ClientPool {
    fn new(count: u32, homes: &[u32], think_ns: u64) -> Self {
        let clients = (0..count as usize)
            .map(|i| Client { home: homes[i % homes.len()], next_seq: 0, outstanding: None })
            .collect();
        ClientPool { clients, homes: homes.to_vec(), think_ns }
    }

    /// Schedule every client's first request with a think-time jitter so
    /// arrivals do not all land on the same instant.
    fn start<M: Clone>(&self, net: &mut Net<M>) {
        for (i, c) in self.clients.iter().enumerate() {
            let jitter = {
                let hi = self.think_ns.max(1);
                net.node_rng(c.home, RNG_CLIENT).random_range(0..=hi)
            };
            net.set_timer(c.home, jitter, tok(TOK_CLIENT, i));
        }
    }

    /// The request (new or retried) client `idx` should submit now.
    fn submission(&mut self, idx: usize) -> (ReqId, Vec<u8>, u32) {
        let c = &mut self.clients[idx];
        let seq = match c.outstanding {
            Some(seq) => seq,
            None => {
                let seq = c.next_seq;
                c.next_seq += 1;
                c.outstanding = Some(seq);
                seq
            }
        };
        let req = ReqId { client: idx as u64, seq };
        (req, vec![idx as u8, seq as u8], c.home)
    }

    fn finish<M: Clone>(&mut self, net: &mut Net<M>, req: ReqId, now: u64) {
        let Some(c) = self.clients.get_mut(req.client as usize) else { return };
        if c.outstanding != Some(req.seq) {
            return;
        }
        c.outstanding = None;
        net.trace.push(now, c.home, TraceKind::Reply { req });
        // jittered think time, or closed-loop clients phase-lock onto the
        // round grid and per-run timing artifacts dominate comparisons
        let think = {
            let t = self.think_ns.max(1);
            net.node_rng(c.home, RNG_CLIENT).random_range(t / 2..=t + t / 2)
        };
        net.set_timer(c.home, now + think, tok(TOK_CLIENT, req.client as usize));
    }

    /// A commit carrying `reqs` landed at `node`; complete any client homed
    /// there (or orphaned by a crash, which re-homes it here).
    fn observe_commit<M: Clone>(&mut self, net: &mut Net<M>, node: u32, reqs: &[ReqId], now: u64) {
        for &req in reqs {
            let Some(c) = self.clients.get_mut(req.client as usize) else { continue };
            if c.home != node {
                if net.is_crashed(c.home) {
                    c.home = node;
                } else {
                    continue;
                }
            }
            self.finish(net, req, now);
        }
    }

    /// Re-home the crashed node's clients and schedule their resubmission.
    fn on_crash<M: Clone>(&mut self, net: &mut Net<M>, node: u32, now: u64, resubmit_after: u64) {
        let Some(pos) = self.homes.iter().position(|&h| h == node) else { return };
        let k = self.homes.len();
        let next_live = (1..k)
            .map(|d| self.homes[(pos + d) % k])
            .find(|&cand| !net.is_crashed(cand));
        let Some(new_home) = next_live else { return };
        for (i, c) in self.clients.iter_mut().enumerate() {
            if c.home == node {
                c.home = new_home;
                // abandon the in-flight request: retrying it under a fresh
                // id avoids racing a copy that survives the view change
                c.outstanding = None;
                net.set_timer(new_home, now + resubmit_after, tok(TOK_CLIENT, i));
            }
        }
    }
}

/// Scheduled faults; armed as timers on every node so a crashed node never
/// blocks injection, with a guard so each fires once.
struct FaultPlan {
    faults: Vec<Fault>,
    done: Vec<bool>,
}

impl FaultPlan {
    fn new(faults: Vec<Fault>) -> Self {
        let done = vec![false; faults.len()];
        FaultPlan { faults, done }
    }

    fn arm<M: Clone>(&self, net: &mut Net<M>) {
        for (i, f) in self.faults.iter().enumerate() {
            for node in net.node_ids() {
                net.set_timer(node, f.at, tok(TOK_FAULT, i));
            }
        }
    }

    /// Apply fault `idx` if it has not fired yet; returns the crashed node.
    fn fire<M: Clone>(&mut self, net: &mut Net<M>, idx: usize) -> Option<u32> {
        if idx >= self.faults.len() || self.done[idx] {
            return None;
        }
        self.done[idx] = true;
        match self.faults[idx].action.clone() {
            FaultAction::Crash(node) => {
                net.crash(node);
                Some(node)
            }
            FaultAction::Partition { side, until } => {
                net.set_partition(side, Some(until));
                None
            }
            FaultAction::SetDropRate(p) => {
                net.set_drop_rate(p);
                None
            }
            FaultAction::SetDelayModel(m) => {
                net.set_delay_model(m);
                None
            }
        }
    }
}

/// Per-replica driver bookkeeping for the main protocol.
struct ChoraNode {
    replica: Replica,
    last_heard: BTreeMap<u32, u64>,
    suspects: BTreeSet<ReplicaId>,
    retry_at: Option<u64>,
    armed_ack: Option<u64>,
    armed_coord: Option<u64>,
    /// Recent delay samples for the mode-switch policy.
    recent_prop: VecDeque<u64>,
    recent_proc: VecDeque<u64>,
}

struct ChoraDriver {
    nodes: BTreeMap<u32, ChoraNode>,
    pool: ClientPool,
    faults: FaultPlan,
    n: u32,
    base_round_ns: u64,
    detector_rounds: u64,
    auto_mode: bool,
    eval_ns: u64,
    mutated: bool,
    scan_idx: usize,
    fatal: Option<ScenarioError>,
}

/// Mode-policy thresholds: leave pulsing when the measured coefficient
/// drops below the lower bar, return above the upper one (hysteresis).
const MODE_S_DOWN: f64 = 0.2;
const MODE_S_UP: f64 = 0.5;
const MODE_EVAL_ROUNDS: u64 = 64;
const MODE_MIN_SAMPLES: usize = 64;
const MODE_WINDOW: usize = 512;

impl ChoraDriver {
    fn new(sc: &Scenario) -> Self {
        let ids: Vec<ReplicaId> = (0..sc.replicas).map(ReplicaId).collect();
        let initial_mode = match sc.protocol {
            Protocol::ChoraResponsive => Mode::Responsive,
            _ => Mode::Pulsing,
        };
        let proposer_ids: Vec<ReplicaId> = match sc.proposers {
            Some(k) => ids[..k as usize].to_vec(),
            None => ids.clone(),
        };
        let nodes = ids
            .iter()
            .map(|&id| {
                let mut cfg = ReplicaConfig::new(id, ids.clone());
                cfg.batch_cap = sc.batch_cap;
                cfg.coord_interval_ns = sc.coord_interval_ns;
                cfg.ack_delay_ns = sc.ack_delay_ns;
                cfg.mutation = sc.mutation;
                let mut replica = Replica::new(cfg, initial_mode);
                if sc.proposers.is_some() {
                    replica = replica.with_bootstrap_proposers(proposer_ids.clone());
                }
                (id.0, ChoraNode {
                    replica,
                    last_heard: BTreeMap::new(),
                    suspects: BTreeSet::new(),
                    retry_at: None,
                    armed_ack: None,
                    armed_coord: None,
                    recent_prop: VecDeque::new(),
                    recent_proc: VecDeque::new(),
                })
            })
            .collect();
        let homes: Vec<u32> = proposer_ids.iter().map(|r| r.0).collect();
        ChoraDriver {
            nodes,
            pool: ClientPool::new(sc.clients, &homes, sc.think_ns),
            faults: FaultPlan::new(sc.faults.clone()),
            n: sc.replicas,
            base_round_ns: sc.round_length_ns,
            detector_rounds: sc.detector_rounds,
            auto_mode: sc.protocol == Protocol::ChoraAuto,
            eval_ns: MODE_EVAL_ROUNDS * sc.round_length_ns,
            mutated: sc.mutation.is_some(),
            scan_idx: 0,
            fatal: None,
        }
    }

    fn setup(&mut self, net: &mut Net<RoundMessage>, pulsing: bool) {
        if pulsing {
            for id in net.node_ids() {
                net.start_pulsing(id, 0);
            }
        }
        self.pool.start(net);
        self.faults.arm(net);
        for id in net.node_ids() {
            // detector ticks staggered by id so candidates rarely collide
            net.set_timer(id, self.base_round_ns * (id as u64 + 1), tok(TOK_DETECT, 0));
            if self.auto_mode {
                net.set_timer(id, self.eval_ns, tok(TOK_MODE, 0));
            }
        }
    }

    fn fail(&mut self, node: u32, err: impl std::fmt::Display) {
        // mutated runs are expected to misbehave; the checker judges them
        if !self.mutated && self.fatal.is_none() {
            self.fatal = Some(ScenarioError::Protocol { node, err: err.to_string() });
        }
    }

    fn apply(&mut self, net: &mut Net<RoundMessage>, node: u32, actions: Vec<Action>, now: u64) {
        for a in actions {
            match a {
                Action::Send(msg) => {
                    net.multicast(node, msg);
                }
                Action::Reply { req, .. } => {
                    self.pool.finish(net, req, now);
                }
                Action::Note(kind) => {
                    if let TraceKind::Commit { reqs, .. } = &kind {
                        let reqs = reqs.clone();
                        net.trace.push(now, node, kind);
                        self.pool.observe_commit(net, node, &reqs, now);
                    } else {
                        net.trace.push(now, node, kind);
                    }
                }
            }
        }
        self.post(net, node, now);
    }

    /// Re-arm per-node timers and react to state changes after a handler.
    fn post(&mut self, net: &mut Net<RoundMessage>, node: u32, now: u64) {
        let Some(st) = self.nodes.get_mut(&node) else { return };
        if st.replica.mode() == Mode::Responsive {
            if let Some(due) = st.replica.arm_ack(now) {
                if due > now && st.armed_ack != Some(due) {
                    st.armed_ack = Some(due);
                    net.set_timer(node, due, tok(TOK_ACK, 0));
                }
            }
            if let Some(d) = st.replica.coord_deadline() {
                if st.armed_coord != Some(d) {
                    st.armed_coord = Some(d);
                    net.set_timer(node, d.max(now), tok(TOK_COORD, 0));
                }
            }
        }
    }

    fn detector(&mut self, net: &mut Net<RoundMessage>, node: u32, now: u64) {
        let threshold = (self.detector_rounds + node as u64) * self.base_round_ns;
        let actions = {
            let Some(st) = self.nodes.get_mut(&node) else { return };
            if st.replica.candidacy_unresolved() {
                // candidacy stalled: back off, then outbid with a fresh view
                match st.retry_at {
                    None => {
                        st.retry_at = Some(now + backoff(net, node, self.base_round_ns));
                        return;
                    }
                    Some(t) if t > now => return,
                    Some(_) => {
                        st.retry_at = Some(now + backoff(net, node, self.base_round_ns));
                        let suspects = st.suspects.clone();
                        st.replica.start_view_change(suspects, now)
                    }
                }
            } else {
                st.retry_at = None;
                if now < threshold || st.replica.in_view_change() {
                    return;
                }
                let heard = |p: u32| st.last_heard.get(&p).copied().unwrap_or(0);
                let someone_alive = (0..self.n)
                    .any(|p| p != node && now - heard(p) <= threshold / 2);
                let suspects: BTreeSet<ReplicaId> = st
                    .replica
                    .scheme()
                    .proposers
                    .iter()
                    .copied()
                    .filter(|r| r.0 != node && now - heard(r.0) > threshold)
                    .collect();
                if suspects.is_empty() || !someone_alive {
                    return;
                }
                st.suspects = suspects.clone();
                st.retry_at = Some(now + backoff(net, node, self.base_round_ns));
                st.replica.start_view_change(suspects, now)
            }
        };
        self.apply(net, node, actions, now);
    }

    /// Measure recent synchrony per node and switch modes with hysteresis.
    fn evaluate_mode(&mut self, net: &mut Net<RoundMessage>, node: u32, now: u64) {
        self.ingest_samples(net);
        let (decision, actions) = {
            let Some(st) = self.nodes.get_mut(&node) else { return };
            if st.recent_prop.len() < MODE_MIN_SAMPLES {
                (None, Vec::new())
            } else {
                let prop: Vec<u64> = st.recent_prop.iter().copied().collect();
                let proc: Vec<u64> = st.recent_proc.iter().copied().collect();
                match s_chora(&prop, &proc, 90.0) {
                    Ok(s) if st.replica.mode() == Mode::Pulsing && s < MODE_S_DOWN => {
                        (Some(Mode::Responsive), st.replica.switch_mode(Mode::Responsive, now))
                    }
                    Ok(s) if st.replica.mode() == Mode::Responsive && s > MODE_S_UP => {
                        (Some(Mode::Pulsing), st.replica.switch_mode(Mode::Pulsing, now))
                    }
                    _ => (None, Vec::new()),
                }
            }
        };
        match decision {
            Some(Mode::Responsive) => net.stop_pulsing(node),
            Some(Mode::Pulsing) => net.start_pulsing(node, now),
            None => {}
        }
        self.apply(net, node, actions, now);
    }

    /// Pull fresh delivery delay samples out of the trace (incrementally).
    fn ingest_samples(&mut self, net: &Net<RoundMessage>) {
        let events = net.trace.events();
        for e in &events[self.scan_idx..] {
            if let TraceKind::Deliver { prop_ns, proc_ns, .. } = e.kind {
                if let Some(st) = self.nodes.get_mut(&e.node) {
                    st.recent_prop.push_back(prop_ns);
                    st.recent_proc.push_back(proc_ns);
                    if st.recent_prop.len() > MODE_WINDOW {
                        st.recent_prop.pop_front();
                        st.recent_proc.pop_front();
                    }
                }
            }
        }
        self.scan_idx = events.len();
    }
}

/// Candidacy retry delay: 5 to 15 rounds of jitter.
fn backoff<M: Clone>(net: &mut Net<M>, node: u32, round_ns: u64) -> u64 {
    net.node_rng(node, RNG_BACKOFF).random_range(5..=15) * round_ns
}

impl Driver<RoundMessage> for ChoraDriver {
    fn on_deliver(&mut self, net: &mut Net<RoundMessage>, node: u32, now: u64) {
        for d in net.recv(node, now) {
            let res = {
                let Some(st) = self.nodes.get_mut(&node) else { return };
                st.last_heard.insert(d.from, now);
                st.replica.on_message(&d.msg, now)
            };
            match res {
                Ok(actions) => self.apply(net, node, actions, now),
                Err(e) => self.fail(node, e),
            }
        }
        self.post(net, node, now);
    }

    fn on_timer(&mut self, net: &mut Net<RoundMessage>, node: u32, token: u64, now: u64) {
        let idx = (token >> 4) as usize;
        match token & 0xF {
            TOK_CLIENT => {
                let (req, payload, home) = self.pool.submission(idx);
                net.trace.push(now, home, TraceKind::Request { req });
                let actions = match self.nodes.get_mut(&home) {
                    Some(st) => st.replica.on_client_request(req, payload, now),
                    None => return,
                };
                self.apply(net, home, actions, now);
            }
            TOK_COORD => {
                let actions = {
                    let Some(st) = self.nodes.get_mut(&node) else { return };
                    st.armed_coord = None;
                    st.replica.on_coordination_timeout(now)
                };
                self.apply(net, node, actions, now);
            }
            TOK_ACK => {
                let actions = {
                    let Some(st) = self.nodes.get_mut(&node) else { return };
                    st.armed_ack = None;
                    st.replica.flush_ack(now)
                };
                self.apply(net, node, actions, now);
            }
            TOK_DETECT => {
                self.detector(net, node, now);
                net.set_timer(node, now + self.base_round_ns, tok(TOK_DETECT, 0));
            }
            TOK_FAULT => {
                if let Some(crashed) = self.faults.fire(net, idx) {
                    let resubmit = 2 * self.detector_rounds * self.base_round_ns;
                    self.pool.on_crash(net, crashed, now, resubmit);
                }
            }
            TOK_MODE => {
                self.evaluate_mode(net, node, now);
                net.set_timer(node, now + self.eval_ns, tok(TOK_MODE, 0));
            }
            _ => {}
        }
    }

    fn on_round_begin(&mut self, net: &mut Net<RoundMessage>, node: u32, round: u64, now: u64) {
        let coord = {
            let Some(st) = self.nodes.get_mut(&node) else { return };
            st.replica.on_coordination_timeout(now)
        };
        self.apply(net, node, coord, now);
        let pulsed = {
            let Some(st) = self.nodes.get_mut(&node) else { return };
            st.replica.pulse(round, now)
        };
        match pulsed {
            Ok(actions) => self.apply(net, node, actions, now),
            Err(e) => self.fail(node, e),
        }
    }
}

/// Event-handler surface shared by the comparison protocols.
trait BaselineNode {
    type Msg: Clone;
    fn handle_request(&mut self, op: ClientOp) -> Vec<BaseAction<Self::Msg>>;
    fn handle_message(&mut self, from: ReplicaId, msg: Self::Msg) -> Vec<BaseAction<Self::Msg>>;
    fn handle_timer(&mut self) -> Vec<BaseAction<Self::Msg>>;
}

impl BaselineNode for PaxosReplica {
    type Msg = PaxosMsg;
    fn handle_request(&mut self, op: ClientOp) -> Vec<BaseAction<PaxosMsg>> {
        self.on_client_request(op)
    }
    fn handle_message(&mut self, from: ReplicaId, msg: PaxosMsg) -> Vec<BaseAction<PaxosMsg>> {
        self.on_message(from, msg)
    }
    fn handle_timer(&mut self) -> Vec<BaseAction<PaxosMsg>> {
        self.on_timer()
    }
}

impl BaselineNode for MenciusReplica {
    type Msg = MenciusMsg;
    fn handle_request(&mut self, op: ClientOp) -> Vec<BaseAction<MenciusMsg>> {
        self.on_client_request(op)
    }
    fn handle_message(&mut self, from: ReplicaId, msg: MenciusMsg) -> Vec<BaseAction<MenciusMsg>> {
        self.on_message(from, msg)
    }
    fn handle_timer(&mut self) -> Vec<BaseAction<MenciusMsg>> {
        self.on_timer()
    }
}

struct BaselineDriver<P: BaselineNode> {
    nodes: BTreeMap<u32, P>,
    pool: ClientPool,
    faults: FaultPlan,
    retrans_ns: u64,
    detector_rounds: u64,
    base_round_ns: u64,
}

impl<P: BaselineNode> BaselineDriver<P> {
    fn new(sc: &Scenario, nodes: BTreeMap<u32, P>) -> Self {
        let homes: Vec<u32> = (0..sc.replicas).collect();
        BaselineDriver {
            nodes,
            pool: ClientPool::new(sc.clients, &homes, sc.think_ns),
            faults: FaultPlan::new(sc.faults.clone()),
            retrans_ns: sc.coord_interval_ns,
            detector_rounds: sc.detector_rounds,
            base_round_ns: sc.round_length_ns,
        }
    }

    fn setup(&mut self, net: &mut Net<P::Msg>) {
        self.pool.start(net);
        self.faults.arm(net);
        for (i, id) in net.node_ids().into_iter().enumerate() {
            // stagger retransmit ticks so they never synchronize
            let first = self.retrans_ns + (i as u64 + 1) * 97;
            net.set_timer(id, first, tok(TOK_RETRANS, 0));
        }
    }

    fn apply(&mut self, net: &mut Net<P::Msg>, node: u32, actions: Vec<BaseAction<P::Msg>>, now: u64) {
        for a in actions {
            match a {
                BaseAction::Multicast(m) => {
                    net.multicast(node, m);
                }
                BaseAction::Unicast(to, m) => {
                    net.send(node, to.0, m);
                }
                BaseAction::Reply { req } => {
                    self.pool.finish(net, req, now);
                }
                BaseAction::Note(kind) => {
                    if let TraceKind::Commit { reqs, .. } = &kind {
                        let reqs = reqs.clone();
                        net.trace.push(now, node, kind);
                        self.pool.observe_commit(net, node, &reqs, now);
                    } else {
                        net.trace.push(now, node, kind);
                    }
                }
            }
        }
    }
}

impl<P: BaselineNode> Driver<P::Msg> for BaselineDriver<P> {
    fn on_deliver(&mut self, net: &mut Net<P::Msg>, node: u32, now: u64) {
        for d in net.recv(node, now) {
            let actions = match self.nodes.get_mut(&node) {
                Some(p) => p.handle_message(ReplicaId(d.from), d.msg),
                None => return,
            };
            self.apply(net, node, actions, now);
        }
    }

    fn on_timer(&mut self, net: &mut Net<P::Msg>, node: u32, token: u64, now: u64) {
        let idx = (token >> 4) as usize;
        match token & 0xF {
            TOK_CLIENT => {
                let (req, payload, home) = self.pool.submission(idx);
                net.trace.push(now, home, TraceKind::Request { req });
                let actions = match self.nodes.get_mut(&home) {
                    Some(p) => p.handle_request(ClientOp { req, op: payload }),
                    None => return,
                };
                self.apply(net, home, actions, now);
            }
            TOK_RETRANS => {
                let actions = match self.nodes.get_mut(&node) {
                    Some(p) => p.handle_timer(),
                    None => return,
                };
                self.apply(net, node, actions, now);
                net.set_timer(node, now + self.retrans_ns, tok(TOK_RETRANS, 0));
            }
            TOK_FAULT => {
                if let Some(crashed) = self.faults.fire(net, idx) {
                    let resubmit = 2 * self.detector_rounds * self.base_round_ns;
                    self.pool.on_crash(net, crashed, now, resubmit);
                }
            }
            _ => {}
        }
    }

    fn on_round_begin(&mut self, _: &mut Net<P::Msg>, _: u32, _: u64, _: u64) {}
}

fn push_meta<M: Clone>(net: &mut Net<M>, sc: &Scenario, seed: u64, ideal: Option<(f64, f64)>) {
    net.trace.push(0, 0, TraceKind::Meta {
        seed,
        protocol: sc.protocol.name().to_string(),
        mode: sc.protocol.mode_name().to_string(),
        replicas: sc.replicas,
        round_length_ns: sc.round_length_ns,
        drop_rate: sc.delay.drop_rate,
        duration_ns: sc.duration_ns,
        ideal_round_ns: ideal.map(|(t, _)| t),
        ideal_ops_per_round: ideal.map(|(_, w)| w),
    });
}

fn simulate_chora(
    sc: &Scenario,
    seed: u64,
    ideal: Option<(f64, f64)>,
) -> Result<(TraceLog, BTreeMap<u32, u64>), ScenarioError> {
    let round_cfg = RoundConfig {
        length_ns: sc.round_length_ns,
        early_exit: sc.early_exit,
        offset_ns: 0,
    };
    let mut net: Net<RoundMessage> = Net::new(seed, sc.delay.clone(), round_cfg);
    for id in 0..sc.replicas {
        net.register(id)?;
    }
    push_meta(&mut net, sc, seed, ideal);
    let mut driver = ChoraDriver::new(sc);
    driver.setup(&mut net, sc.protocol != Protocol::ChoraResponsive);
    net.run(sc.duration_ns, &mut driver)?;
    if let Some(err) = driver.fatal {
        return Err(err);
    }
    finish(net)
}

fn simulate_baseline<P: BaselineNode>(
    sc: &Scenario,
    seed: u64,
    nodes: BTreeMap<u32, P>,
) -> Result<(TraceLog, BTreeMap<u32, u64>), ScenarioError> {
    let round_cfg = RoundConfig::new(sc.round_length_ns, false);
    let mut net: Net<P::Msg> = Net::new(seed, sc.delay.clone(), round_cfg);
    for id in 0..sc.replicas {
        net.register(id)?;
    }
    push_meta(&mut net, sc, seed, None);
    let mut driver = BaselineDriver::new(sc, nodes);
    driver.setup(&mut net);
    net.run(sc.duration_ns, &mut driver)?;
    finish(net)
}

fn finish<M: Clone>(mut net: Net<M>) -> Result<(TraceLog, BTreeMap<u32, u64>), ScenarioError> {
    let busy = net.node_ids().into_iter().map(|id| (id, net.busy_time(id))).collect();
    Ok((std::mem::take(&mut net.trace), busy))
}

fn simulate(
    sc: &Scenario,
    seed: u64,
    ideal: Option<(f64, f64)>,
) -> Result<(TraceLog, BTreeMap<u32, u64>), ScenarioError> {
    match sc.protocol {
        Protocol::ChoraPulsing | Protocol::ChoraResponsive | Protocol::ChoraAuto => {
            simulate_chora(sc, seed, ideal)
        }
        Protocol::MultiPaxos => {
            let n = sc.replicas as usize;
            let nodes = (0..sc.replicas)
                .map(|id| (id, PaxosReplica::new(ReplicaId(id), n, ReplicaId(0))))
                .collect();
            simulate_baseline::<PaxosReplica>(sc, seed, nodes)
        }
        Protocol::Mencius => {
            let n = sc.replicas as usize;
            let nodes = (0..sc.replicas)
                .map(|id| (id, MenciusReplica::new(ReplicaId(id), n)))
                .collect();
            simulate_baseline::<MenciusReplica>(sc, seed, nodes)
        }
    }
}

/// Perfect-synchrony reference: same scenario with constant delays at the
/// configured means, no loss, no faults, early-exit rounds. Yields the
/// ideal round length and committed ops per round.
fn ideal_reference(sc: &Scenario, seed: u64) -> Result<Option<(f64, f64)>, ScenarioError> {
    let mut s = sc.clone();
    s.protocol = Protocol::ChoraPulsing;
    s.delay = DelayModel::new(
        Dist::Constant(sc.delay.prop.mean().round() as u64),
        Dist::Constant(sc.delay.proc.mean().round() as u64),
        0.0,
    );
    s.early_exit = true;
    s.faults.clear();
    s.mutation = None;
    s.compute_ideal = false;
    s.declare_windows = false;
    let (trace, _) = simulate(&s, seed, None)?;
    let mut lens = Vec::new();
    let mut rounds = 0u64;
    let mut slots: BTreeMap<u64, u32> = BTreeMap::new();
    for e in trace.events() {
        match &e.kind {
            TraceKind::RoundEnd { len_ns, .. } => lens.push(*len_ns),
            TraceKind::RoundBegin { round } => rounds = rounds.max(round + 1),
            TraceKind::Commit { slot, ops, .. } => {
                slots.entry(*slot).or_insert(*ops);
            }
            _ => {}
        }
    }
    if lens.is_empty() || rounds == 0 {
        return Ok(None);
    }
    let ops: u64 = slots.values().map(|&o| o as u64).sum();
    if ops == 0 {
        return Ok(None);
    }
    Ok(Some((mean(&lens).unwrap_or(0.0), ops as f64 / rounds as f64)))
}

/// Run one scenario to completion and analyze its trace.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<RunOutcome, ScenarioError> {
    sc.validate()?;
    let ideal = if sc.compute_ideal && sc.protocol.is_chora() {
        ideal_reference(sc, seed)?
    } else {
        None
    };
    let (trace, busy_ns) = simulate(sc, seed, ideal)?;
    let result = result_from_trace(&trace, &sc.progress_windows())?;
    Ok(RunOutcome { result, trace, busy_ns })
}

/// Fan seeds across the thread pool; results come back in seed order.
pub fn run_seeds(sc: &Scenario, seeds: &[u64]) -> Result<Vec<RunResult>, ScenarioError> {
    seeds
        .par_iter()
        .map(|&seed| run_scenario(sc, seed).map(|o| o.result))
        .collect()
}

#[derive(Debug, Clone)]
pub enum SweepAxis {
    RoundLength(Vec<u64>),
    /// Half-width of a uniform propagation delay around the base mean.
    DelaySpread(Vec<u64>),
    Replicas(Vec<u32>),
    ProposerCount(Vec<u32>),
    Clients(Vec<u32>),
}

impl SweepAxis {
    fn len(&self) -> usize {
        match self {
            SweepAxis::RoundLength(v) => v.len(),
            SweepAxis::DelaySpread(v) => v.len(),
            SweepAxis::Replicas(v) => v.len(),
            SweepAxis::ProposerCount(v) => v.len(),
            SweepAxis::Clients(v) => v.len(),
        }
    }

    fn apply(&self, idx: usize, base: &Scenario) -> Result<Scenario, ScenarioError> {
        let mut sc = base.clone();
        match self {
            SweepAxis::RoundLength(v) => sc.round_length_ns = v[idx],
            SweepAxis::DelaySpread(v) => {
                let m = base.delay.prop.mean();
                let w = v[idx] as f64;
                if w >= m {
                    return Err(ScenarioError::Invalid(format!(
                        "spread {} exceeds the mean propagation delay {}",
                        w, m
                    )));
                }
                sc.delay.prop = Dist::Uniform {
                    lo: (m - w).round() as u64,
                    hi: (m + w).round() as u64,
                };
            }
            SweepAxis::Replicas(v) => {
                let per = (base.clients / base.replicas).max(1);
                sc.replicas = v[idx];
                sc.clients = per * v[idx];
            }
            SweepAxis::ProposerCount(v) => sc.proposers = Some(v[idx]),
            SweepAxis::Clients(v) => sc.clients = v[idx],
        }
        Ok(sc)
    }
}

/// One run per (axis value, seed), rows ordered by value then seed.
pub fn sweep(
    base: &Scenario,
    axis: &SweepAxis,
    seeds: &[u64],
) -> Result<Vec<RunResult>, ScenarioError> {
    if axis.len() == 0 {
        return Err(ScenarioError::Invalid("sweep needs at least one value".into()));
    }
    let mut jobs = Vec::new();
    for i in 0..axis.len() {
        let sc = axis.apply(i, base)?;
        for &seed in seeds {
            jobs.push((sc.clone(), seed));
        }
    }
    jobs.par_iter()
        .map(|(sc, seed)| run_scenario(sc, *seed).map(|o| o.result))
        .collect()
}

/// Distill a trace into run statistics. Every column is derived from the
/// trace alone, so re-analysis of a saved trace reproduces the run's row.
pub fn result_from_trace(
    trace: &TraceLog,
    windows: &[SyncWindow],
) -> Result<RunResult, ScenarioError> {
    let meta = trace.events().iter().find_map(|e| match &e.kind {
        TraceKind::Meta {
            seed,
            protocol,
            mode,
            replicas,
            round_length_ns,
            drop_rate,
            duration_ns,
            ideal_round_ns,
            ideal_ops_per_round,
        } => Some((
            *seed,
            protocol.clone(),
            mode.clone(),
            *replicas,
            *round_length_ns,
            *drop_rate,
            *duration_ns,
            *ideal_round_ns,
            *ideal_ops_per_round,
        )),
        _ => None,
    });
    let Some((seed, protocol, mode, replicas, round_length_ns, drop_rate, duration_ns, i_t, i_w)) =
        meta
    else {
        return Err(ScenarioError::Trace("missing run header".into()));
    };

    // first commit per slot; first request per id; commit times per node
    let mut slot_ops: BTreeMap<u64, u32> = BTreeMap::new();
    let mut req_arrival: BTreeMap<ReqId, (u64, u32)> = BTreeMap::new();
    let mut latencies: Vec<u64> = Vec::new();
    let mut done: BTreeSet<ReqId> = BTreeSet::new();
    let mut total_rounds = 0u64;
    let mut broadcasts = 0u64;
    let mut round_lens: Vec<u64> = Vec::new();
    let mut delays = DelaySamples::default();
    let mut first_crash: Option<u64> = None;
    let mut recover_at: Option<u64> = None;
    for e in trace.events() {
        match &e.kind {
            TraceKind::Request { req } => {
                req_arrival.entry(*req).or_insert((e.time, e.node));
            }
            TraceKind::Commit { slot, ops, reqs, .. } => {
                slot_ops.entry(*slot).or_insert(*ops);
                for r in reqs {
                    if let Some(&(t0, home)) = req_arrival.get(r) {
                        if home == e.node && done.insert(*r) {
                            latencies.push(e.time.saturating_sub(t0));
                        }
                    }
                }
                if first_crash.is_some() && recover_at.is_none() && Some(e.time) > first_crash {
                    recover_at = Some(e.time);
                }
            }
            TraceKind::RoundBegin { round } => total_rounds = total_rounds.max(round + 1),
            TraceKind::RoundEnd { len_ns, .. } => round_lens.push(*len_ns),
            TraceKind::Send { mcast: true, .. } => broadcasts += 1,
            TraceKind::Deliver { prop_ns, proc_ns, .. } => {
                delays.prop.push(*prop_ns);
                delays.proc.push(*proc_ns);
            }
            TraceKind::Crash => {
                if first_crash.is_none() {
                    first_crash = Some(e.time);
                }
            }
            _ => {}
        }
    }
    let committed_ops: u64 = slot_ops.values().map(|&o| o as u64).sum();
    let throughput = committed_ops as f64 * 1e9 / duration_ns.max(1) as f64;
    let mpc = msgs_per_commit(trace, replicas, false).ok().map(|m| m.per_multicast);
    let w = if total_rounds > 0 { committed_ops as f64 / total_rounds as f64 } else { 1.0 };
    let synchrony = SynchronyReport::from_samples(&delays, 90.0, w.max(f64::MIN_POSITIVE)).ok();

    let (alpha, beta, kappa) = match (i_t, i_w) {
        (Some(t_hat), Some(w_hat)) if total_rounds > 0 && committed_ops > 0 => {
            let t = mean(&round_lens).unwrap_or(0.0);
            if t > 0.0 && w_hat > 0.0 {
                let a = t_hat / t;
                let r_hat = committed_ops as f64 / w_hat;
                let b = r_hat / total_rounds as f64;
                (Some(a), Some(b), Some(a * b))
            } else {
                (None, None, None)
            }
        }
        _ => (None, None, None),
    };

    let checker = check_all(trace, windows);
    let safety_pass = checker
        .verdicts
        .iter()
        .filter(|v| v.name != "progress")
        .all(|v| v.pass);
    let time_to_recover_ns = match (first_crash, recover_at) {
        (Some(c), Some(r)) => Some(r - c),
        _ => None,
    };

    Ok(RunResult {
        seed,
        protocol,
        mode,
        replicas,
        round_length_ns,
        drop_rate,
        committed_ops,
        total_rounds,
        sim_time_ns: duration_ns,
        throughput_ops_per_s: throughput,
        mean_latency_ns: mean(&latencies).ok(),
        p50_latency_ns: percentile(&latencies, 50.0).ok(),
        p90_latency_ns: percentile(&latencies, 90.0).ok(),
        p99_latency_ns: percentile(&latencies, 99.0).ok(),
        broadcasts,
        msgs_per_commit: mpc,
        synchrony,
        alpha,
        beta,
        kappa,
        checker,
        safety_pass,
        time_to_recover_ns,
    })
}
