//! Append-only run trace. Every observable of a simulation — sends,
//! deliveries, appends, commits, executions, view adoptions, round
//! boundaries — is recorded here; the checker and the metrics engine
//! consume traces, and the text form (`time_ns kind node k1=v1 ...`) is
//! what `check` and `report` read back from disk.

use std::fmt::Write as _;

use thiserror::Error;

use crate::types::{CommandId, ReqId};

/// Role a node adopts at a view transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdoptedRole {
    Candidate,
    Follower,
    Initiator,
}

impl AdoptedRole {
    fn as_str(&self) -> &'static str {
        match self {
            AdoptedRole::Candidate => "candidate",
            AdoptedRole::Follower => "follower",
            AdoptedRole::Initiator => "initiator",
        }
    }
}

/// Kind of command referenced by an append/commit event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmdTag {
    Op,
    NoOp,
    ViewInit,
}

impl CmdTag {
    fn as_str(&self) -> &'static str {
        match self {
            CmdTag::Op => "op",
            CmdTag::NoOp => "noop",
            CmdTag::ViewInit => "view-init",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceKind {
    /// Run header: enough configuration to recompute the CSV row.
    Meta {
        seed: u64,
        protocol: String,
        mode: String,
        replicas: u32,
        round_length_ns: u64,
        drop_rate: f64,
        duration_ns: u64,
        /// Perfect-synchrony reference figures (round length and committed
        /// ops per round), present when the run computed them; they let a
        /// saved trace reproduce the efficiency/effectiveness columns.
        ideal_round_ns: Option<f64>,
        ideal_ops_per_round: Option<f64>,
    },
    /// Client request arrival at its home replica.
    Request { req: ReqId },
    /// Message emission; one event per multicast (not per copy).
    Send { msg: u64, mcast: bool, to: Option<u32>, round: Option<u64> },
    /// One copy handed to the receiving node, with the sampled delays.
    Deliver { msg: u64, from: u32, prop_ns: u64, proc_ns: u64, round: Option<u64> },
    /// One copy lost to the drop rate or a partition.
    Drop { msg: u64, from: u32 },
    Append { slot: u64, cmd: CommandId, view: u64, tag: CmdTag, ops: u32 },
    /// Slots in `[from, to]` removed from the node's log.
    Truncate { from: u64, to: u64 },
    AckAdvance { slot: u64 },
    Commit {
        slot: u64,
        cmd: CommandId,
        cmd_view: u64,
        node_view: u64,
        tag: CmdTag,
        ops: u32,
        /// Request ids carried by the command (empty for fillers).
        reqs: Vec<ReqId>,
    },
    Execute { slot: u64, cmd: CommandId },
    Reply { req: ReqId },
    Crash,
    RecoverNode,
    ViewAdopt { view: u64, role: AdoptedRole },
    ModeSwitch { mode: String },
    RoundBegin { round: u64 },
    RoundEnd { round: u64, len_ns: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: u64,
    pub node: u32,
    pub kind: TraceKind,
}

impl TraceEvent {
    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            TraceKind::Meta { .. } => "meta",
            TraceKind::Request { .. } => "request",
            TraceKind::Send { .. } => "send",
            TraceKind::Deliver { .. } => "deliver",
            TraceKind::Drop { .. } => "drop",
            TraceKind::Append { .. } => "append",
            TraceKind::Truncate { .. } => "truncate",
            TraceKind::AckAdvance { .. } => "ack-advance",
            TraceKind::Commit { .. } => "commit",
            TraceKind::Execute { .. } => "execute",
            TraceKind::Reply { .. } => "reply",
            TraceKind::Crash => "crash",
            TraceKind::RecoverNode => "recover-node",
            TraceKind::ViewAdopt { .. } => "view-adopt",
            TraceKind::ModeSwitch { .. } => "mode-switch",
            TraceKind::RoundBegin { .. } => "round-begin",
            TraceKind::RoundEnd { .. } => "round-end",
        }
    }

    /// One line of the trace-log format.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {}", self.time, self.kind_name(), self.node);
        match &self.kind {
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
            } => {
                let _ = write!(
                    s,
                    " seed={seed} protocol={protocol} mode={mode} replicas={replicas} \
                     round_length_ns={round_length_ns} drop_rate={drop_rate} \
                     duration_ns={duration_ns}"
                );
                if let Some(v) = ideal_round_ns {
                    let _ = write!(s, " ideal_round_ns={v}");
                }
                if let Some(v) = ideal_ops_per_round {
                    let _ = write!(s, " ideal_ops_per_round={v}");
                }
            }
            TraceKind::Request { req } => {
                let _ = write!(s, " req={req}");
            }
            TraceKind::Send { msg, mcast, to, round } => {
                let _ = write!(s, " msg={msg} mcast={}", *mcast as u8);
                if let Some(to) = to {
                    let _ = write!(s, " to={to}");
                }
                if let Some(r) = round {
                    let _ = write!(s, " round={r}");
                }
            }
            TraceKind::Deliver { msg, from, prop_ns, proc_ns, round } => {
                let _ = write!(s, " msg={msg} from={from} prop={prop_ns} proc={proc_ns}");
                if let Some(r) = round {
                    let _ = write!(s, " round={r}");
                }
            }
            TraceKind::Drop { msg, from } => {
                let _ = write!(s, " msg={msg} from={from}");
            }
            TraceKind::Append { slot, cmd, view, tag, ops } => {
                let _ = write!(s, " slot={slot} cmd={cmd} view={view} tag={} ops={ops}", tag.as_str());
            }
            TraceKind::Truncate { from, to } => {
                let _ = write!(s, " from={from} to={to}");
            }
            TraceKind::AckAdvance { slot } => {
                let _ = write!(s, " slot={slot}");
            }
            TraceKind::Commit { slot, cmd, cmd_view, node_view, tag, ops, reqs } => {
                let _ = write!(
                    s,
                    " slot={slot} cmd={cmd} cmd_view={cmd_view} node_view={node_view} tag={} ops={ops}",
                    tag.as_str()
                );
                if !reqs.is_empty() {
                    let list: Vec<String> = reqs.iter().map(|r| r.to_string()).collect();
                    let _ = write!(s, " reqs={}", list.join(","));
                }
            }
            TraceKind::Execute { slot, cmd } => {
                let _ = write!(s, " slot={slot} cmd={cmd}");
            }
            TraceKind::Reply { req } => {
                let _ = write!(s, " req={req}");
            }
            TraceKind::Crash | TraceKind::RecoverNode => {}
            TraceKind::ViewAdopt { view, role } => {
                let _ = write!(s, " view={view} role={}", role.as_str());
            }
            TraceKind::ModeSwitch { mode } => {
                let _ = write!(s, " mode={mode}");
            }
            TraceKind::RoundBegin { round } => {
                let _ = write!(s, " round={round}");
            }
            TraceKind::RoundEnd { round, len_ns } => {
                let _ = write!(s, " round={round} len={len_ns}");
            }
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

fn kv<'a>(fields: &'a [(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn req_from(v: &str) -> Option<ReqId> {
    let (c, s) = v.split_once('.')?;
    Some(ReqId { client: c.parse().ok()?, seq: s.parse().ok()? })
}

fn cmd_from(v: &str) -> Option<CommandId> {
    u64::from_str_radix(v, 16).ok().map(CommandId)
}

fn tag_from(v: &str) -> Option<CmdTag> {
    match v {
        "op" => Some(CmdTag::Op),
        "noop" => Some(CmdTag::NoOp),
        "view-init" => Some(CmdTag::ViewInit),
        _ => None,
    }
}

/// Parse one trace line. Inverse of [`TraceEvent::to_line`].
pub fn parse_line(line: &str, lineno: usize) -> Result<TraceEvent, TraceParseError> {
    let bad = |msg: &str| TraceParseError::Malformed { line: lineno, msg: msg.to_string() };
    let mut parts = line.split_whitespace();
    let time: u64 = parts.next().ok_or_else(|| bad("missing time"))?.parse().map_err(|_| bad("bad time"))?;
    let kind_name = parts.next().ok_or_else(|| bad("missing kind"))?;
    let node: u32 = parts.next().ok_or_else(|| bad("missing node"))?.parse().map_err(|_| bad("bad node"))?;
    let fields: Vec<(&str, &str)> = parts
        .map(|p| p.split_once('=').ok_or_else(|| bad("field without '='")))
        .collect::<Result<_, _>>()?;
    let f = |k: &str| kv(&fields, k).ok_or_else(|| bad(&format!("missing field {k}")));
    let fu64 = |k: &str| -> Result<u64, TraceParseError> {
        f(k)?.parse().map_err(|_| bad(&format!("bad u64 field {k}")))
    };

    let kind = match kind_name {
        "meta" => TraceKind::Meta {
            seed: fu64("seed")?,
            protocol: f("protocol")?.to_string(),
            mode: f("mode")?.to_string(),
            replicas: fu64("replicas")? as u32,
            round_length_ns: fu64("round_length_ns")?,
            drop_rate: f("drop_rate")?.parse().map_err(|_| bad("bad drop_rate"))?,
            duration_ns: fu64("duration_ns")?,
            ideal_round_ns: kv(&fields, "ideal_round_ns").and_then(|v| v.parse().ok()),
            ideal_ops_per_round: kv(&fields, "ideal_ops_per_round").and_then(|v| v.parse().ok()),
        },
        "request" => TraceKind::Request { req: req_from(f("req")?).ok_or_else(|| bad("bad req"))? },
        "send" => TraceKind::Send {
            msg: fu64("msg")?,
            mcast: fu64("mcast")? != 0,
            to: kv(&fields, "to").map(|v| v.parse().unwrap_or(0)),
            round: kv(&fields, "round").and_then(|v| v.parse().ok()),
        },
        "deliver" => TraceKind::Deliver {
            msg: fu64("msg")?,
            from: fu64("from")? as u32,
            prop_ns: fu64("prop")?,
            proc_ns: fu64("proc")?,
            round: kv(&fields, "round").and_then(|v| v.parse().ok()),
        },
        "drop" => TraceKind::Drop { msg: fu64("msg")?, from: fu64("from")? as u32 },
        "append" => TraceKind::Append {
            slot: fu64("slot")?,
            cmd: cmd_from(f("cmd")?).ok_or_else(|| bad("bad cmd"))?,
            view: fu64("view")?,
            tag: tag_from(f("tag")?).ok_or_else(|| bad("bad tag"))?,
            ops: fu64("ops")? as u32,
        },
        "truncate" => TraceKind::Truncate { from: fu64("from")?, to: fu64("to")? },
        "ack-advance" => TraceKind::AckAdvance { slot: fu64("slot")? },
        "commit" => TraceKind::Commit {
            slot: fu64("slot")?,
            cmd: cmd_from(f("cmd")?).ok_or_else(|| bad("bad cmd"))?,
            cmd_view: fu64("cmd_view")?,
            node_view: fu64("node_view")?,
            tag: tag_from(f("tag")?).ok_or_else(|| bad("bad tag"))?,
            ops: fu64("ops")? as u32,
            reqs: match kv(&fields, "reqs") {
                Some(list) => list
                    .split(',')
                    .map(|v| req_from(v).ok_or_else(|| bad("bad reqs")))
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
            },
        },
        "execute" => TraceKind::Execute {
            slot: fu64("slot")?,
            cmd: cmd_from(f("cmd")?).ok_or_else(|| bad("bad cmd"))?,
        },
        "reply" => TraceKind::Reply { req: req_from(f("req")?).ok_or_else(|| bad("bad req"))? },
        "crash" => TraceKind::Crash,
        "recover-node" => TraceKind::RecoverNode,
        "view-adopt" => TraceKind::ViewAdopt {
            view: fu64("view")?,
            role: match f("role")? {
                "candidate" => AdoptedRole::Candidate,
                "follower" => AdoptedRole::Follower,
                "initiator" => AdoptedRole::Initiator,
                _ => return Err(bad("bad role")),
            },
        },
        "mode-switch" => TraceKind::ModeSwitch { mode: f("mode")?.to_string() },
        "round-begin" => TraceKind::RoundBegin { round: fu64("round")? },
        "round-end" => TraceKind::RoundEnd { round: fu64("round")?, len_ns: fu64("len")? },
        other => return Err(bad(&format!("unknown kind {other}"))),
    };
    Ok(TraceEvent { time, node, kind })
}

/// In-memory trace with a running content hash for determinism checks.
#[derive(Debug, Default, Clone)]
pub struct TraceLog {
    events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog::default()
    }

    pub fn push(&mut self, time: u64, node: u32, kind: TraceKind) {
        self.events.push(TraceEvent { time, node, kind });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TraceParseError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            events.push(parse_line(line, i + 1)?);
        }
        Ok(TraceLog { events })
    }

    /// FNV-1a over the text form; two traces are identical iff equal.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::types::Fnv1a::new();
        h.write_bytes(self.to_text().as_bytes());
        h.finish()
    }
}
