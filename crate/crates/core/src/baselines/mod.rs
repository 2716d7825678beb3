//! Comparison protocols sharing the replica module's pure event-handler
//! contract: a single-leader Multi-Paxos normal case and a Mencius-style
//! partitioned multi-leader. Both run on the same simulator, emit the same
//! trace events, and face the same checker as the main protocol.

pub mod mencius;
pub mod multipaxos;

use crate::trace::{CmdTag, TraceKind};
use crate::types::{Command, CommandKind, ReplicaId, ReqId};

pub use mencius::{MenciusMsg, MenciusReplica};
pub use multipaxos::{PaxosMsg, PaxosReplica};

/// What a baseline handler asks the harness to do.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseAction<M> {
    Multicast(M),
    Unicast(ReplicaId, M),
    Reply { req: ReqId },
    Note(TraceKind),
}

pub(crate) fn tag_of(cmd: &Command) -> CmdTag {
    match &cmd.kind {
        CommandKind::ClientOps(_) => CmdTag::Op,
        CommandKind::NoOp => CmdTag::NoOp,
        CommandKind::ViewInit(_) => CmdTag::ViewInit,
    }
}

pub(crate) fn reqs_of(cmd: &Command) -> Vec<ReqId> {
    match &cmd.kind {
        CommandKind::ClientOps(ops) => ops.iter().map(|o| o.req).collect(),
        _ => Vec::new(),
    }
}
