//! Single-leader SMR, normal case only: a fixed leader sequences every
//! command, followers acknowledge per slot, and the leader announces
//! commits. Non-leaders forward client requests. Leader failover is out
//! of scope; crash scenarios for this baseline crash followers only.

use std::collections::{BTreeMap, BTreeSet};

use crate::log::Log;
use crate::trace::TraceKind;
use crate::types::{ClientOp, Command, ReplicaId, ReqId, SlotIndex};

use super::{reqs_of, tag_of, BaseAction};

#[derive(Debug, Clone, PartialEq)]
pub enum PaxosMsg {
    /// Client ops relayed from a non-leader to the leader.
    Forward { ops: Vec<ClientOp> },
    /// Leader's per-slot proposal; carries its commit floor so followers
    /// can commit without waiting for a separate notice.
    Propose { slot: SlotIndex, cmd: Command, leader_commit: SlotIndex },
    /// Follower's per-slot acknowledgement, unicast to the leader.
    Ack { slot: SlotIndex },
    /// Commit announcement; carries the command to heal dropped proposals.
    Commit { slot: SlotIndex, cmd: Command },
}

type Actions = Vec<BaseAction<PaxosMsg>>;

#[derive(Debug)]
pub struct PaxosReplica {
    pub id: ReplicaId,
    n: usize,
    q: usize,
    pub leader: ReplicaId,
    log: Log,
    /// Leader only: per-slot acknowledgers including itself. Entries are
    /// pruned once every replica has acked, which also stops retransmits.
    acks: BTreeMap<SlotIndex, BTreeSet<ReplicaId>>,
    committed: BTreeSet<SlotIndex>,
    last_exec: SlotIndex,
    next_propose: SlotIndex,
    /// Leader only: request ids already sequenced (duplicate suppression).
    seen: BTreeSet<ReqId>,
    /// Requests this node received from its own clients and has not yet
    /// seen commit; non-leaders re-forward these on timer.
    own_pending: BTreeMap<ReqId, ClientOp>,
}

impl PaxosReplica {
    pub fn new(id: ReplicaId, n: usize, leader: ReplicaId) -> Self {
        assert!(n >= 3 && n % 2 == 1, "need an odd replica count of at least 3");
        PaxosReplica {
            id,
            n,
            q: n / 2 + 1,
            leader,
            log: Log::new(),
            acks: BTreeMap::new(),
            committed: BTreeSet::new(),
            last_exec: 0,
            next_propose: 1,
            seen: BTreeSet::new(),
            own_pending: BTreeMap::new(),
        }
    }

    pub fn is_leader(&self) -> bool {
        self.id == self.leader
    }

    pub fn last_exec(&self) -> SlotIndex {
        self.last_exec
    }

    pub fn log(&self) -> &Log {
        &self.log
    }

    pub fn on_client_request(&mut self, op: ClientOp) -> Actions {
        let mut out = Vec::new();
        self.own_pending.insert(op.req, op.clone());
        if self.is_leader() {
            self.sequence(vec![op], &mut out);
        } else {
            out.push(BaseAction::Unicast(self.leader, PaxosMsg::Forward { ops: vec![op] }));
        }
        out
    }

    pub fn on_message(&mut self, from: ReplicaId, msg: PaxosMsg) -> Actions {
        let mut out = Vec::new();
        match msg {
            PaxosMsg::Forward { ops } => {
                if self.is_leader() {
                    self.sequence(ops, &mut out);
                }
            }
            PaxosMsg::Propose { slot, cmd, leader_commit } => {
                if self.is_leader() {
                    return out;
                }
                self.accept(slot, cmd, &mut out);
                out.push(BaseAction::Unicast(self.leader, PaxosMsg::Ack { slot }));
                for s in 1..=leader_commit {
                    if self.log.is_filled(s) {
                        self.committed.insert(s);
                    }
                }
                self.advance_exec(&mut out);
            }
            PaxosMsg::Ack { slot } => {
                if !self.is_leader() {
                    return out;
                }
                let Some(set) = self.acks.get_mut(&slot) else { return out };
                set.insert(from);
                let count = set.len();
                if count >= self.q && self.committed.insert(slot) {
                    let cmd = self.log.get(slot).expect("acked slot is filled").clone();
                    out.push(BaseAction::Multicast(PaxosMsg::Commit { slot, cmd }));
                    self.advance_exec(&mut out);
                }
                if count == self.n {
                    self.acks.remove(&slot);
                }
            }
            PaxosMsg::Commit { slot, cmd } => {
                if self.is_leader() {
                    return out;
                }
                self.accept(slot, cmd, &mut out);
                self.committed.insert(slot);
                out.push(BaseAction::Unicast(self.leader, PaxosMsg::Ack { slot }));
                self.advance_exec(&mut out);
            }
        }
        out
    }

    /// Retransmit everything still in doubt: the leader re-sends slots not
    /// yet acked by everyone, non-leaders re-forward uncommitted requests.
    pub fn on_timer(&mut self) -> Actions {
        let mut out = Vec::new();
        if self.is_leader() {
            for (&slot, _) in &self.acks {
                let cmd = self.log.get(slot).expect("tracked slot is filled").clone();
                if self.committed.contains(&slot) {
                    out.push(BaseAction::Multicast(PaxosMsg::Commit { slot, cmd }));
                } else {
                    out.push(BaseAction::Multicast(PaxosMsg::Propose {
                        slot,
                        cmd,
                        leader_commit: self.last_exec,
                    }));
                }
            }
        } else if !self.own_pending.is_empty() {
            let ops: Vec<ClientOp> = self.own_pending.values().cloned().collect();
            out.push(BaseAction::Unicast(self.leader, PaxosMsg::Forward { ops }));
        }
        out
    }

    /// Leader: assign the next slot to each new request and propose it.
    fn sequence(&mut self, ops: Vec<ClientOp>, out: &mut Actions) {
        let fresh: Vec<ClientOp> = ops.into_iter().filter(|op| self.seen.insert(op.req)).collect();
        if fresh.is_empty() {
            return;
        }
        let slot = self.next_propose;
        self.next_propose += 1;
        let cmd = Command::client_ops(fresh, self.id, 0);
        self.accept(slot, cmd.clone(), out);
        self.acks.insert(slot, BTreeSet::from([self.id]));
        out.push(BaseAction::Multicast(PaxosMsg::Propose {
            slot,
            cmd,
            leader_commit: self.last_exec,
        }));
    }

    fn accept(&mut self, slot: SlotIndex, cmd: Command, out: &mut Actions) {
        // Single proposer per slot: a conflict here is a protocol bug.
        let fresh = self.log.append(slot, cmd.clone()).expect("conflicting paxos proposal");
        if fresh {
            out.push(BaseAction::Note(TraceKind::Append {
                slot,
                cmd: cmd.digest(),
                view: 0,
                tag: tag_of(&cmd),
                ops: cmd.op_count() as u32,
            }));
        }
    }

    /// Execute the gap-free committed prefix, replying to own clients.
    fn advance_exec(&mut self, out: &mut Actions) {
        while self.committed.contains(&(self.last_exec + 1)) {
            let slot = self.last_exec + 1;
            let Some(cmd) = self.log.get(slot) else { break };
            let cmd = cmd.clone();
            self.last_exec = slot;
            let digest = cmd.digest();
            let reqs = reqs_of(&cmd);
            out.push(BaseAction::Note(TraceKind::Commit {
                slot,
                cmd: digest,
                cmd_view: 0,
                node_view: 0,
                tag: tag_of(&cmd),
                ops: cmd.op_count() as u32,
                reqs: reqs.clone(),
            }));
            out.push(BaseAction::Note(TraceKind::Execute { slot, cmd: digest }));
            for req in reqs {
                if self.own_pending.remove(&req).is_some() {
                    out.push(BaseAction::Reply { req });
                }
            }
        }
    }
}
