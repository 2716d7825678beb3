//! Partitioned multi-leader SMR: the slot space is statically round-robin
//! assigned, every replica sequences client requests into its own slots,
//! and peers acknowledge each slot independently. Idle owners fill the
//! slots they are holding up with no-op skips as soon as they observe a
//! higher foreign proposal, so execution (gap-free prefix) can proceed.

use std::collections::{BTreeMap, BTreeSet};

use crate::log::Log;
use crate::trace::TraceKind;
use crate::types::{AssignmentScheme, ClientOp, Command, ReplicaId, SlotIndex};

use super::{reqs_of, tag_of, BaseAction};

#[derive(Debug, Clone, PartialEq)]
pub enum MenciusMsg {
    /// Owner's proposal for one of its slots (no-op when skipping).
    Propose { slot: SlotIndex, cmd: Command },
    /// Per-slot acknowledgement, unicast back to the slot's owner.
    Ack { slot: SlotIndex },
    /// Owner's commit announcement; carries the command to heal drops.
    Commit { slot: SlotIndex, cmd: Command },
}

type Actions = Vec<BaseAction<MenciusMsg>>;

#[derive(Debug)]
pub struct MenciusReplica {
    pub id: ReplicaId,
    n: usize,
    q: usize,
    scheme: AssignmentScheme,
    log: Log,
    /// Own slots only: per-slot acknowledgers including self, pruned once
    /// everyone has acked (which also stops retransmission).
    acks: BTreeMap<SlotIndex, BTreeSet<ReplicaId>>,
    committed: BTreeSet<SlotIndex>,
    last_exec: SlotIndex,
    /// Lowest own slot not yet proposed; everything owned below it is used.
    next_propose: SlotIndex,
}

impl MenciusReplica {
    pub fn new(id: ReplicaId, n: usize) -> Self {
        assert!(n >= 3 && n % 2 == 1, "need an odd replica count of at least 3");
        let scheme = AssignmentScheme::new((0..n as u32).map(ReplicaId).collect(), 1)
            .expect("non-empty scheme");
        let next_propose = scheme.first_owned_at_or_after(id, 1).expect("member of scheme");
        MenciusReplica {
            id,
            n,
            q: n / 2 + 1,
            scheme,
            log: Log::new(),
            acks: BTreeMap::new(),
            committed: BTreeSet::new(),
            last_exec: 0,
            next_propose,
        }
    }

    pub fn last_exec(&self) -> SlotIndex {
        self.last_exec
    }

    pub fn log(&self) -> &Log {
        &self.log
    }

    pub fn on_client_request(&mut self, op: ClientOp) -> Actions {
        let mut out = Vec::new();
        let slot = self.next_propose;
        self.next_propose = self.scheme.next_owned_after(self.id, slot).expect("unbounded slots");
        let cmd = Command::client_ops(vec![op], self.id, 0);
        self.propose(slot, cmd, &mut out);
        out
    }

    pub fn on_message(&mut self, from: ReplicaId, msg: MenciusMsg) -> Actions {
        let mut out = Vec::new();
        match msg {
            MenciusMsg::Propose { slot, cmd } => {
                self.accept(slot, cmd, &mut out);
                out.push(BaseAction::Unicast(from, MenciusMsg::Ack { slot }));
                self.skip_below(slot, &mut out);
                self.advance_exec(&mut out);
            }
            MenciusMsg::Ack { slot } => {
                let Some(set) = self.acks.get_mut(&slot) else { return out };
                set.insert(from);
                let count = set.len();
                if count >= self.q && self.committed.insert(slot) {
                    let cmd = self.log.get(slot).expect("acked slot is filled").clone();
                    out.push(BaseAction::Multicast(MenciusMsg::Commit { slot, cmd }));
                    self.advance_exec(&mut out);
                }
                if count == self.n {
                    self.acks.remove(&slot);
                }
            }
            MenciusMsg::Commit { slot, cmd } => {
                self.accept(slot, cmd, &mut out);
                self.committed.insert(slot);
                out.push(BaseAction::Unicast(from, MenciusMsg::Ack { slot }));
                self.skip_below(slot, &mut out);
                self.advance_exec(&mut out);
            }
        }
        out
    }

    /// Retransmit own slots still in doubt.
    pub fn on_timer(&mut self) -> Actions {
        let mut out = Vec::new();
        for (&slot, _) in &self.acks {
            let cmd = self.log.get(slot).expect("tracked slot is filled").clone();
            if self.committed.contains(&slot) {
                out.push(BaseAction::Multicast(MenciusMsg::Commit { slot, cmd }));
            } else {
                out.push(BaseAction::Multicast(MenciusMsg::Propose { slot, cmd }));
            }
        }
        out
    }

    fn propose(&mut self, slot: SlotIndex, cmd: Command, out: &mut Actions) {
        self.accept(slot, cmd.clone(), out);
        self.acks.insert(slot, BTreeSet::from([self.id]));
        out.push(BaseAction::Multicast(MenciusMsg::Propose { slot, cmd }));
    }

    /// Eager skip: no-op every own unproposed slot below a foreign slot we
    /// just learned about, so our idle turns stop blocking execution.
    fn skip_below(&mut self, foreign: SlotIndex, out: &mut Actions) {
        while self.next_propose < foreign {
            let slot = self.next_propose;
            self.next_propose =
                self.scheme.next_owned_after(self.id, slot).expect("unbounded slots");
            let cmd = Command::noop(self.id, 0);
            self.propose(slot, cmd, out);
        }
    }

    fn accept(&mut self, slot: SlotIndex, cmd: Command, out: &mut Actions) {
        // Owners never reuse a slot, so a conflict here is a protocol bug.
        let fresh = self.log.append(slot, cmd.clone()).expect("conflicting mencius proposal");
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

    /// Execute the gap-free committed prefix, replying for own proposals.
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
            if cmd.proposer == self.id {
                for req in reqs {
                    out.push(BaseAction::Reply { req });
                }
            }
        }
    }
}
