//! Protocol-agnostic domain types shared by Chora and the baseline protocols:
//! commands, slot ownership, quorum commit arithmetic and log recency.

use std::fmt;

use thiserror::Error;

/// Identifier of a replica within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// View (configuration epoch) number. View 0 is the bootstrap view.
pub type ViewNumber = u64;

/// Logical log slot index. Slot 0 is the implicit null sentinel; real
/// commands live in slots >= 1.
pub type SlotIndex = u64;

/// Client request identifier giving at-most-once semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReqId {
    pub client: u64,
    pub seq: u64,
}

impl fmt::Display for ReqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.client, self.seq)
    }
}

/// A single buffered client operation. The payload is opaque to the
/// protocol; execution echoes it back as the result.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientOp {
    pub req: ReqId,
    pub op: Vec<u8>,
}

/// Payload of a command.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CommandKind {
    /// A batch of one or more client operations proposed together.
    ClientOps(Vec<ClientOp>),
    /// Filler for a slot the proposer has nothing to put in.
    NoOp,
    /// Installs a new proposer assignment; the listed replicas own the
    /// slots from the attached scheme base onward.
    ViewInit(AssignmentScheme),
}

/// One log entry: what was proposed, by whom, and in which view.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    pub kind: CommandKind,
    pub proposer: ReplicaId,
    pub view: ViewNumber,
}

impl Command {
    pub fn noop(proposer: ReplicaId, view: ViewNumber) -> Self {
        Command { kind: CommandKind::NoOp, proposer, view }
    }

    pub fn client_ops(ops: Vec<ClientOp>, proposer: ReplicaId, view: ViewNumber) -> Self {
        Command { kind: CommandKind::ClientOps(ops), proposer, view }
    }

    pub fn view_init(scheme: AssignmentScheme, proposer: ReplicaId, view: ViewNumber) -> Self {
        Command { kind: CommandKind::ViewInit(scheme), proposer, view }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self.kind, CommandKind::NoOp)
    }

    pub fn is_view_init(&self) -> bool {
        matches!(self.kind, CommandKind::ViewInit(_))
    }

    /// Number of client operations carried (0 for no-op / view-init).
    pub fn op_count(&self) -> usize {
        match &self.kind {
            CommandKind::ClientOps(ops) => ops.len(),
            _ => 0,
        }
    }

    /// Stable content digest used by the trace and the checker to compare
    /// commands across replicas without shipping payloads around.
    pub fn digest(&self) -> CommandId {
        let mut h = Fnv1a::new();
        h.write_u64(self.view);
        h.write_u64(self.proposer.0 as u64);
        match &self.kind {
            CommandKind::ClientOps(ops) => {
                h.write_u64(1);
                for op in ops {
                    h.write_u64(op.req.client);
                    h.write_u64(op.req.seq);
                    h.write_bytes(&op.op);
                }
            }
            CommandKind::NoOp => h.write_u64(2),
            CommandKind::ViewInit(scheme) => {
                h.write_u64(3);
                h.write_u64(scheme.base);
                for p in &scheme.proposers {
                    h.write_u64(p.0 as u64);
                }
            }
        }
        CommandId(h.finish())
    }
}

/// Content digest of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CommandId(pub u64);

impl fmt::Display for CommandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// 64-bit FNV-1a, enough for content digests inside one simulation.
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Round-robin slot ownership: `proposers` own slots `base, base+1, ...`
/// in rotation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AssignmentScheme {
    pub proposers: Vec<ReplicaId>,
    pub base: SlotIndex,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemeError {
    #[error("slot {slot} is below the scheme base {base}")]
    SlotOutOfRange { slot: SlotIndex, base: SlotIndex },
    #[error("assignment scheme must list at least one distinct proposer")]
    EmptyScheme,
}

impl AssignmentScheme {
    pub fn new(proposers: Vec<ReplicaId>, base: SlotIndex) -> Result<Self, SchemeError> {
        if proposers.is_empty() {
            return Err(SchemeError::EmptyScheme);
        }
        let mut seen = proposers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != proposers.len() {
            return Err(SchemeError::EmptyScheme);
        }
        Ok(AssignmentScheme { proposers, base })
    }

    /// Owner of `slot`: round-robin from `base`.
    pub fn slot_owner(&self, slot: SlotIndex) -> Result<ReplicaId, SchemeError> {
        if slot < self.base {
            return Err(SchemeError::SlotOutOfRange { slot, base: self.base });
        }
        let idx = ((slot - self.base) % self.proposers.len() as u64) as usize;
        Ok(self.proposers[idx])
    }

    pub fn owns(&self, replica: ReplicaId, slot: SlotIndex) -> bool {
        self.slot_owner(slot) == Ok(replica)
    }

    /// First slot >= `from` owned by `replica`, or None if the replica is
    /// not in the proposer set.
    pub fn first_owned_at_or_after(
        &self,
        replica: ReplicaId,
        from: SlotIndex,
    ) -> Option<SlotIndex> {
        let pos = self.proposers.iter().position(|&p| p == replica)? as u64;
        let n = self.proposers.len() as u64;
        let from = from.max(self.base);
        let off = (from - self.base) % n;
        let pos_rel = (pos + n - off) % n;
        Some(from + pos_rel)
    }

    /// Next owned slot strictly after `slot`.
    pub fn next_owned_after(&self, replica: ReplicaId, slot: SlotIndex) -> Option<SlotIndex> {
        self.first_owned_at_or_after(replica, slot.saturating_add(1))
    }

    /// Slots owned by `replica` in the inclusive range `[lo, hi]`.
    pub fn owned_in_range(&self, replica: ReplicaId, lo: SlotIndex, hi: SlotIndex) -> Vec<SlotIndex> {
        let mut out = Vec::new();
        let mut s = match self.first_owned_at_or_after(replica, lo) {
            Some(s) => s,
            None => return out,
        };
        while s <= hi {
            out.push(s);
            s += self.proposers.len() as u64;
        }
        out
    }
}

/// Per-replica last cumulative acknowledgement known locally.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AckVector {
    acked: std::collections::BTreeMap<ReplicaId, SlotIndex>,
}

impl AckVector {
    pub fn new(replicas: impl IntoIterator<Item = ReplicaId>) -> Self {
        AckVector { acked: replicas.into_iter().map(|r| (r, 0)).collect() }
    }

    pub fn get(&self, r: ReplicaId) -> SlotIndex {
        self.acked.get(&r).copied().unwrap_or(0)
    }

    pub fn set(&mut self, r: ReplicaId, slot: SlotIndex) {
        self.acked.insert(r, slot);
    }

    /// Monotone merge: only raises the stored index.
    pub fn raise(&mut self, r: ReplicaId, slot: SlotIndex) {
        let e = self.acked.entry(r).or_insert(0);
        if slot > *e {
            *e = slot;
        }
    }

    pub fn reset_all(&mut self) {
        for v in self.acked.values_mut() {
            *v = 0;
        }
    }

    pub fn len(&self) -> usize {
        self.acked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acked.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ReplicaId, SlotIndex)> + '_ {
        self.acked.iter().map(|(&r, &s)| (r, s))
    }

    /// Largest slot s such that at least `quorum` replicas have acked >= s:
    /// the q-th element (1-based) of the descending-sorted ack values.
    pub fn compute_commit(&self, quorum: usize) -> SlotIndex {
        assert!(quorum >= 1 && quorum <= self.acked.len(), "quorum out of range");
        let mut vals: Vec<SlotIndex> = self.acked.values().copied().collect();
        vals.sort_unstable_by(|a, b| b.cmp(a));
        vals[quorum - 1]
    }
}

/// Log recency comparison from the view-change protocol: `a` is at least
/// as up-to-date as `b` iff it has a higher last-append view, or the same
/// view and an equal-or-larger last-append slot.
pub fn log_up_to_date(a: (ViewNumber, SlotIndex), b: (ViewNumber, SlotIndex)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 >= b.1)
}
