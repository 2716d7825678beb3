//! The replicated log: a sparse slot -> command map with a tracked
//! gap-free prefix end (`last_append`). Slot 0 is an implicit null
//! sentinel with attached view 0.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{Command, SlotIndex, ViewNumber};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("slot index 0 is the null sentinel and cannot hold a command")]
    SentinelSlot,
    #[error("slot {slot} already holds a different command in view {view}")]
    ConflictingCommand { slot: SlotIndex, view: ViewNumber },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Log {
    slots: BTreeMap<SlotIndex, Command>,
    last_append: SlotIndex,
}

impl Log {
    pub fn new() -> Self {
        Log::default()
    }

    /// End of the gap-free prefix: the largest s such that slots 1..=s are
    /// all filled.
    pub fn last_append(&self) -> SlotIndex {
        self.last_append
    }

    pub fn get(&self, slot: SlotIndex) -> Option<&Command> {
        self.slots.get(&slot)
    }

    pub fn is_filled(&self, slot: SlotIndex) -> bool {
        slot == 0 || self.slots.contains_key(&slot)
    }

    /// Attached view of the last appended command (view 0 at the sentinel).
    pub fn last_append_view(&self) -> ViewNumber {
        if self.last_append == 0 {
            0
        } else {
            self.slots[&self.last_append].view
        }
    }

    /// Largest filled slot, including sparse entries beyond the prefix.
    pub fn max_filled(&self) -> SlotIndex {
        self.slots.keys().next_back().copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotIndex, &Command)> {
        self.slots.iter().map(|(&s, c)| (s, c))
    }

    /// Store `cmd` at `slot`. Redelivery of an identical command is a
    /// no-op; a different command at a filled slot with the same attached
    /// view signals a protocol bug. A different command with a *different*
    /// view is also rejected here; callers that legitimately replace
    /// entries across views must truncate first.
    ///
    /// Returns true if the slot content changed.
    pub fn append(&mut self, slot: SlotIndex, cmd: Command) -> Result<bool, LogError> {
        if slot == 0 {
            return Err(LogError::SentinelSlot);
        }
        if let Some(existing) = self.slots.get(&slot) {
            if *existing == cmd {
                return Ok(false);
            }
            return Err(LogError::ConflictingCommand { slot, view: existing.view });
        }
        self.slots.insert(slot, cmd);
        if slot == self.last_append + 1 {
            let mut s = slot;
            while self.slots.contains_key(&(s + 1)) {
                s += 1;
            }
            self.last_append = s;
        }
        Ok(true)
    }

    /// Remove every entry at slots > `keep`. Returns the removed count.
    pub fn truncate_above(&mut self, keep: SlotIndex) -> usize {
        let doomed: Vec<SlotIndex> = self.slots.range(keep + 1..).map(|(&s, _)| s).collect();
        for s in &doomed {
            self.slots.remove(s);
        }
        if self.last_append > keep {
            self.last_append = keep;
        }
        doomed.len()
    }

    /// Remove entries in `[from, to]` (used by view-change catch-up when a
    /// recovered proposal disagrees with the local tail).
    pub fn clear_range(&mut self, from: SlotIndex, to: SlotIndex) -> usize {
        let doomed: Vec<SlotIndex> = self.slots.range(from..=to).map(|(&s, _)| s).collect();
        for s in &doomed {
            self.slots.remove(s);
        }
        if self.last_append >= from {
            self.last_append = from - 1;
        }
        doomed.len()
    }

    /// Empty slots in the inclusive range, in order.
    pub fn gaps_in(&self, lo: SlotIndex, hi: SlotIndex) -> Vec<SlotIndex> {
        (lo.max(1)..=hi).filter(|s| !self.slots.contains_key(s)).collect()
    }

    /// Attached views over the gap-free prefix are non-decreasing.
    pub fn views_monotone(&self) -> bool {
        let mut prev = 0;
        for s in 1..=self.last_append {
            let v = self.slots[&s].view;
            if v < prev {
                return false;
            }
            prev = v;
        }
        true
    }
}
