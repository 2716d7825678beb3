//! Offline trace checker. Replays a run trace into per-node log
//! reconstructions and election snapshots, then asserts the protocol's
//! safety properties (commit uniqueness, log matching, monotone views,
//! initiator completeness, execution consistency) plus bounded-latency
//! progress inside declared synchronous windows.

use std::collections::{BTreeMap, BTreeSet};

use crate::trace::{AdoptedRole, TraceKind, TraceLog};
use crate::types::{CommandId, ReqId};

/// Outcome of one check. `inconclusive` marks a check that could not be
/// evaluated for lack of evidence; it is reported but does not fail a run.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub inconclusive: bool,
    pub detail: String,
}

impl Verdict {
    fn passed(name: &'static str) -> Self {
        Verdict { name, pass: true, inconclusive: false, detail: String::new() }
    }

    fn failed(name: &'static str, detail: String) -> Self {
        Verdict { name, pass: false, inconclusive: false, detail }
    }

    fn unclear(name: &'static str, detail: String) -> Self {
        Verdict { name, pass: true, inconclusive: true, detail }
    }

    /// One machine-readable line: `name PASS|FAIL|INCONCLUSIVE [detail]`.
    pub fn summary_line(&self) -> String {
        let status = if !self.pass {
            "FAIL"
        } else if self.inconclusive {
            "INCONCLUSIVE"
        } else {
            "PASS"
        };
        if self.detail.is_empty() {
            format!("{} {}", self.name, status)
        } else {
            format!("{} {}: {}", self.name, status, self.detail)
        }
    }
}

/// Interval of simulated time during which delays were bounded and no
/// faults were injected; requests admitted here must commit within
/// `bound_ns` of arrival (provided the bound expires inside the window).
#[derive(Debug, Clone, Copy)]
pub struct SyncWindow {
    pub start: u64,
    pub end: u64,
    pub bound_ns: u64,
}

#[derive(Debug, Clone)]
pub struct CheckerReport {
    pub verdicts: Vec<Verdict>,
}

impl CheckerReport {
    /// True when no check failed; inconclusive checks do not fail a run.
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.verdicts {
            s.push_str(&v.summary_line());
            s.push('\n');
        }
        s
    }
}

/// Slot contents as reconstructed from append/truncate events.
type NodeLog = BTreeMap<u64, (CommandId, u64)>;

/// A log snapshot taken the moment a node adopted a view as initiator.
#[derive(Debug, Clone)]
pub struct ElectionSnapshot {
    pub node: u32,
    pub view: u64,
    pub time: u64,
    pub log: NodeLog,
}

/// Replay appends and truncations into per-node final logs, capturing a
/// snapshot at every initiator adoption.
pub fn build_logs(trace: &TraceLog) -> (BTreeMap<u32, NodeLog>, Vec<ElectionSnapshot>) {
    let mut logs: BTreeMap<u32, NodeLog> = BTreeMap::new();
    let mut snaps = Vec::new();
    for e in trace.events() {
        match &e.kind {
            TraceKind::Append { slot, cmd, view, .. } => {
                logs.entry(e.node).or_default().insert(*slot, (*cmd, *view));
            }
            TraceKind::Truncate { from, to } => {
                if let Some(log) = logs.get_mut(&e.node) {
                    let gone: Vec<u64> = log.range(*from..=*to).map(|(s, _)| *s).collect();
                    for s in gone {
                        log.remove(&s);
                    }
                }
            }
            TraceKind::ViewAdopt { view, role: AdoptedRole::Initiator } => {
                snaps.push(ElectionSnapshot {
                    node: e.node,
                    view: *view,
                    time: e.time,
                    log: logs.get(&e.node).cloned().unwrap_or_default(),
                });
            }
            _ => {}
        }
    }
    (logs, snaps)
}

/// At most one command is ever committed per slot, across all nodes.
pub fn check_commit_uniqueness(trace: &TraceLog) -> Verdict {
    const NAME: &str = "commit-uniqueness";
    let mut first: BTreeMap<u64, (CommandId, u32, u64)> = BTreeMap::new();
    for e in trace.events() {
        if let TraceKind::Commit { slot, cmd, .. } = &e.kind {
            match first.get(slot) {
                None => {
                    first.insert(*slot, (*cmd, e.node, e.time));
                }
                Some((c0, n0, t0)) if c0 != cmd => {
                    return Verdict::failed(
                        NAME,
                        format!(
                            "slot {} committed as {} by node {} at {} and as {} by node {} at {}",
                            slot, c0, n0, t0, cmd, e.node, e.time
                        ),
                    );
                }
                _ => {}
            }
        }
    }
    Verdict::passed(NAME)
}

fn log_label(node: u32, view: Option<u64>) -> String {
    match view {
        Some(v) => format!("node {} at view {} election", node, v),
        None => format!("node {} final", node),
    }
}

/// If two logs hold the same (command, view) at some slot, they agree on
/// every slot both have filled below it.
pub fn check_log_matching(trace: &TraceLog) -> Verdict {
    const NAME: &str = "log-matching";
    let (finals, snaps) = build_logs(trace);
    let mut logs: Vec<(String, &NodeLog)> = Vec::new();
    for (node, log) in &finals {
        logs.push((log_label(*node, None), log));
    }
    for s in &snaps {
        logs.push((log_label(s.node, Some(s.view)), &s.log));
    }
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            let (la, a) = &logs[i];
            let (lb, b) = &logs[j];
            // Highest slot where both hold the same appended (command, view).
            let anchor = a
                .iter()
                .rev()
                .find(|(s, cv)| b.get(s) == Some(cv))
                .map(|(s, _)| *s);
            let Some(anchor) = anchor else { continue };
            for (s, (ca, _)) in a.range(..=anchor) {
                if let Some((cb, _)) = b.get(s) {
                    if ca != cb {
                        return Verdict::failed(
                            NAME,
                            format!(
                                "{} and {} share slot {} but differ at slot {}: {} vs {}",
                                la, lb, anchor, s, ca, cb
                            ),
                        );
                    }
                }
            }
        }
    }
    Verdict::passed(NAME)
}

/// Gap-free log prefixes carry non-decreasing views, and no view recurs
/// after a different view intervened.
pub fn check_monotone_views(trace: &TraceLog) -> Verdict {
    const NAME: &str = "monotone-views";
    let (finals, snaps) = build_logs(trace);
    let mut logs: Vec<(String, &NodeLog)> = Vec::new();
    for (node, log) in &finals {
        logs.push((log_label(*node, None), log));
    }
    for s in &snaps {
        logs.push((log_label(s.node, Some(s.view)), &s.log));
    }
    for (label, log) in logs {
        let mut expect = 1u64;
        let mut last_view: Option<u64> = None;
        let mut closed: BTreeSet<u64> = BTreeSet::new();
        for (slot, (_, view)) in log {
            if *slot != expect {
                break;
            }
            expect += 1;
            if let Some(lv) = last_view {
                if *view < lv {
                    return Verdict::failed(
                        NAME,
                        format!("{}: view {} at slot {} after view {}", label, view, slot, lv),
                    );
                }
                if *view != lv {
                    closed.insert(lv);
                }
            }
            if closed.contains(view) {
                return Verdict::failed(
                    NAME,
                    format!("{}: view {} recurs at slot {} after other views", label, view, slot),
                );
            }
            last_view = Some(*view);
        }
    }
    Verdict::passed(NAME)
}

/// Every committed command appears in the log of each later view's
/// initiator as of its election (for elections after the commit).
pub fn check_initiator_completeness(trace: &TraceLog) -> Verdict {
    const NAME: &str = "initiator-completeness";
    let (_, snaps) = build_logs(trace);
    // slot -> (cmd, cmd view, first commit time); node views seen committing.
    let mut commits: BTreeMap<u64, (CommandId, u64, u64)> = BTreeMap::new();
    let mut commit_views: BTreeSet<u64> = BTreeSet::new();
    for e in trace.events() {
        if let TraceKind::Commit { slot, cmd, cmd_view, node_view, .. } = &e.kind {
            commits.entry(*slot).or_insert((*cmd, *cmd_view, e.time));
            commit_views.insert(*node_view);
        }
    }
    for snap in &snaps {
        for (slot, (cmd, cmd_view, t_commit)) in &commits {
            if *cmd_view >= snap.view || *t_commit > snap.time {
                continue;
            }
            match snap.log.get(slot) {
                Some((c, _)) if c == cmd => {}
                other => {
                    return Verdict::failed(
                        NAME,
                        format!(
                            "{} missing commit {} at slot {} (view {}): found {:?}",
                            log_label(snap.node, Some(snap.view)),
                            cmd,
                            slot,
                            cmd_view,
                            other.map(|(c, v)| (c.to_string(), *v)),
                        ),
                    );
                }
            }
        }
    }
    // Commits spanning views with no recorded election cannot be vouched for.
    let snap_views: BTreeSet<u64> = snaps.iter().map(|s| s.view).collect();
    let min_cmd_view = commits.values().map(|(_, v, _)| *v).min();
    if let Some(lo) = min_cmd_view {
        let unwitnessed: Vec<u64> =
            commit_views.iter().filter(|v| **v > lo && !snap_views.contains(v)).copied().collect();
        if !unwitnessed.is_empty() {
            return Verdict::unclear(
                NAME,
                format!("no election snapshot for views {:?}", unwitnessed),
            );
        }
    }
    Verdict::passed(NAME)
}

/// Each node executes slots 1,2,3,... in order, only after committing the
/// same command locally; per-slot commands agree across nodes; no request
/// id is carried by two different executed slots.
pub fn check_execution_consistency(trace: &TraceLog) -> Verdict {
    const NAME: &str = "execution-consistency";
    let mut next: BTreeMap<u32, u64> = BTreeMap::new();
    let mut local_commits: BTreeMap<(u32, u64), CommandId> = BTreeMap::new();
    let mut slot_cmd: BTreeMap<u64, CommandId> = BTreeMap::new();
    let mut slot_reqs: BTreeMap<u64, Vec<ReqId>> = BTreeMap::new();
    let mut executed: BTreeSet<u64> = BTreeSet::new();
    for e in trace.events() {
        match &e.kind {
            TraceKind::Commit { slot, cmd, reqs, .. } => {
                local_commits.insert((e.node, *slot), *cmd);
                slot_reqs.entry(*slot).or_insert_with(|| reqs.clone());
            }
            TraceKind::Execute { slot, cmd } => {
                let want = next.entry(e.node).or_insert(1);
                if *slot != *want {
                    return Verdict::failed(
                        NAME,
                        format!("node {} executed slot {} expecting slot {}", e.node, slot, want),
                    );
                }
                *want += 1;
                match local_commits.get(&(e.node, *slot)) {
                    Some(c) if c == cmd => {}
                    _ => {
                        return Verdict::failed(
                            NAME,
                            format!("node {} executed slot {} without committing {}", e.node, slot, cmd),
                        );
                    }
                }
                match slot_cmd.get(slot) {
                    None => {
                        slot_cmd.insert(*slot, *cmd);
                    }
                    Some(c0) if c0 != cmd => {
                        return Verdict::failed(
                            NAME,
                            format!("slot {} executed as {} and as {}", slot, c0, cmd),
                        );
                    }
                    _ => {}
                }
                executed.insert(*slot);
            }
            _ => {}
        }
    }
    let mut req_slot: BTreeMap<ReqId, u64> = BTreeMap::new();
    for slot in &executed {
        for req in slot_reqs.get(slot).map(|v| v.as_slice()).unwrap_or(&[]) {
            if let Some(prev) = req_slot.insert(*req, *slot) {
                if prev != *slot {
                    return Verdict::failed(
                        NAME,
                        format!("request {} executed at slots {} and {}", req, prev, slot),
                    );
                }
            }
        }
    }
    Verdict::passed(NAME)
}

/// Requests arriving in a synchronous window commit within its bound,
/// provided the bound expires before the window closes.
pub fn check_progress(trace: &TraceLog, windows: &[SyncWindow]) -> Verdict {
    const NAME: &str = "progress";
    let mut first_commit: BTreeMap<ReqId, u64> = BTreeMap::new();
    for e in trace.events() {
        if let TraceKind::Commit { reqs, .. } = &e.kind {
            for r in reqs {
                first_commit.entry(*r).or_insert(e.time);
            }
        }
    }
    let mut worst: Option<(ReqId, u64, u64)> = None;
    for e in trace.events() {
        let TraceKind::Request { req } = &e.kind else { continue };
        for w in windows {
            if e.time < w.start || e.time > w.end {
                continue;
            }
            let deadline = e.time + w.bound_ns;
            if deadline > w.end {
                continue;
            }
            let met = first_commit.get(req).is_some_and(|t| *t <= deadline);
            if !met && worst.map_or(true, |(_, t, _)| e.time < t) {
                worst = Some((*req, e.time, deadline));
            }
        }
    }
    match worst {
        Some((req, at, deadline)) => Verdict::failed(
            NAME,
            format!("request {} admitted at {} not committed by {}", req, at, deadline),
        ),
        None => Verdict::passed(NAME),
    }
}

/// Run the full suite and collect per-check verdicts.
pub fn check_all(trace: &TraceLog, windows: &[SyncWindow]) -> CheckerReport {
    CheckerReport {
        verdicts: vec![
            check_commit_uniqueness(trace),
            check_log_matching(trace),
            check_monotone_views(trace),
            check_initiator_completeness(trace),
            check_execution_consistency(trace),
            check_progress(trace, windows),
        ],
    }
}
