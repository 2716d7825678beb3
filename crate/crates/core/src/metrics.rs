//! Synchrony metrics: synchrony coefficients over measured delay samples,
//! round-length lower bounds, throughput upper bounds, and the round
//! efficiency/effectiveness analysis.
//!
//! All percentiles use the nearest-rank method: the ceil(x/100 * n)-th
//! order statistic, 1-based.

use thiserror::Error;

use crate::trace::{CmdTag, TraceKind, TraceLog};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("percentile level {0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("synchrony coefficient undefined: denominator {0} <= 0")]
    UndefinedCoefficient(f64),
    #[error("measured value is zero")]
    ZeroMeasured,
    #[error("trace contains no commits")]
    NoCommits,
}

/// Measured one-way delays, decomposed into propagation and processing.
#[derive(Debug, Clone, Default)]
pub struct DelaySamples {
    pub prop: Vec<u64>,
    pub proc: Vec<u64>,
}

impl DelaySamples {
    /// Per-message total delay d = d_prop + d_proc. Meaningful only when
    /// the two vectors are index-aligned.
    pub fn combined(&self) -> Vec<u64> {
        self.prop.iter().zip(&self.proc).map(|(a, b)| a + b).collect()
    }
}

pub fn mean(samples: &[u64]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    Ok(samples.iter().map(|&v| v as f64).sum::<f64>() / samples.len() as f64)
}

/// Nearest-rank percentile: smallest value with at least x% of samples at
/// or below it.
pub fn percentile(samples: &[u64], x: f64) -> Result<u64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(x > 0.0 && x <= 100.0) {
        return Err(MetricsError::BadPercentile(x));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((x / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Coefficient of a conventional synchronous system: mean delay over the
/// x-th percentile delay.
pub fn s_tilde(samples: &[u64], x: f64) -> Result<f64, MetricsError> {
    let m = mean(samples)?;
    let p = percentile(samples, x)? as f64;
    if p <= 0.0 {
        return Err(MetricsError::UndefinedCoefficient(p));
    }
    Ok(m / p)
}

/// Coefficient under rounds that exclude the mean propagation delay:
/// mean(proc) / ([p_x(prop) - mean(prop)] + p_x(proc)).
pub fn s_chora(prop: &[u64], proc: &[u64], x: f64) -> Result<f64, MetricsError> {
    let (_, chora) = round_bounds(prop, proc, x)?;
    if chora <= 0.0 {
        return Err(MetricsError::UndefinedCoefficient(chora));
    }
    Ok(mean(proc)? / chora)
}

/// Round-length lower bounds in ns: conventional rounds must cover the
/// delay tail, pipelined rounds only the tail's excess over the mean
/// propagation plus the processing tail.
pub fn round_bounds(prop: &[u64], proc: &[u64], x: f64) -> Result<(f64, f64), MetricsError> {
    let p_prop = percentile(prop, x)? as f64;
    let p_proc = percentile(proc, x)? as f64;
    let m_prop = mean(prop)?;
    Ok((p_prop + p_proc, (p_prop - m_prop) + p_proc))
}

/// Throughput upper bound in work-units per ns: S^x * W / mean(proc).
pub fn tput_bound(w: f64, prop: &[u64], proc: &[u64], x: f64) -> Result<f64, MetricsError> {
    let s = s_chora(prop, proc, x)?;
    let m_proc = mean(proc)?;
    if m_proc <= 0.0 {
        return Err(MetricsError::UndefinedCoefficient(m_proc));
    }
    Ok(s * w / m_proc)
}

/// Round efficiency alpha = ideal round length / measured round length and
/// effectiveness beta = ideal work per round / measured work per round.
pub fn efficiency_effectiveness(
    ideal: (f64, f64),
    measured: (f64, f64),
) -> Result<(f64, f64), MetricsError> {
    let (t_hat, r_hat) = ideal;
    let (t, r) = measured;
    if t <= 0.0 || r <= 0.0 {
        return Err(MetricsError::ZeroMeasured);
    }
    Ok((t_hat / t, r_hat / r))
}

/// kappa = max over measured points of alpha * beta.
pub fn kappa(points: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    Ok(points.iter().map(|&(a, b)| a * b).fold(f64::MIN, f64::max))
}

/// Broadcast cost of commits: multicast emissions (each multicast counted
/// once) per committed slot, plus the per-copy convention (x (N-1)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsgsPerCommit {
    pub per_multicast: f64,
    pub per_copy: f64,
    pub broadcasts: u64,
    pub committed_slots: u64,
}

/// Scan a trace for the broadcast-per-commit ratio. No-op and view-init
/// slots count in the denominator only when `include_fillers` is set.
pub fn msgs_per_commit(
    trace: &TraceLog,
    replicas: u32,
    include_fillers: bool,
) -> Result<MsgsPerCommit, MetricsError> {
    let mut broadcasts = 0u64;
    let mut slots = std::collections::BTreeSet::new();
    for e in trace.events() {
        match &e.kind {
            TraceKind::Send { mcast: true, .. } => broadcasts += 1,
            TraceKind::Commit { slot, tag, .. } => {
                if include_fillers || *tag == CmdTag::Op {
                    slots.insert(*slot);
                }
            }
            _ => {}
        }
    }
    if slots.is_empty() {
        return Err(MetricsError::NoCommits);
    }
    let per_multicast = broadcasts as f64 / slots.len() as f64;
    Ok(MsgsPerCommit {
        per_multicast,
        per_copy: per_multicast * replicas.saturating_sub(1) as f64,
        broadcasts,
        committed_slots: slots.len() as u64,
    })
}

/// Everything the run-stats CSV wants about measured synchrony.
#[derive(Debug, Clone, Copy)]
pub struct SynchronyReport {
    pub x: f64,
    pub s_tilde: f64,
    pub s: f64,
    pub t_bound_conventional: f64,
    pub t_bound_chora: f64,
    pub tput_bound: f64,
}

impl SynchronyReport {
    /// Build from delay samples at percentile level `x`; `w` is the mean
    /// committed work per round.
    pub fn from_samples(d: &DelaySamples, x: f64, w: f64) -> Result<Self, MetricsError> {
        let combined = d.combined();
        let (conv, chora) = round_bounds(&d.prop, &d.proc, x)?;
        Ok(SynchronyReport {
            x,
            s_tilde: s_tilde(&combined, x)?,
            s: s_chora(&d.prop, &d.proc, x)?,
            t_bound_conventional: conv,
            t_bound_chora: chora,
            tput_bound: tput_bound(w, &d.prop, &d.proc, x)?,
        })
    }
}
