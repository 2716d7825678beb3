//! Run-stats CSV emission. The header and number formatting are pinned:
//! decimal values carry 6 significant digits, missing values are empty
//! fields, and identical results always serialize to identical bytes.

use crate::harness::RunResult;

pub const CSV_HEADER: &str = "seed,protocol,mode,replicas,round_length_ns,drop_rate,\
committed_ops,total_rounds,sim_time_ns,throughput_ops_per_s,mean_latency_ns,p90_latency_ns,\
broadcasts,msgs_per_commit,s_tilde_90,s_chora_90,alpha,beta,kappa,safety_pass,\
time_to_recover_ns";

/// Round to 6 significant digits and print without an exponent.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return String::new();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(exp - 5);
    let rounded = (x / scale).round() * scale;
    let prec = (5 - exp).max(0) as usize;
    let s = format!("{:.*}", prec, rounded);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

fn opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &RunResult) -> String {
    let (s_tilde, s) = match &r.synchrony {
        Some(sr) => (Some(sr.s_tilde), Some(sr.s)),
        None => (None, None),
    };
    [
        r.seed.to_string(),
        r.protocol.clone(),
        r.mode.clone(),
        r.replicas.to_string(),
        r.round_length_ns.to_string(),
        sig6(r.drop_rate),
        r.committed_ops.to_string(),
        r.total_rounds.to_string(),
        r.sim_time_ns.to_string(),
        sig6(r.throughput_ops_per_s),
        opt_f64(r.mean_latency_ns),
        opt_u64(r.p90_latency_ns),
        r.broadcasts.to_string(),
        opt_f64(r.msgs_per_commit),
        opt_f64(s_tilde),
        opt_f64(s),
        opt_f64(r.alpha),
        opt_f64(r.beta),
        opt_f64(r.kappa),
        r.safety_pass.to_string(),
        opt_u64(r.time_to_recover_ns),
    ]
    .join(",")
}

/// Header plus one row per result, newline-terminated.
pub fn to_csv(results: &[RunResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}
