//! Scenario configuration: flat `key = value` lines, `#` comments, dotted
//! keys for nesting (`delay.prop = uniform 2000 6000`). Unknown keys are
//! rejected so typos fail loudly before a simulation starts.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::harness::{Fault, FaultAction, Protocol, Scenario};
use crate::netsim::{DelayModel, Dist};
use crate::replica::Mutation;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Parse { line, msg: msg.into() })
}

/// A parsed configuration: the scenario plus the seed list to run it over.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
}

const KEYS: &[&str] = &[
    "protocol",
    "replicas",
    "clients",
    "think_ns",
    "delay.prop",
    "delay.proc",
    "delay.drop_rate",
    "round_length_ns",
    "early_exit",
    "duration_ns",
    "batch_cap",
    "coord_interval_ns",
    "ack_delay_ns",
    "detector_rounds",
    "proposers",
    "mutation",
    "compute_ideal",
    "declare_windows",
    "seeds",
];

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return err(line_no, format!("expected 'key = value', got '{}'", line));
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() || value.is_empty() {
            return err(line_no, "empty key or value");
        }
        let known = KEYS.contains(&key.as_str())
            || (key.starts_with("fault.") && key[6..].parse::<usize>().is_ok());
        if !known {
            return err(line_no, format!("unknown key '{}'", key));
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return err(line_no, format!("duplicate key '{}'", key));
        }
    }

    let protocol = match entries.get("protocol") {
        Some((line, v)) => match Protocol::parse(v) {
            Some(p) => p,
            None => return err(*line, format!("unknown protocol '{}'", v)),
        },
        None => Protocol::ChoraPulsing,
    };
    let replicas = match entries.get("replicas") {
        Some((line, v)) => parse_num::<u32>(*line, "replicas", v)?,
        None => 3,
    };
    let mut sc = Scenario::new(protocol, replicas);
    let mut seeds = Vec::new();
    let mut faults: BTreeMap<usize, Fault> = BTreeMap::new();

    for (key, (line, value)) in &entries {
        let line = *line;
        match key.as_str() {
            "protocol" | "replicas" => {}
            "clients" => sc.clients = parse_num(line, key, value)?,
            "think_ns" => sc.think_ns = parse_num(line, key, value)?,
            "delay.prop" => sc.delay.prop = parse_dist(line, &tokens(value))?,
            "delay.proc" => sc.delay.proc = parse_dist(line, &tokens(value))?,
            "delay.drop_rate" => sc.delay.drop_rate = parse_num(line, key, value)?,
            "round_length_ns" => sc.round_length_ns = parse_num(line, key, value)?,
            "early_exit" => sc.early_exit = parse_bool(line, key, value)?,
            "duration_ns" => sc.duration_ns = parse_num(line, key, value)?,
            "batch_cap" => sc.batch_cap = parse_num(line, key, value)?,
            "coord_interval_ns" => sc.coord_interval_ns = parse_num(line, key, value)?,
            "ack_delay_ns" => sc.ack_delay_ns = parse_num(line, key, value)?,
            "detector_rounds" => sc.detector_rounds = parse_num(line, key, value)?,
            "proposers" => sc.proposers = Some(parse_num(line, key, value)?),
            "mutation" => sc.mutation = Some(parse_mutation(line, value)?),
            "compute_ideal" => sc.compute_ideal = parse_bool(line, key, value)?,
            "declare_windows" => sc.declare_windows = parse_bool(line, key, value)?,
            "seeds" => {
                for t in tokens(value) {
                    seeds.push(parse_num(line, "seeds", &t)?);
                }
            }
            _ => {
                let idx: usize = key[6..].parse().expect("validated above");
                faults.insert(idx, parse_fault(line, value)?);
            }
        }
    }
    sc.faults = faults.into_values().collect();
    if seeds.is_empty() {
        seeds.push(0);
    }
    Ok(RunConfig { scenario: sc, seeds })
}

fn tokens(v: &str) -> Vec<String> {
    v.split_whitespace().map(|s| s.to_string()).collect()
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().or_else(|_| err(line, format!("invalid value '{}' for {}", v, key)))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => err(line, format!("invalid boolean '{}' for {}", v, key)),
    }
}

/// `constant X` | `uniform LO HI` | `lognormal MU SIGMA SHIFT` |
/// `empirical V1 V2 ...`; also accepted with `:` separators inside faults.
fn parse_dist(line: usize, toks: &[String]) -> Result<Dist, ConfigError> {
    let want = |n: usize| -> Result<(), ConfigError> {
        if toks.len() == n + 1 {
            Ok(())
        } else {
            err(line, format!("{} takes {} arguments", toks[0], n))
        }
    };
    match toks.first().map(|s| s.as_str()) {
        Some("constant") => {
            want(1)?;
            Ok(Dist::Constant(parse_num(line, "constant", &toks[1])?))
        }
        Some("uniform") => {
            want(2)?;
            let lo = parse_num(line, "uniform", &toks[1])?;
            let hi = parse_num(line, "uniform", &toks[2])?;
            if lo > hi {
                return err(line, "uniform bounds out of order");
            }
            Ok(Dist::Uniform { lo, hi })
        }
        Some("lognormal") => {
            want(3)?;
            Ok(Dist::LogNormal {
                mu: parse_num(line, "lognormal", &toks[1])?,
                sigma: parse_num(line, "lognormal", &toks[2])?,
                shift: parse_num(line, "lognormal", &toks[3])?,
            })
        }
        Some("empirical") => {
            if toks.len() < 2 {
                return err(line, "empirical needs at least one sample");
            }
            let vals = toks[1..]
                .iter()
                .map(|t| parse_num(line, "empirical", t))
                .collect::<Result<Vec<u64>, _>>()?;
            Ok(Dist::Empirical(vals))
        }
        _ => err(line, format!("unknown distribution '{}'", toks.first().cloned().unwrap_or_default())),
    }
}

fn parse_mutation(line: usize, v: &str) -> Result<Mutation, ConfigError> {
    match v {
        "skip-quorum-check" => Ok(Mutation::SkipQuorumCheck),
        "ack-with-gaps" => Ok(Mutation::AckWithGaps),
        "commit-at-q-minus-one" => Ok(Mutation::CommitAtQMinusOne),
        "vote-twice-per-view" => Ok(Mutation::VoteTwicePerView),
        "stale-recover-above-ack" => Ok(Mutation::StaleRecoverAboveAck),
        _ => err(line, format!("unknown mutation '{}'", v)),
    }
}

/// `TIME crash NODE` | `TIME partition IDS until TIME` |
/// `TIME set-drop-rate P` | `TIME set-delay PROP PROC DROP`
/// where PROP/PROC are `:`-joined distributions (e.g. `uniform:2000:8000`).
fn parse_fault(line: usize, v: &str) -> Result<Fault, ConfigError> {
    let toks = tokens(v);
    if toks.len() < 2 {
        return err(line, "fault needs a time and an action");
    }
    let at: u64 = parse_num(line, "fault time", &toks[0])?;
    let action = match toks[1].as_str() {
        "crash" => {
            if toks.len() != 3 {
                return err(line, "crash takes one node id");
            }
            FaultAction::Crash(parse_num(line, "crash node", &toks[2])?)
        }
        "partition" => {
            if toks.len() != 5 || toks[3] != "until" {
                return err(line, "expected: partition IDS until TIME");
            }
            let side = toks[2]
                .split(',')
                .map(|t| parse_num(line, "partition node", t))
                .collect::<Result<_, _>>()?;
            FaultAction::Partition { side, until: parse_num(line, "heal time", &toks[4])? }
        }
        "set-drop-rate" => {
            if toks.len() != 3 {
                return err(line, "set-drop-rate takes one probability");
            }
            FaultAction::SetDropRate(parse_num(line, "drop rate", &toks[2])?)
        }
        "set-delay" => {
            if toks.len() != 5 {
                return err(line, "expected: set-delay PROP PROC DROP");
            }
            let prop = parse_dist(line, &split_colon(&toks[2]))?;
            let proc = parse_dist(line, &split_colon(&toks[3]))?;
            let drop: f64 = parse_num(line, "drop rate", &toks[4])?;
            FaultAction::SetDelayModel(DelayModel::new(prop, proc, drop))
        }
        other => return err(line, format!("unknown fault action '{}'", other)),
    };
    Ok(Fault { at, action })
}

fn split_colon(t: &str) -> Vec<String> {
    t.split(':').map(|s| s.to_string()).collect()
}
