//! Chora state machine replication: protocol core, deterministic network
//! simulator, synchrony metrics, trace safety checker, baseline protocols
//! for comparison, and the scenario harness that ties them together.

pub mod baselines;
pub mod checker;
pub mod config;
pub mod csvio;
pub mod harness;
pub mod log;
pub mod metrics;
pub mod netsim;
pub mod replica;
pub mod trace;
pub mod types;

pub use checker::{check_all, CheckerReport, SyncWindow, Verdict};
pub use config::{parse_config, ConfigError, RunConfig};
pub use csvio::{csv_row, to_csv, CSV_HEADER};
pub use harness::{
    result_from_trace, run_scenario, run_seeds, sweep, Fault, FaultAction, Protocol, RunOutcome,
    RunResult, Scenario, ScenarioError, SweepAxis,
};
pub use log::{Log, LogError};
pub use trace::{TraceEvent, TraceKind, TraceLog};
pub use types::{
    AckVector, AssignmentScheme, ClientOp, Command, CommandId, CommandKind, ReplicaId, ReqId,
    SlotIndex, ViewNumber,
};
