//! Request lifecycle driver: traces, strategies, metrics and reports.

pub mod ablation;
mod profile;
mod report;
mod run;
mod timing;
mod trace;

pub use profile::{oracle_timings, profile_hardware, ProbeMode};
pub use report::{report_csv, report_table, Summary};
pub use run::{prompt_tokens, run, Metrics, Mode, RequestMetrics, RunConfig};
pub use timing::{simulate_decode, DeviceWrite, SaveMode, ServeTiming, WriteBacklog};
pub use trace::{gen_trace, Request, Trace, TraceKind, TraceParams};

use std::fmt;
use std::str::FromStr;

use crate::cost::CostError;
use crate::model::ModelError;
use crate::restore::RestoreError;
use crate::schedule::ScheduleError;
use crate::storage::StorageError;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("trace: {0}")]
    Trace(String),
    #[error("session {session} round {round}: expected {expected} history tokens, have {found}")]
    UnknownSessionState { session: String, round: usize, expected: usize, found: usize },
    #[error("unknown strategy {0:?}")]
    Strategy(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Restore(#[from] RestoreError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a returning session gets its KV cache back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Stored hidden states per the partition plan.
    HCache,
    /// Stored KV read back as is.
    KvOffload,
    /// Prefill again over the stored tokens.
    Recompute,
    /// KV never leaves accelerator memory.
    Ideal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::HCache, Strategy::KvOffload, Strategy::Recompute, Strategy::Ideal];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::HCache => "hidden",
            Strategy::KvOffload => "kv_offload",
            Strategy::Recompute => "recompute",
            Strategy::Ideal => "ideal",
        }
    }

    /// Whether new states are written to storage during serving.
    pub fn persists(self) -> bool {
        !matches!(self, Strategy::Ideal)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ServeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "hidden" | "hcache" => Ok(Strategy::HCache),
            "kv_offload" | "kv" | "offload" => Ok(Strategy::KvOffload),
            "recompute" => Ok(Strategy::Recompute),
            "ideal" => Ok(Strategy::Ideal),
            _ => Err(ServeError::Strategy(s.to_string())),
        }
    }
}
