//! Two-lane restore pipeline: the IO lane fetches stored layers while the
//! compute lane projects or recomputes them.

mod engine;
mod sim;
mod timeline;

pub use engine::{restore, restore_token_wise, stage_costs, RestoreOptions, Throttle};
pub use sim::{schedule, simulate, simulate_token_wise, LayerCosts, SimParams};
pub use timeline::{bubble_fraction, Event, EventKind, Lane, Timeline};

use crate::model::ModelError;
use crate::storage::StorageError;

#[derive(Debug, thiserror::Error)]
pub enum RestoreError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("session was stored for plan {stored}, restore asked for {requested}")]
    PlanMismatch { stored: String, requested: String },
    #[error("session does not fit the model: {0}")]
    ConfigMismatch(String),
    #[error("split {split} exceeds {n_tokens} stored tokens")]
    BadSplit { split: usize, n_tokens: usize },
}
