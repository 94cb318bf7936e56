//! Restoring LLM contextual state from saved per-layer hidden states.

pub mod cost;
pub mod kvtext;
pub mod model;
pub mod restore;
pub mod schedule;
pub mod serving;
pub mod storage;
