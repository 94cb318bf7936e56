//! Chunked, striped persistence of per-layer state with two-stage saving.
//!
//! Saving is layer-major (one record per layer per forward pass) while reads
//! are token-major per layer; the chunk directory in the manifest bridges the
//! two without rewriting data.

mod buffer;
mod manifest;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::model::ModelConfig;

pub use buffer::{Record, SnapshotBuffer, DEFAULT_BUFFER_BYTES};
pub use manifest::{ChunkEntry, ManifestState, SessionManifest};
pub use store::{spawn_daemon, split_kv, DaemonHandle, LayerRead, SessionSpec, SessionStore};

/// Tokens per chunk.
pub const CHUNK_TOKENS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} was never finalized")]
    Incomplete(String),
    #[error("session {0} is not finalized")]
    NotFinalized(String),
    #[error("session {0} is finalized; reopen it to append")]
    Finalized(String),
    #[error("layer {layer} has no stored {kind} state")]
    Absent { layer: usize, kind: StateKind },
    #[error("{pending} snapshot records still queued for session {session}")]
    DrainIncomplete { session: String, pending: usize },
    #[error("snapshot buffer full ({needed} bytes needed, {free} free)")]
    Backpressure { needed: usize, free: usize },
    #[error("session {0} is corrupt after a failed write")]
    Corrupt(String),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("invalid device pool: {0}")]
    BadPool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a chunk holds: layer input hidden states (`d` per token) or K then V
/// (`2d` per token).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateKind {
    Hidden,
    Kv,
}

impl StateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::Hidden => "hidden",
            StateKind::Kv => "kv",
        }
    }

    pub fn width(self, d_hidden: usize) -> usize {
        match self {
            StateKind::Hidden => d_hidden,
            StateKind::Kv => 2 * d_hidden,
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StateKind {
    type Err = StorageError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hidden" => Ok(StateKind::Hidden),
            "kv" => Ok(StateKind::Kv),
            _ => Err(StorageError::BadManifest(format!("unknown state kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChunkKey {
    pub session: String,
    pub layer: usize,
    pub kind: StateKind,
    pub chunk_idx: usize,
}

impl ChunkKey {
    pub fn first_token(&self) -> usize {
        self.chunk_idx * CHUNK_TOKENS
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.chk", self.layer, self.kind, self.chunk_idx)
    }
}

/// Round-robin placement, with the starting device rotated by layer.
pub fn device_for_chunk(key: &ChunkKey, n_devices: usize) -> usize {
    (key.layer + key.chunk_idx) % n_devices
}

/// Directories standing in for storage devices.
#[derive(Clone, Debug)]
pub struct DevicePool {
    roots: Vec<PathBuf>,
    /// Bytes per second per device for simulated read timing; `None` is unlimited.
    throttle: Option<f64>,
}

impl DevicePool {
    pub fn new(roots: Vec<PathBuf>, throttle: Option<f64>) -> Result<Self, StorageError> {
        if roots.is_empty() {
            return Err(StorageError::BadPool("no devices".into()));
        }
        if let Some(bw) = throttle {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(StorageError::BadPool(format!("throttle must be positive, got {bw}")));
            }
        }
        for r in &roots {
            std::fs::create_dir_all(r)?;
        }
        Ok(Self { roots, throttle })
    }

    /// `n` devices at `<base>/dev<i>`.
    pub fn under(base: &Path, n: usize, throttle: Option<f64>) -> Result<Self, StorageError> {
        Self::new((0..n).map(|i| base.join(format!("dev{i}"))).collect(), throttle)
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn root(&self, device: usize) -> &Path {
        &self.roots[device]
    }

    pub fn throttle(&self) -> Option<f64> {
        self.throttle
    }

    pub fn session_dir(&self, device: usize, session: &str) -> PathBuf {
        self.roots[device].join(session)
    }

    pub fn chunk_path(&self, key: &ChunkKey) -> PathBuf {
        self.session_dir(device_for_chunk(key, self.len()), &key.session).join(key.file_name())
    }

    pub fn manifest_path(&self, session: &str) -> PathBuf {
        self.roots[0].join(format!("{session}.manifest"))
    }

    pub fn tokens_path(&self, session: &str) -> PathBuf {
        self.session_dir(0, session).join("tokens.bin")
    }
}

/// Identifies the model a session's states belong to.
pub fn config_hash(cfg: &ModelConfig, seed: u64) -> String {
    let text = format!(
        "{} {} {} {} {} {} {} {} {} {} {}",
        cfg.n_layers,
        cfg.d_hidden,
        cfg.n_heads,
        cfg.d_ffn,
        cfg.vocab_size,
        cfg.elem_bytes,
        cfg.max_seq,
        cfg.layer_norm,
        cfg.rope,
        cfg.rope_base,
        seed
    );
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn encode(values: &[f32], elem_bytes: usize, out: &mut Vec<u8>) {
    match elem_bytes {
        2 => {
            for v in values {
                out.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
            }
        }
        _ => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

pub(crate) fn decode(bytes: &[u8], elem_bytes: usize, out: &mut Vec<f32>) {
    match elem_bytes {
        2 => out.extend(bytes.chunks_exact(2).map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())),
        _ => out.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))),
    }
}
