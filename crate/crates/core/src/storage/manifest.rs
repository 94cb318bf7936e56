use std::io::Write;
use std::path::Path;

use super::{StateKind, StorageError, CHUNK_TOKENS};
use crate::kvtext;
use crate::schedule::RestorationPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestState {
    Open,
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkEntry {
    pub layer: usize,
    pub kind: StateKind,
    pub chunk_idx: usize,
    pub device: usize,
    pub tokens: usize,
}

/// Text record at `<device 0>/<session>.manifest`.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionManifest {
    pub session_id: String,
    pub config_hash: String,
    pub n_tokens: usize,
    pub plan: RestorationPlan,
    pub chunk_tokens: usize,
    pub n_devices: usize,
    pub elem_bytes: usize,
    pub d_hidden: usize,
    pub state: ManifestState,
    /// Ordered by (layer, kind, chunk).
    pub chunks: Vec<ChunkEntry>,
}

impl SessionManifest {
    pub fn n_layers(&self) -> usize {
        self.plan.n_layers()
    }

    /// Chunks of one stored layer, in token order.
    pub fn layer_chunks(&self, layer: usize, kind: StateKind) -> Vec<&ChunkEntry> {
        self.chunks.iter().filter(|c| c.layer == layer && c.kind == kind).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "session={}\nconfig_hash={}\nn_tokens={}\nplan_l_h={}\nplan_l_o={}\nplan_complement={}\n\
             chunk_tokens={}\ndevices={}\nelem_bytes={}\nd_hidden={}\nstate={}\n",
            self.session_id,
            self.config_hash,
            self.n_tokens,
            self.plan.l_h,
            self.plan.l_o,
            self.plan.complement.as_str(),
            self.chunk_tokens,
            self.n_devices,
            self.elem_bytes,
            self.d_hidden,
            match self.state {
                ManifestState::Open => "open",
                ManifestState::Final => "final",
            }
        );
        for c in &self.chunks {
            s.push_str(&format!("chunk={},{},{},{},{}\n", c.layer, c.kind, c.chunk_idx, c.device, c.tokens));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, StorageError> {
        let bad = |m: String| StorageError::BadManifest(m);
        let pairs = kvtext::parse_pairs(text).map_err(|e| bad(e.to_string()))?;
        let get = |k: &str| -> Result<&str, StorageError> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<usize, StorageError> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not a count")))
        };
        let l_h = num("plan_l_h")?;
        let l_o = num("plan_l_o")?;
        let complement = get("plan_complement")?.parse().map_err(|_| bad("bad plan_complement".into()))?;
        let plan = RestorationPlan::new(l_h + l_o, l_h, l_o, complement).map_err(|e| bad(e.to_string()))?;
        let state = match get("state")? {
            "open" => ManifestState::Open,
            "final" => ManifestState::Final,
            other => return Err(bad(format!("unknown state {other:?}"))),
        };
        let mut chunks = Vec::new();
        for (k, v) in &pairs {
            if k != "chunk" {
                continue;
            }
            let f: Vec<&str> = v.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("chunk line {v:?}")));
            }
            let n = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("chunk line {v:?}")));
            chunks.push(ChunkEntry {
                layer: n(f[0])?,
                kind: f[1].parse()?,
                chunk_idx: n(f[2])?,
                device: n(f[3])?,
                tokens: n(f[4])?,
            });
        }
        let m = Self {
            session_id: get("session")?.to_string(),
            config_hash: get("config_hash")?.to_string(),
            n_tokens: num("n_tokens")?,
            plan,
            chunk_tokens: num("chunk_tokens")?,
            n_devices: num("devices")?,
            elem_bytes: num("elem_bytes")?,
            d_hidden: num("d_hidden")?,
            state,
            chunks,
        };
        if m.chunk_tokens != CHUNK_TOKENS {
            return Err(bad(format!("chunk_tokens {} unsupported", m.chunk_tokens)));
        }
        Ok(m)
    }

    /// Write via a temporary file and rename so readers never see a torn manifest.
    pub fn write_atomic(&self, path: &Path) -> Result<(), StorageError> {
        let tmp = path.with_extension("manifest.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_text().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StorageError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
