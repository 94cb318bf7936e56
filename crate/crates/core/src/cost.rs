//! Analytical restoration cost: FLOP and byte accounting turned into seconds.

use std::path::Path;

use crate::kvtext;
use crate::model::{flops, ModelConfig};
use crate::schedule::{Complement, RestorationPlan};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("profile file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Accelerator and link speeds used to turn work into time.
#[derive(Clone, Debug, PartialEq)]
pub struct HardwareProfile {
    pub label: String,
    /// Peak floating-point operations per second.
    pub flops: f64,
    /// Fraction of peak actually achieved by the GEMMs, in (0, 1].
    pub efficiency: f64,
    /// Bytes per second between the accelerator and the state storage.
    pub bw: f64,
    /// Bytes per transferred element.
    pub elem_bytes: usize,
    /// Accelerator memory bandwidth; used for decode step estimates.
    pub mem_bw: f64,
    /// Accelerator to host memory copy bandwidth (snapshot stage).
    pub host_copy_bw: f64,
}

const A100_MEM_BW: f64 = 1.555e12;
const PCIE4_X16: f64 = 32e9;

impl HardwareProfile {
    pub fn new(label: &str, flops: f64, bw: f64) -> Self {
        Self {
            label: label.to_string(),
            flops,
            efficiency: 1.0,
            bw,
            elem_bytes: 2,
            mem_bw: A100_MEM_BW,
            host_copy_bw: PCIE4_X16,
        }
    }

    /// Known accelerators: a100, a30, 4090, l20, h800.
    pub fn preset(name: &str) -> Option<Self> {
        let (flops, bw, mem_bw) = match name.to_ascii_lowercase().as_str() {
            "a100" => (312e12, 32e9, 1.555e12),
            "a30" => (165e12, 32e9, 0.933e12),
            "4090" | "rtx4090" => (330e12, 32e9, 1.008e12),
            "l20" => (120e12, 32e9, 0.864e12),
            "h800" => (990e12, 64e9, 3.35e12),
            _ => return None,
        };
        let mut p = Self::new(name, flops, bw);
        p.mem_bw = mem_bw;
        p.host_copy_bw = bw;
        Some(p)
    }

    pub fn effective_flops(&self) -> f64 {
        self.flops * self.efficiency
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CostError::Invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("flops", self.flops)?;
        positive("bw", self.bw)?;
        positive("mem_bw", self.mem_bw)?;
        positive("host_copy_bw", self.host_copy_bw)?;
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(CostError::Invalid(format!("efficiency must be in (0, 1], got {}", self.efficiency)));
        }
        if self.elem_bytes == 0 {
            return Err(CostError::Invalid("elem_bytes must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse a `key=value` profile. Required: `flops`, `bw_bytes_per_s`.
    /// Optional: `label`, `elem_bytes`, `efficiency`, `mem_bw`, `host_copy_bw`.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let map = kvtext::parse_map(text).map_err(|e| CostError::Parse(e.to_string()))?;
        let num = |key: &str| -> Result<Option<f64>, CostError> {
            map.get(key)
                .map(|v| v.parse::<f64>().map_err(|_| CostError::Parse(format!("{key}: not a number: {v}"))))
                .transpose()
        };
        let flops = num("flops")?.ok_or_else(|| CostError::Parse("missing flops".into()))?;
        let bw = num("bw_bytes_per_s")?
            .or(num("bw")?)
            .ok_or_else(|| CostError::Parse("missing bw_bytes_per_s".into()))?;
        let mut p = Self::new(map.get("label").map_or("custom", String::as_str), flops, bw);
        if let Some(e) = num("elem_bytes")? {
            p.elem_bytes = e as usize;
        }
        if let Some(e) = num("efficiency")? {
            p.efficiency = e;
        }
        if let Some(v) = num("mem_bw")? {
            p.mem_bw = v;
        }
        if let Some(v) = num("host_copy_bw")? {
            p.host_copy_bw = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "label={}\nflops={:e}\nbw_bytes_per_s={:e}\nelem_bytes={}\nefficiency={}\nmem_bw={:e}\nhost_copy_bw={:e}\n",
            self.label, self.flops, self.bw, self.elem_bytes, self.efficiency, self.mem_bw, self.host_copy_bw
        )
    }
}

fn check(n_seq: usize, profile: &HardwareProfile) -> Result<(), CostError> {
    if n_seq == 0 {
        return Err(CostError::Invalid("n_seq must be >= 1".into()));
    }
    profile.validate()
}

/// Seconds to move one layer's hidden states for `n_seq` tokens.
pub fn io_time_hidden(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    check(n_seq, p)?;
    Ok((n_seq * cfg.d_hidden * p.elem_bytes) as f64 / p.bw)
}

/// Seconds to move one layer's K and V for `n_seq` tokens.
pub fn io_time_kv(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    check(n_seq, p)?;
    Ok((n_seq * 2 * cfg.d_hidden * p.elem_bytes) as f64 / p.bw)
}

/// Seconds to project one layer's hidden states into K and V.
pub fn compute_time_hidden(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    check(n_seq, p)?;
    Ok(flops::projection(n_seq as u64, cfg) as f64 / p.effective_flops())
}

/// Per-layer restore time from hidden states, assuming fetch and projection overlap.
pub fn restore_time_hcache(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    Ok(io_time_hidden(n_seq, cfg, p)?.max(compute_time_hidden(n_seq, cfg, p)?))
}

/// Attention part of a full-layer recompute: the four `d×d` projections plus
/// the causal score/value block.
pub fn attention_time(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    check(n_seq, p)?;
    let (n, d) = (n_seq as u64, cfg.d_hidden as u64);
    let ops = 4 * flops::linear(n, d, d) + flops::attention_core(n, n, d);
    Ok(ops as f64 / p.effective_flops())
}

pub fn ffn_time(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    check(n_seq, p)?;
    let (n, d, f) = (n_seq as u64, cfg.d_hidden as u64, cfg.d_ffn as u64);
    Ok((flops::linear(n, d, f) + flops::linear(n, f, d)) as f64 / p.effective_flops())
}

/// Per-layer time to rebuild K and V by recomputing the layer from its tokens.
/// Norms, activation and residual adds are not charged.
pub fn recompute_time(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<f64, CostError> {
    Ok(attention_time(n_seq, cfg, p)? + ffn_time(n_seq, cfg, p)?)
}

/// Per-layer cost terms. [`CostBreakdown::whole_model`] scales them by the layer count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub io_hidden_s: f64,
    pub c_hidden_s: f64,
    pub t_hidden_s: f64,
    pub io_kv_s: f64,
    pub c_attn_s: f64,
    pub c_ffn_s: f64,
    pub t_rec_s: f64,
}

impl CostBreakdown {
    pub fn per_layer(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<Self, CostError> {
        let io_hidden_s = io_time_hidden(n_seq, cfg, p)?;
        let c_hidden_s = compute_time_hidden(n_seq, cfg, p)?;
        let c_attn_s = attention_time(n_seq, cfg, p)?;
        let c_ffn_s = ffn_time(n_seq, cfg, p)?;
        Ok(Self {
            io_hidden_s,
            c_hidden_s,
            t_hidden_s: io_hidden_s.max(c_hidden_s),
            io_kv_s: io_time_kv(n_seq, cfg, p)?,
            c_attn_s,
            c_ffn_s,
            t_rec_s: c_attn_s + c_ffn_s,
        })
    }

    pub fn whole_model(&self, n_layers: usize) -> Self {
        let k = n_layers as f64;
        Self {
            io_hidden_s: self.io_hidden_s * k,
            c_hidden_s: self.c_hidden_s * k,
            t_hidden_s: self.t_hidden_s * k,
            io_kv_s: self.io_kv_s * k,
            c_attn_s: self.c_attn_s * k,
            c_ffn_s: self.c_ffn_s * k,
            t_rec_s: self.t_rec_s * k,
        }
    }
}

/// Persisted bytes for `n_tokens` under a plan, against storing every layer's KV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageBytes {
    pub planned: u64,
    pub kv_offload: u64,
}

impl StorageBytes {
    pub fn offload_ratio(&self) -> f64 {
        self.kv_offload as f64 / self.planned as f64
    }
}

pub fn storage_bytes(plan: &RestorationPlan, cfg: &ModelConfig, n_tokens: usize) -> StorageBytes {
    let d = cfg.d_hidden as u64;
    let per_token_elems = match plan.complement {
        Complement::KvOffload => plan.l_h as u64 * d + plan.l_o as u64 * 2 * d,
        Complement::Recompute | Complement::None => plan.l_h as u64 * d,
    };
    let scale = cfg.elem_bytes as u64 * n_tokens as u64;
    StorageBytes {
        planned: per_token_elems * scale,
        kv_offload: cfg.n_layers as u64 * 2 * d * scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d4096() -> ModelConfig {
        ModelConfig::llama_7b()
    }

    fn a100() -> HardwareProfile {
        HardwareProfile::preset("a100").unwrap()
    }

    #[test]
    fn io_hidden_reference_value() {
        // 1024 · 4096 · 2 B / 32e9 B/s = 8388608 / 32e9 = 262.144 µs
        let t = io_time_hidden(1024, &d4096(), &a100()).unwrap();
        assert!((t - 262.144e-6).abs() < 1e-12);
    }

    #[test]
    fn io_hidden_unit_case_and_zero() {
        let cfg = ModelConfig { d_hidden: 1, n_heads: 1, ..ModelConfig::desk() };
        let p = HardwareProfile { elem_bytes: 1, ..HardwareProfile::new("unit", 1.0, 1.0) };
        assert_eq!(io_time_hidden(1, &cfg, &p).unwrap(), 1.0);
        assert!(io_time_hidden(0, &cfg, &p).is_err());
    }

    #[test]
    fn doubling_bandwidth_halves_io() {
        let mut p = a100();
        let a = io_time_hidden(777, &d4096(), &p).unwrap();
        p.bw *= 2.0;
        assert_eq!(io_time_hidden(777, &d4096(), &p).unwrap() * 2.0, a);
    }

    #[test]
    fn compute_hidden_reference_value() {
        // 4 · 1024 · 4096² / 312e12 = 68719476736 / 312e12 = 220.254 µs
        let t = compute_time_hidden(1024, &d4096(), &a100()).unwrap();
        assert!((t - 68_719_476_736.0 / 312e12).abs() < 1e-15);
        assert!((t - 220.25e-6).abs() < 0.01e-6);
    }

    #[test]
    fn compute_hidden_scaling() {
        let p = a100();
        let c = ModelConfig::desk();
        let c2 = ModelConfig { d_hidden: 512, n_heads: 8, ..c.clone() };
        assert_eq!(compute_time_hidden(200, &c, &p).unwrap() * 2.0, compute_time_hidden(400, &c, &p).unwrap());
        assert_eq!(compute_time_hidden(200, &c, &p).unwrap() * 4.0, compute_time_hidden(200, &c2, &p).unwrap());
    }

    #[test]
    fn hcache_time_is_max_of_terms() {
        let b = CostBreakdown::per_layer(1024, &d4096(), &a100()).unwrap();
        assert_eq!(b.t_hidden_s, b.io_hidden_s);
        let mut fast = a100();
        fast.bw = f64::MAX / 1e30;
        assert_eq!(restore_time_hcache(1024, &d4096(), &fast).unwrap(), compute_time_hidden(1024, &d4096(), &fast).unwrap());
        let w = b.whole_model(32);
        assert_eq!(w.t_hidden_s, b.t_hidden_s * 32.0);
        assert_eq!(b.t_rec_s, b.c_attn_s + b.c_ffn_s);
    }

    #[test]
    fn kv_io_is_twice_hidden() {
        for n in [1, 3, 1024, 16384] {
            let h = io_time_hidden(n, &d4096(), &a100()).unwrap();
            assert_eq!(io_time_kv(n, &d4096(), &a100()).unwrap(), 2.0 * h);
        }
        let t = io_time_kv(1024, &d4096(), &a100()).unwrap();
        assert!((t - 524.288e-6).abs() < 1e-12);
    }

    #[test]
    fn recompute_over_projection_ratio() {
        // (24nd² + n²d) / 4nd² = 6 + n/(4d)
        let cfg = d4096();
        let p = a100();
        for (n, want) in [(16384, 7.0), (1024, 6.0625), (4 * 4096, 7.0)] {
            let r = recompute_time(n, &cfg, &p).unwrap() / compute_time_hidden(n, &cfg, &p).unwrap();
            assert!((r - want).abs() < 1e-12, "n={n}: {r}");
        }
        let r = recompute_time(1, &cfg, &p).unwrap() / compute_time_hidden(1, &cfg, &p).unwrap();
        assert!(r >= 6.0 && r < 6.001);
    }

    #[test]
    fn storage_ratios_for_reference_schedules() {
        let c7 = ModelConfig::llama_7b();
        let s = storage_bytes(&RestorationPlan::new(32, 31, 1, Complement::KvOffload).unwrap(), &c7, 10);
        assert_eq!(s.kv_offload * 33, s.planned * 64);
        let c30 = ModelConfig::opt_30b();
        let s = storage_bytes(&RestorationPlan::new(48, 40, 8, Complement::Recompute).unwrap(), &c30, 10);
        assert_eq!(s.offload_ratio(), 2.4);
        let s = storage_bytes(&RestorationPlan::all_kv(32), &c7, 10);
        assert_eq!(s.offload_ratio(), 1.0);
    }

    #[test]
    fn profile_text_round_trip_and_errors() {
        let p = HardwareProfile { efficiency: 0.5, ..a100() };
        assert_eq!(HardwareProfile::parse(&p.to_text()).unwrap(), p);
        let minimal = HardwareProfile::parse("label=x\nflops=1e12\nbw_bytes_per_s=2e9\nelem_bytes=4\n").unwrap();
        assert_eq!((minimal.flops, minimal.bw, minimal.elem_bytes), (1e12, 2e9, 4));
        assert!(HardwareProfile::parse("flops=1e12\n").is_err());
        assert!(HardwareProfile::parse("flops=-1\nbw=1\n").is_err());
        assert!(HardwareProfile::parse("flops=abc\nbw=1\n").is_err());
    }
}
