//! Layer-wise partition of a restore between hidden-state projection and a
//! complementary method, chosen so the IO and compute lanes finish together.

use std::fmt;
use std::str::FromStr;

use crate::cost::{self, CostError, HardwareProfile};
use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid timings: {0}")]
    InvalidTimings(String),
    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),
    #[error("cannot parse plan {0:?}")]
    Parse(String),
}

/// How the layers not restored from hidden states are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Complement {
    /// The last `l_o` layers fetch their K and V directly.
    KvOffload,
    /// The first `l_o` layers are recomputed from the tokens.
    Recompute,
    None,
}

impl Complement {
    pub fn as_str(self) -> &'static str {
        match self {
            Complement::KvOffload => "kv_offload",
            Complement::Recompute => "recompute",
            Complement::None => "none",
        }
    }
}

impl FromStr for Complement {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kv_offload" | "kv" => Ok(Complement::KvOffload),
            "recompute" | "re" => Ok(Complement::Recompute),
            "none" => Ok(Complement::None),
            _ => Err(ScheduleError::Parse(s.to_string())),
        }
    }
}

/// How a single layer's KV gets rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerMethod {
    Hidden,
    Kv,
    Recompute,
}

/// Per-layer stage times. One vector applies to every layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfiledTimings {
    pub io_h: f64,
    pub io_kv: f64,
    pub c_h: f64,
    pub c_token: f64,
    pub n_layers: usize,
}

impl ProfiledTimings {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        for (name, v) in [("io_h", self.io_h), ("io_kv", self.io_kv), ("c_h", self.c_h), ("c_token", self.c_token)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScheduleError::InvalidTimings(format!("{name} = {v}")));
            }
        }
        if self.n_layers == 0 {
            return Err(ScheduleError::InvalidTimings("n_layers = 0".into()));
        }
        Ok(())
    }

    /// Timings predicted by the analytical cost model for `n_seq` history tokens.
    pub fn from_cost_model(n_seq: usize, cfg: &ModelConfig, p: &HardwareProfile) -> Result<Self, CostError> {
        Ok(Self {
            io_h: cost::io_time_hidden(n_seq, cfg, p)?,
            io_kv: cost::io_time_kv(n_seq, cfg, p)?,
            c_h: cost::compute_time_hidden(n_seq, cfg, p)?,
            c_token: cost::recompute_time(n_seq, cfg, p)?,
            n_layers: cfg.n_layers,
        })
    }

    /// Largest single-stage cost of any one layer.
    pub fn max_stage(&self) -> f64 {
        self.io_h.max(self.io_kv).max(self.c_h).max(self.c_token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RestorationPlan {
    pub l_h: usize,
    pub l_o: usize,
    pub complement: Complement,
}

impl RestorationPlan {
    pub fn new(n_layers: usize, l_h: usize, l_o: usize, complement: Complement) -> Result<Self, ScheduleError> {
        if l_h + l_o != n_layers {
            return Err(ScheduleError::InconsistentPlan(format!("{l_h} + {l_o} != {n_layers} layers")));
        }
        if (complement == Complement::None) != (l_o == 0) {
            return Err(ScheduleError::InconsistentPlan(format!(
                "complement {} with {l_o} complement layers",
                complement.as_str()
            )));
        }
        Ok(Self { l_h, l_o, complement })
    }

    pub fn all_hidden(n_layers: usize) -> Self {
        Self { l_h: n_layers, l_o: 0, complement: Complement::None }
    }

    pub fn all_kv(n_layers: usize) -> Self {
        Self { l_h: 0, l_o: n_layers, complement: Complement::KvOffload }
    }

    pub fn all_recompute(n_layers: usize) -> Self {
        Self { l_h: 0, l_o: n_layers, complement: Complement::Recompute }
    }

    pub fn n_layers(&self) -> usize {
        self.l_h + self.l_o
    }

    pub fn method(&self, layer: usize) -> LayerMethod {
        match self.complement {
            Complement::Recompute if layer < self.l_o => LayerMethod::Recompute,
            Complement::KvOffload if layer >= self.l_h => LayerMethod::Kv,
            _ => LayerMethod::Hidden,
        }
    }

    /// Method for every layer in order: a recompute prefix or a KV suffix.
    pub fn layer_assignment(&self) -> Vec<LayerMethod> {
        (0..self.n_layers()).map(|l| self.method(l)).collect()
    }
}

/// Compact form such as `31H+1KV`, `40H+8RE`, `4H`, `0H+4KV`.
impl fmt::Display for RestorationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.complement {
            Complement::None => write!(f, "{}H", self.l_h),
            Complement::KvOffload => write!(f, "{}H+{}KV", self.l_h, self.l_o),
            Complement::Recompute => write!(f, "{}H+{}RE", self.l_h, self.l_o),
        }
    }
}

impl FromStr for RestorationPlan {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScheduleError::Parse(s.to_string());
        let s = s.trim();
        let (h, rest) = match s.split_once('+') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let l_h: usize = h.strip_suffix('H').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let (l_o, complement) = match rest {
            None => (0, Complement::None),
            Some(r) => {
                if let Some(n) = r.strip_suffix("KV") {
                    (n.parse().map_err(|_| bad())?, Complement::KvOffload)
                } else if let Some(n) = r.strip_suffix("RE") {
                    (n.parse().map_err(|_| bad())?, Complement::Recompute)
                } else {
                    return Err(bad());
                }
            }
        };
        RestorationPlan::new(l_h + l_o, l_h, l_o, complement)
    }
}

/// Round up, treating values within a relative 1e-9 of an integer as that integer
/// so exact balance points are not pushed up by float noise.
fn ceil_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Closed-form partition. When projection is slower than the hidden-state fetch
/// the spare IO time goes to fetching KV for a suffix of layers; otherwise the
/// spare compute time goes to recomputing a prefix from tokens.
pub fn plan(t: &ProfiledTimings) -> Result<RestorationPlan, ScheduleError> {
    t.validate()?;
    let n = t.n_layers as f64;
    let (x, complement) = if t.c_h > t.io_h {
        (n * t.io_kv / (t.io_kv + t.c_h - t.io_h), Complement::KvOffload)
    } else {
        (n * t.c_token / (t.c_token + t.io_h - t.c_h), Complement::Recompute)
    };
    let l_h = (ceil_snapped(x).max(0.0) as usize).min(t.n_layers);
    if l_h == t.n_layers {
        return Ok(RestorationPlan::all_hidden(t.n_layers));
    }
    RestorationPlan::new(t.n_layers, l_h, t.n_layers - l_h, complement)
}

/// Finish time of the two-lane pipeline, ignoring fill and drain.
pub fn makespan(p: &RestorationPlan, t: &ProfiledTimings) -> Result<f64, ScheduleError> {
    t.validate()?;
    if p.n_layers() != t.n_layers {
        return Err(ScheduleError::InconsistentPlan(format!(
            "plan covers {} layers, timings {}",
            p.n_layers(),
            t.n_layers
        )));
    }
    let (l_h, l_o) = (p.l_h as f64, p.l_o as f64);
    Ok(match p.complement {
        Complement::None => (t.c_h * l_h).max(t.io_h * l_h),
        Complement::KvOffload => (t.c_h * l_h).max(t.io_h * l_h + t.io_kv * l_o),
        Complement::Recompute => (t.io_h * l_h).max(t.c_token * l_o + t.c_h * l_h),
    })
}

/// Exhaustive search over every split and both complements. Ties go to the
/// plan with more hidden-state layers.
pub fn brute_force_plan(t: &ProfiledTimings) -> Result<RestorationPlan, ScheduleError> {
    t.validate()?;
    let n = t.n_layers;
    let mut best = RestorationPlan::all_hidden(n);
    let mut best_t = makespan(&best, t)?;
    for l_h in (0..n).rev() {
        for c in [Complement::KvOffload, Complement::Recompute] {
            let p = RestorationPlan::new(n, l_h, n - l_h, c)?;
            let m = makespan(&p, t)?;
            if m < best_t {
                best = p;
                best_t = m;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, io_h: f64, io_kv: f64, c_h: f64, c_token: f64) -> ProfiledTimings {
        ProfiledTimings { io_h, io_kv, c_h, c_token, n_layers: n }
    }

    #[test]
    fn thirty_two_layer_kv_suffix() {
        // 32 · 0.52 / (0.52 + 0.28 − 0.26) = 16.64 / 0.54 = 30.81 → 31
        let tm = t(32, 0.26, 0.52, 0.28, 2.0);
        let p = plan(&tm).unwrap();
        assert_eq!(p.to_string(), "31H+1KV");
        // max(0.28·31, 0.26·31 + 0.52) = max(8.68, 8.58)
        assert!((makespan(&p, &tm).unwrap() - 8.68).abs() < 1e-12);
    }

    #[test]
    fn balanced_lanes_need_no_complement() {
        let p = plan(&t(12, 0.5, 1.0, 0.5, 3.0)).unwrap();
        assert_eq!(p, RestorationPlan::all_hidden(12));
    }

    #[test]
    fn forty_eight_layer_recompute_prefix() {
        // 48 · 6.0357 / (6.0357 + 2.3 − 1.0) = 289.71 / 7.3357 = 39.49 → 40
        let p = plan(&t(48, 2.3, 4.6, 1.0, 6.0357)).unwrap();
        assert_eq!(p.to_string(), "40H+8RE");
        let a = p.layer_assignment();
        assert!(a[..8].iter().all(|&m| m == LayerMethod::Recompute));
        assert!(a[8..].iter().all(|&m| m == LayerMethod::Hidden));
    }

    #[test]
    fn makespan_degenerate_cases() {
        let tm = t(10, 0.3, 0.6, 0.4, 2.0);
        assert!((makespan(&RestorationPlan::all_hidden(10), &tm).unwrap() - 4.0).abs() < 1e-12);
        assert!((makespan(&RestorationPlan::all_kv(10), &tm).unwrap() - 6.0).abs() < 1e-12);
        assert!(makespan(&RestorationPlan::all_kv(9), &tm).is_err());
    }

    #[test]
    fn single_layer_picks_cheapest_method() {
        let tm = t(1, 1.0, 1.5, 3.0, 10.0);
        assert_eq!(brute_force_plan(&tm).unwrap(), RestorationPlan::all_kv(1));
        let tm = t(1, 1.0, 2.0, 0.5, 6.0);
        assert_eq!(brute_force_plan(&tm).unwrap(), RestorationPlan::all_hidden(1));
    }

    #[test]
    fn rejects_bad_timings_and_plans() {
        assert!(plan(&t(4, 0.0, 1.0, 1.0, 1.0)).is_err());
        assert!(plan(&t(0, 1.0, 1.0, 1.0, 1.0)).is_err());
        assert!(plan(&t(4, f64::NAN, 1.0, 1.0, 1.0)).is_err());
        assert!(RestorationPlan::new(4, 3, 0, Complement::None).is_err());
        assert!(RestorationPlan::new(4, 3, 1, Complement::None).is_err());
    }

    #[test]
    fn display_parse_round_trip() {
        for s in ["31H+1KV", "40H+8RE", "4H", "0H+4KV", "0H+4RE"] {
            assert_eq!(s.parse::<RestorationPlan>().unwrap().to_string(), s);
        }
        assert!("3X".parse::<RestorationPlan>().is_err());
        assert!("3H+1XX".parse::<RestorationPlan>().is_err());
    }
}
