//! Side-by-side comparisons on the simulated clock.

use super::profile::oracle_timings;
use super::timing::{simulate_decode, SaveMode, ServeTiming};
use super::ServeError;
use crate::restore::{bubble_fraction, simulate, simulate_token_wise, SimParams};
use crate::schedule::{plan, RestorationPlan};

#[derive(Clone, Debug, PartialEq)]
pub struct RestoreRow {
    pub label: String,
    pub total_s: f64,
    pub bubble: f64,
}

fn row(label: String, t: &crate::restore::Timeline) -> RestoreRow {
    RestoreRow { label, total_s: t.total_s(), bubble: bubble_fraction(t) }
}

/// KV offload, every layer from hidden states, and the scheduled plan.
pub fn bubble(sim: &SimParams, n_tokens: usize) -> Result<Vec<RestoreRow>, ServeError> {
    let l = sim.config.n_layers;
    let scheduled = plan(&oracle_timings(sim, n_tokens))?;
    Ok(vec![
        row("kv_offload".into(), &simulate(&RestorationPlan::all_kv(l), n_tokens, sim, None)),
        row("hidden_only".into(), &simulate(&RestorationPlan::all_hidden(l), n_tokens, sim, None)),
        row(format!("scheduled {scheduled}"), &simulate(&scheduled, n_tokens, sim, None)),
    ])
}

/// Layer-wise scheduled plan against per-layer token splits.
pub fn token_wise(sim: &SimParams, n_tokens: usize, splits: &[usize]) -> Result<Vec<RestoreRow>, ServeError> {
    let scheduled = plan(&oracle_timings(sim, n_tokens))?;
    let mut rows = vec![row(format!("layer-wise {scheduled}"), &simulate(&scheduled, n_tokens, sim, None))];
    for &s in splits {
        if s > n_tokens {
            return Err(ServeError::Config(format!("split {s} exceeds {n_tokens} tokens")));
        }
        rows.push(row(format!("token-wise {s}/{}", n_tokens - s), &simulate_token_wise(n_tokens, s, sim)));
    }
    Ok(rows)
}

/// Split that balances IO and compute per layer, from the oracle's rates.
pub fn balanced_split(sim: &SimParams, n_tokens: usize) -> usize {
    let cost = |s: usize| {
        let io = sim.fetch_s(0, crate::storage::StateKind::Hidden, 0..s);
        let c = sim.project_s(s) + sim.layer_s(n_tokens - s, n_tokens);
        (io - c).abs()
    };
    (0..=n_tokens).min_by(|&a, &b| cost(a).total_cmp(&cost(b))).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaveRow {
    pub batch: usize,
    pub ideal_tbt_s: f64,
    pub direct_tbt_s: f64,
    pub two_stage_tbt_s: f64,
    pub two_stage_stalls: u64,
}

/// Decode with every layer's hidden state saved, synchronously per layer
/// against through a host buffer.
pub fn saving(t: &ServeTiming, ctx: usize, batches: &[usize], steps: usize) -> Vec<SaveRow> {
    let cfg = &t.sim.config;
    let rows = vec![cfg.d_hidden * t.sim.profile.elem_bytes; cfg.n_layers];
    let with = |m: SaveMode| ServeTiming { save_mode: m, ..t.clone() };
    batches
        .iter()
        .map(|&b| {
            let (ideal, _) = simulate_decode(t, b, ctx, steps, &[]);
            let (direct, _) = simulate_decode(&with(SaveMode::DirectIo), b, ctx, steps, &rows);
            let (two, stalls) = simulate_decode(&with(SaveMode::TwoStage), b, ctx, steps, &rows);
            SaveRow { batch: b, ideal_tbt_s: ideal, direct_tbt_s: direct, two_stage_tbt_s: two, two_stage_stalls: stalls }
        })
        .collect()
}
