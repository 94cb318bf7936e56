//! Offline probe of per-layer stage times, fed to the partition scheduler.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use super::ServeError;
use crate::cost::HardwareProfile;
use crate::model::{KvCache, Model};
use crate::restore::SimParams;
use crate::schedule::{ProfiledTimings, RestorationPlan};
use crate::storage::{config_hash, SessionSpec, SessionStore, StateKind};

/// How probe durations are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeMode {
    /// Reads cost the pool throttle (or the profile's link, if slower);
    /// compute costs counted FLOPs over the profile's effective rate.
    Simulated(HardwareProfile),
    /// Wall clock: reads alternate hidden/KV and take the median of `reps`,
    /// compute takes the best of `reps`.
    Wall { reps: usize },
}

/// Stage times the cost oracle predicts for `n` tokens, one layer.
pub fn oracle_timings(sim: &SimParams, n: usize) -> ProfiledTimings {
    let c = sim.layer_costs(0, n);
    ProfiledTimings {
        io_h: c.fetch_hidden,
        io_kv: c.fetch_kv,
        c_h: c.project,
        c_token: c.recompute,
        n_layers: sim.config.n_layers,
    }
}

static PROBE_SEQ: AtomicU64 = AtomicU64::new(0);

fn best_of<T>(reps: usize, mut f: impl FnMut() -> Result<T, ServeError>) -> Result<(T, f64), ServeError> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let v = f()?;
        best = best.min(t0.elapsed().as_secs_f64());
        last = Some(v);
    }
    Ok((last.expect("at least one rep"), best))
}

/// Store a probe context of `n_tokens` (capped at the model's limit) both as
/// hidden states and as KV, then time one layer's read, projection and full
/// recompute. Probe sessions are removed afterwards.
pub fn profile_hardware(
    model: &Model,
    store: &SessionStore,
    n_tokens: usize,
    mode: &ProbeMode,
) -> Result<ProfiledTimings, ServeError> {
    let cfg = model.config().clone();
    let n = n_tokens.clamp(1, cfg.max_seq);
    let tokens: Vec<u32> = (0..n).map(|i| ((i * 7919 + 13) % cfg.vocab_size) as u32).collect();
    let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
    let fwd = model.extend(&mut kv, &tokens)?;

    let tag = format!("probe-{}-{}", std::process::id(), PROBE_SEQ.fetch_add(1, Ordering::Relaxed));
    let ids = [format!("{tag}-h"), format!("{tag}-kv")];
    let plans = [RestorationPlan::all_hidden(cfg.n_layers), RestorationPlan::all_kv(cfg.n_layers)];
    for (id, plan) in ids.iter().zip(plans) {
        store.create_session(SessionSpec {
            session_id: id.clone(),
            config_hash: config_hash(&cfg, 0),
            plan,
            d_hidden: cfg.d_hidden,
            elem_bytes: cfg.elem_bytes,
        })?;
        store.append_tokens(id, 0, &tokens)?;
        store.snapshot_forward(id, &fwd.hidden, &kv, true)?;
        store.drain();
        store.finalize_wait(id)?;
    }

    let result = measure(model, store, &ids, &tokens, mode);
    let pool = store.pool();
    for id in &ids {
        for dev in 0..pool.len() {
            let _ = std::fs::remove_dir_all(pool.session_dir(dev, id));
        }
        let _ = std::fs::remove_file(pool.manifest_path(id));
    }
    result
}

fn measure(
    model: &Model,
    store: &SessionStore,
    ids: &[String; 2],
    tokens: &[u32],
    mode: &ProbeMode,
) -> Result<ProfiledTimings, ServeError> {
    let cfg = model.config();
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let hidden = store.read_layer(&ids[0], 0, StateKind::Hidden)?.data;
    let project = || -> Result<(), ServeError> {
        model.project_hidden_to_kv(0, &hidden, &positions)?;
        Ok(())
    };
    let recompute = || -> Result<(), ServeError> {
        let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
        let x = model.embed(tokens)?;
        model.forward_layers(x, 0, 0..1, &mut kv)?;
        Ok(())
    };
    match mode {
        ProbeMode::Simulated(p) => {
            let io = |id: &str, kind: StateKind| -> Result<f64, ServeError> {
                let read = store.read_layer(id, 0, kind)?;
                let bytes = (read.data.data().len() * cfg.elem_bytes) as f64;
                Ok(read.sim_seconds.max(bytes / p.bw))
            };
            let flops = |f: &dyn Fn() -> Result<(), ServeError>| -> Result<f64, ServeError> {
                model.flops().reset();
                f()?;
                Ok(model.flops().reset() as f64 / p.effective_flops())
            };
            Ok(ProfiledTimings {
                io_h: io(&ids[0], StateKind::Hidden)?,
                io_kv: io(&ids[1], StateKind::Kv)?,
                c_h: flops(&project)?,
                c_token: flops(&recompute)?,
                n_layers: cfg.n_layers,
            })
        }
        ProbeMode::Wall { reps } => {
            // interleaved so both kinds see the same cache and load conditions
            let (mut hs, mut ks) = (Vec::new(), Vec::new());
            for _ in 0..(*reps).max(1) {
                for (id, kind, out) in [(&ids[0], StateKind::Hidden, &mut hs), (&ids[1], StateKind::Kv, &mut ks)] {
                    let t0 = Instant::now();
                    store.read_layer(id, 0, kind)?;
                    out.push(t0.elapsed().as_secs_f64());
                }
            }
            let median = |v: &mut Vec<f64>| {
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            Ok(ProfiledTimings {
                io_h: median(&mut hs),
                io_kv: median(&mut ks),
                c_h: best_of(*reps, project)?.1,
                c_token: best_of(*reps, recompute)?.1,
                n_layers: cfg.n_layers,
            })
        }
    }
}
