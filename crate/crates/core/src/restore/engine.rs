use std::time::Instant;

use crossbeam_channel::{bounded, unbounded};

use super::sim::{schedule, simulate_token_wise, LayerCosts, SimParams};
use super::timeline::{EventKind, Timeline};
use super::RestoreError;
use crate::model::{KvCache, Matrix, Model};
use crate::schedule::{LayerMethod, RestorationPlan};
use crate::storage::{split_kv, SessionStore, StateKind};

/// Clock used for the timeline.
#[derive(Clone, Debug, PartialEq)]
pub enum Throttle {
    /// Real IO and compute threads, timed with the wall clock.
    Wall,
    /// Real work done serially; the timeline comes from the cost oracle.
    Simulated(SimParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestoreOptions {
    pub throttle: Throttle,
    /// Hidden layers fetched ahead of their projection; `None` is unbounded.
    pub prefetch: Option<usize>,
}

impl RestoreOptions {
    pub fn simulated(sim: SimParams) -> Self {
        Self { throttle: Throttle::Simulated(sim), prefetch: None }
    }

    pub fn wall() -> Self {
        Self { throttle: Throttle::Wall, prefetch: None }
    }
}

fn check_session(
    store: &SessionStore,
    model: &Model,
    session: &str,
    plan: &RestorationPlan,
) -> Result<(usize, Vec<u32>), RestoreError> {
    let m = store.open_session(session)?;
    if m.plan != *plan {
        return Err(RestoreError::PlanMismatch { stored: m.plan.to_string(), requested: plan.to_string() });
    }
    let cfg = model.config();
    if m.d_hidden != cfg.d_hidden || m.n_layers() != cfg.n_layers {
        return Err(RestoreError::ConfigMismatch(format!(
            "session holds {} layers of width {}, model has {} of {}",
            m.n_layers(),
            m.d_hidden,
            cfg.n_layers,
            cfg.d_hidden
        )));
    }
    let tokens = if plan.layer_assignment().contains(&LayerMethod::Recompute) {
        store.tokens(session)?
    } else {
        Vec::new()
    };
    Ok((m.n_tokens, tokens))
}

/// Rebuild the session's KV cache by following `plan`.
pub fn restore(
    store: &SessionStore,
    model: &Model,
    session: &str,
    plan: &RestorationPlan,
    opts: &RestoreOptions,
) -> Result<(KvCache, Timeline), RestoreError> {
    let (n, tokens) = check_session(store, model, session, plan)?;
    match &opts.throttle {
        Throttle::Simulated(sim) => restore_simulated(store, model, session, plan, n, &tokens, sim, opts.prefetch),
        Throttle::Wall => restore_wall(store, model, session, plan, n, &tokens, opts.prefetch),
    }
}

#[allow(clippy::too_many_arguments)]
fn restore_simulated(
    store: &SessionStore,
    model: &Model,
    session: &str,
    plan: &RestorationPlan,
    n: usize,
    tokens: &[u32],
    sim: &SimParams,
    prefetch: Option<usize>,
) -> Result<(KvCache, Timeline), RestoreError> {
    let cfg = model.config();
    let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
    if n == 0 {
        return Ok((kv, Timeline::default()));
    }
    let methods = plan.layer_assignment();
    let positions: Vec<usize> = (0..n).collect();
    let l_re = methods.iter().filter(|&&m| m == LayerMethod::Recompute).count();
    if l_re > 0 {
        let x = model.embed(tokens)?;
        model.forward_layers(x, 0, 0..l_re, &mut kv)?;
    }
    let mut costs = Vec::with_capacity(methods.len());
    for (l, &m) in methods.iter().enumerate() {
        costs.push(sim.layer_costs(l, n));
        match m {
            LayerMethod::Hidden => {
                let read = store.read_layer(session, l, StateKind::Hidden)?;
                let (k, v) = model.project_hidden_to_kv(l, &read.data, &positions)?;
                kv.set_layer(l, k, v)?;
            }
            LayerMethod::Kv => {
                let read = store.read_layer(session, l, StateKind::Kv)?;
                let (k, v) = split_kv(&read.data);
                kv.set_layer(l, k, v)?;
            }
            LayerMethod::Recompute => {}
        }
    }
    Ok((kv, schedule(plan, &costs, prefetch)))
}

enum Fetched {
    Hidden(usize, Matrix),
    Kv(usize, Matrix),
}

fn restore_wall(
    store: &SessionStore,
    model: &Model,
    session: &str,
    plan: &RestorationPlan,
    n: usize,
    tokens: &[u32],
    prefetch: Option<usize>,
) -> Result<(KvCache, Timeline), RestoreError> {
    let cfg = model.config();
    let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
    let mut timeline = Timeline::default();
    if n == 0 {
        return Ok((kv, timeline));
    }
    let methods = plan.layer_assignment();
    let positions: Vec<usize> = (0..n).collect();
    let (tx, rx) = match prefetch {
        Some(d) => bounded(d.max(1)),
        None => unbounded(),
    };
    let t0 = Instant::now();
    let secs = |t: Instant| t.duration_since(t0).as_secs_f64();
    let throttle = store.pool().throttle();

    std::thread::scope(|scope| -> Result<(), RestoreError> {
        let io = scope.spawn(|| -> Result<Vec<(usize, EventKind, f64, f64)>, RestoreError> {
            let tx = tx;
            let mut events = Vec::new();
            let order = methods
                .iter()
                .enumerate()
                .filter(|(_, m)| **m == LayerMethod::Hidden)
                .chain(methods.iter().enumerate().filter(|(_, m)| **m == LayerMethod::Kv));
            for (l, &m) in order {
                let start = Instant::now();
                let (kind, msg) = if m == LayerMethod::Hidden {
                    let r = store.read_layer(session, l, StateKind::Hidden)?;
                    pace(start, throttle.map(|_| r.sim_seconds));
                    (EventKind::FetchHidden, Fetched::Hidden(l, r.data))
                } else {
                    let r = store.read_layer(session, l, StateKind::Kv)?;
                    pace(start, throttle.map(|_| r.sim_seconds));
                    (EventKind::FetchKv, Fetched::Kv(l, r.data))
                };
                events.push((l, kind, secs(start), secs(Instant::now())));
                if tx.send(msg).is_err() {
                    break;
                }
            }
            Ok(events)
        });

        let l_re = methods.iter().filter(|&&m| m == LayerMethod::Recompute).count();
        let compute = (|| -> Result<(), RestoreError> {
            if l_re > 0 {
                let mut x = model.embed(tokens)?;
                for l in 0..l_re {
                    let s = Instant::now();
                    x = model.forward_layers(x, 0, l..l + 1, &mut kv)?.0;
                    timeline.push(l, EventKind::Recompute, secs(s), secs(Instant::now()));
                }
            }
            for msg in rx.iter() {
                match msg {
                    Fetched::Hidden(l, h) => {
                        let s = Instant::now();
                        let (k, v) = model.project_hidden_to_kv(l, &h, &positions)?;
                        kv.set_layer(l, k, v)?;
                        timeline.push(l, EventKind::Project, secs(s), secs(Instant::now()));
                    }
                    Fetched::Kv(l, rows) => {
                        let (k, v) = split_kv(&rows);
                        kv.set_layer(l, k, v)?;
                    }
                }
            }
            Ok(())
        })();
        drop(rx);
        let io_events = io.join().expect("io lane panicked")?;
        compute?;
        for (l, kind, s, e) in io_events {
            timeline.push(l, kind, s, e);
        }
        Ok(())
    })?;
    timeline.events.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok((kv, timeline))
}

/// Sleep out the rest of a throttled read.
fn pace(start: Instant, target: Option<f64>) {
    if let Some(t) = target {
        let spent = start.elapsed().as_secs_f64();
        if t > spent {
            std::thread::sleep(std::time::Duration::from_secs_f64(t - spent));
        }
    }
}

/// Token-wise split: per layer, the first `split` tokens are projected from
/// stored hidden states and the remaining tokens are recomputed through the
/// layer. Needs a session stored with an all-hidden plan.
pub fn restore_token_wise(
    store: &SessionStore,
    model: &Model,
    session: &str,
    split: usize,
    sim: &SimParams,
) -> Result<(KvCache, Timeline), RestoreError> {
    let cfg = model.config();
    let plan = RestorationPlan::all_hidden(cfg.n_layers);
    check_session(store, model, session, &plan)?;
    let n = store.manifest(session)?.n_tokens;
    if split > n {
        return Err(RestoreError::BadSplit { split, n_tokens: n });
    }
    let tokens = store.tokens(session)?;
    let mut kv = KvCache::new(cfg.n_layers, cfg.d_hidden);
    let positions: Vec<usize> = (0..split).collect();
    let mut tail = if split < n { Some(model.embed(&tokens[split..])?) } else { None };
    for l in 0..cfg.n_layers {
        if split > 0 {
            let read = store.read_layer_tokens(session, l, StateKind::Hidden, 0..split)?;
            let (k, v) = model.project_hidden_to_kv(l, &read.data, &positions)?;
            kv.append(l, 0, &k, &v)?;
        }
        if let Some(x) = tail.take() {
            tail = Some(model.forward_layers(x, split, l..l + 1, &mut kv)?.0);
        }
    }
    Ok((kv, simulate_token_wise(n, split, sim)))
}

/// Stage times a session of `n_tokens` would see, for inspection.
pub fn stage_costs(sim: &SimParams, n_tokens: usize) -> Vec<LayerCosts> {
    (0..sim.config.n_layers).map(|l| sim.layer_costs(l, n_tokens)).collect()
}
