//! Acceptance gate. Each criterion prints one PASS/FAIL line; the test fails
//! if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsr_core::cost::{storage_bytes, HardwareProfile};
use hsr_core::model::{flops, KvCache, Matrix, Model, ModelConfig, TokenSeq};
use hsr_core::restore::{restore, simulate, RestoreOptions, SimParams};
use hsr_core::schedule::{brute_force_plan, makespan, plan, Complement, ProfiledTimings, RestorationPlan};
use hsr_core::serving::{
    ablation, gen_trace, oracle_timings, run, DeviceWrite, RunConfig, SaveMode, ServeTiming, Strategy, TraceParams,
};
use hsr_core::storage::{config_hash, DevicePool, SessionSpec, SessionStore, StateKind, CHUNK_TOKENS};

type Outcome = Result<String, String>;

fn check(cond: bool, what: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what)
    }
}

fn a100() -> HardwareProfile {
    let mut p = HardwareProfile::preset("a100").unwrap();
    p.efficiency = 0.5;
    p
}

fn save_session(store: &SessionStore, model: &Model, id: &str, plan: RestorationPlan, tokens: &[u32]) -> KvCache {
    let cfg = model.config();
    let (kv, fwd) = model.prefill(&TokenSeq::new(tokens.to_vec(), cfg.vocab_size).unwrap()).unwrap();
    store
        .create_session(SessionSpec {
            session_id: id.into(),
            config_hash: config_hash(cfg, 0),
            plan,
            d_hidden: cfg.d_hidden,
            elem_bytes: cfg.elem_bytes,
        })
        .unwrap();
    store.append_tokens(id, 0, tokens).unwrap();
    store.snapshot_forward(id, &fwd.hidden, &kv, true).unwrap();
    store.drain();
    store.finalize(id).unwrap();
    kv
}

fn c1_lossless() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let model = Model::init(&cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::new(DevicePool::under(dir.path(), 2, None).unwrap(), 64 << 20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<u32> = (0..128).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let plans = [
        RestorationPlan::all_hidden(4),
        RestorationPlan::new(4, 3, 1, Complement::KvOffload).unwrap(),
        RestorationPlan::new(4, 3, 1, Complement::Recompute).unwrap(),
    ];
    let mut worst = 0f32;
    for (i, p) in plans.iter().enumerate() {
        let id = format!("c1-{i}");
        let oracle = save_session(&store, &model, &id, *p, &tokens);
        for opts in [RestoreOptions::wall(), RestoreOptions::simulated(SimParams::new(cfg.clone(), a100(), 2, 6.9e9))] {
            let (kv, _) = restore(&store, &model, &id, p, &opts).map_err(|e| e.to_string())?;
            let d = kv.max_abs_diff(&oracle).ok_or("cache shapes differ")?;
            check(d <= 1e-5, format!("plan {p}: max abs diff {d}"))?;
            worst = worst.max(d);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("max abs diff {worst:e} over 3 plans, {secs:.2} s"))
}

fn dir_bytes(path: &std::path::Path) -> u64 {
    let mut total = 0;
    for e in walk(path) {
        if e.extension().is_some_and(|x| x == "chk") {
            total += std::fs::metadata(&e).unwrap().len();
        }
    }
    total
}

fn walk(path: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(path).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn c2_io_ratio() -> Outcome {
    let mut configs = vec![ModelConfig::desk(), ModelConfig::llama_7b(), ModelConfig::llama_13b(), ModelConfig::opt_30b()];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let heads = rng.gen_range(1..=16);
        configs.push(ModelConfig {
            n_layers: rng.gen_range(1..=80),
            d_hidden: heads * 2 * rng.gen_range(1..=64),
            n_heads: heads,
            elem_bytes: if rng.gen() { 2 } else { 4 },
            ..ModelConfig::desk()
        });
    }
    for cfg in &configs {
        for n in [1usize, 63, 64, 1000, 16384] {
            check(2 * cfg.hidden_bytes(n) == cfg.kv_bytes(n), format!("{cfg:?} n={n}"))?;
            let sb = storage_bytes(&RestorationPlan::all_hidden(cfg.n_layers), cfg, n);
            check(2 * sb.planned == sb.kv_offload, format!("plan bytes {cfg:?} n={n}"))?;
        }
    }
    // bytes actually written to the devices
    let cfg = ModelConfig { n_layers: 3, d_hidden: 64, n_heads: 4, d_ffn: 256, ..ModelConfig::desk() };
    let model = Model::init(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tokens: Vec<u32> = (0..300).map(|i| i % 97).collect();
    for (sub, p) in [("h", RestorationPlan::all_hidden(3)), ("kv", RestorationPlan::all_kv(3))] {
        let store = SessionStore::new(DevicePool::under(&dir.path().join(sub), 3, None).unwrap(), 64 << 20);
        save_session(&store, &model, "s", p, &tokens);
    }
    let (h, kv) = (dir_bytes(&dir.path().join("h")), dir_bytes(&dir.path().join("kv")));
    check(2 * h == kv, format!("on disk: hidden {h} B, kv {kv} B"))?;
    Ok(format!("{} configs exact; on disk {h} B vs {kv} B", configs.len()))
}

fn c3_compute_ratio() -> Outcome {
    let mut lines = Vec::new();
    for d in [256usize, 4096] {
        for n in [64u64, 1024, 16384] {
            let cfg = ModelConfig { d_hidden: d, n_heads: 8, d_ffn: 4 * d, ..ModelConfig::desk() };
            let layer = flops::layer(n, n, &cfg);
            let proj = flops::projection(n, &cfg);
            // layer / proj == 6 + n / (4d), cross-multiplied to stay exact
            let d = d as u64;
            check(layer * 4 * d == proj * (24 * d + n), format!("d={d} n={n}: {layer} / {proj}"))?;
            check(layer >= 6 * proj, format!("d={d} n={n} below 6"))?;
            lines.push(format!("{:.4}", layer as f64 / proj as f64));
        }
    }
    // the counter charges the same amounts when the kernels actually run
    let cfg = ModelConfig { n_layers: 1, ..ModelConfig::desk() };
    let model = Model::init(&cfg, 3).unwrap();
    for n in [64usize, 1024] {
        let tokens: Vec<u32> = (0..n as u32).map(|i| i % 1000).collect();
        let x = model.embed(&tokens).unwrap();
        model.flops().reset();
        let mut kv = KvCache::new(1, cfg.d_hidden);
        let (_, hidden) = model.forward_layers(x, 0, 0..1, &mut kv).unwrap();
        let layer = model.flops().reset();
        let positions: Vec<usize> = (0..n).collect();
        model.project_hidden_to_kv(0, &hidden[0].data, &positions).unwrap();
        let proj = model.flops().reset();
        check(layer * 4 * 256 == proj * (24 * 256 + n as u64), format!("measured d=256 n={n}: {layer} / {proj}"))?;
    }
    Ok(format!("ratios {}", lines.join(" ")))
}

fn random_timings(rng: &mut ChaCha8Rng) -> ProfiledTimings {
    let io_h = rng.gen_range(1e-3..10.0);
    let c_h = rng.gen_range(1e-3..10.0);
    ProfiledTimings {
        io_h,
        io_kv: io_h * rng.gen_range(1.0..4.0),
        c_h,
        c_token: c_h * rng.gen_range(1.0..20.0),
        n_layers: rng.gen_range(1..=96),
    }
}

fn c4_scheduler() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for i in 0..1000 {
        let t = random_timings(&mut rng);
        let p = plan(&t).map_err(|e| e.to_string())?;
        let got = makespan(&p, &t).unwrap();
        let best = makespan(&brute_force_plan(&t).unwrap(), &t).unwrap();
        check(got <= best + t.max_stage(), format!("profile {i} {t:?}: {got} vs optimum {best}"))?;
        worst = worst.max((got - best) / t.max_stage());
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 5.0, format!("took {secs:.2} s"))?;
    Ok(format!("worst gap {worst:.3} stage, {secs:.3} s"))
}

fn c5_schedules() -> Outcome {
    // Per-layer stage times in ms, 7B and 30B shapes. In the 32-layer case
    // projection is slower than the hidden read, so spare IO fetches KV; in
    // the 48-layer case the hidden read is slower, so spare compute recomputes
    // a prefix (c_token is the full-layer time, 6 + n/4d projections).
    let t7 = ProfiledTimings { io_h: 0.26, io_kv: 0.52, c_h: 0.28, c_token: 1.68, n_layers: 32 };
    let t30 = ProfiledTimings { io_h: 2.3, io_kv: 4.6, c_h: 1.0, c_token: 6.0357, n_layers: 48 };
    let p7 = plan(&t7).map_err(|e| e.to_string())?;
    let p30 = plan(&t30).map_err(|e| e.to_string())?;
    check(p7.to_string() == "31H+1KV", format!("32 layers gave {p7}"))?;
    check(p30.to_string() == "40H+8RE", format!("48 layers gave {p30}"))?;
    let r7 = storage_bytes(&p7, &ModelConfig::llama_7b(), 1024).offload_ratio();
    let r30 = storage_bytes(&p30, &ModelConfig::opt_30b(), 1024).offload_ratio();
    for (name, r) in [("7b", r7), ("30b", r30)] {
        check((1.92..=2.40).contains(&r), format!("{name} storage ratio {r:.3}"))?;
    }
    Ok(format!("{p7} ratio {r7:.3}, {p30} ratio {r30:.3}"))
}

fn ssd_sim(devices: usize) -> SimParams {
    SimParams::new(ModelConfig::llama_7b(), a100(), devices, 6.9e9)
}

fn c6_end_to_end() -> Outcome {
    let start = Instant::now();
    let n = 1024;
    let sweep = |()| {
        (1..=4)
            .map(|dev| {
                let s = ssd_sim(dev);
                let p = plan(&oracle_timings(&s, n)).unwrap();
                let h = simulate(&p, n, &s, None).total_s();
                let kv = simulate(&RestorationPlan::all_kv(32), n, &s, None).total_s();
                let re = simulate(&RestorationPlan::all_recompute(32), n, &s, None).total_s();
                (dev, p, h, kv, re)
            })
            .collect::<Vec<_>>()
    };
    let a = sweep(());
    let b = sweep(());
    let mut parts = Vec::new();
    for ((dev, p, h, kv, re), again) in a.iter().zip(&b) {
        check(again.2.to_bits() == h.to_bits(), "simulated clock not deterministic".into())?;
        let r = kv / h;
        check((1.33..=2.66).contains(&r), format!("{dev} devices ({p}): hidden/kv speed {r:.3}"))?;
        parts.push(format!("{dev}dev {p} x{r:.2} vs kv, x{:.2} vs recompute", re / h));
    }
    // the recomputation comparison at n=1024, d=4096 is taken where the read
    // side no longer limits the pipeline
    let (_, _, h, _, re) = a[3];
    check(re / h >= 5.0, format!("4 devices: hidden/recompute speed {:.3}", re / h))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("took {secs:.2} s"))?;
    Ok(parts.join("; "))
}

fn c7_bubbles() -> Outcome {
    let mut p = a100();
    p.bw = 64e9;
    let s = SimParams::new(ModelConfig::llama_7b(), p, 4, 10e9);
    let rows = ablation::bubble(&s, 1024).map_err(|e| e.to_string())?;
    let (kv, only, sched) = (&rows[0], &rows[1], &rows[2]);
    check(only.total_s > kv.total_s, format!("hidden-only {:.4} s not slower than kv {:.4} s", only.total_s, kv.total_s))?;
    let r = kv.total_s / sched.total_s;
    check(r >= 1.33, format!("{} only x{r:.3} over kv", sched.label))?;
    Ok(format!(
        "kv {:.2} ms, hidden-only {:.2} ms, {} {:.2} ms (x{r:.2})",
        kv.total_s * 1e3,
        only.total_s * 1e3,
        sched.label,
        sched.total_s * 1e3
    ))
}

fn c8_saving() -> Outcome {
    let timing = ServeTiming {
        sim: SimParams::new(ModelConfig::llama_7b(), a100(), 1, 2e9),
        write: DeviceWrite { n_devices: 1, write_bw: 2e9, latency_s: 25e-6, buffer_bytes: 256 << 20 },
        save_mode: SaveMode::TwoStage,
    };
    let rows = ablation::saving(&timing, 512, &[1, 8, 16, 32], 64);
    let mut parts = Vec::new();
    for r in &rows {
        let direct = r.direct_tbt_s / r.ideal_tbt_s;
        let two = r.two_stage_tbt_s / r.ideal_tbt_s;
        if r.batch >= 16 {
            check(direct >= 1.10, format!("batch {}: direct-IO only x{direct:.3}", r.batch))?;
        }
        check(two <= 1.04, format!("batch {}: two-stage x{two:.3}", r.batch))?;
        parts.push(format!("B={} direct x{direct:.2} two-stage x{two:.3}", r.batch));
    }
    Ok(parts.join("; "))
}

fn c9_storage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    let d = 8;
    for case in 0..40 {
        let n = if case == 0 { 2048 } else if case == 1 { 1 } else { rng.gen_range(1..=2048) };
        let devices = rng.gen_range(1..=4);
        let store = SessionStore::new(DevicePool::under(&dir.path().join(format!("c{case}")), devices, None).unwrap(), 64 << 20);
        let plan = RestorationPlan::new(2, 1, 1, Complement::KvOffload).unwrap();
        store
            .create_session(SessionSpec { session_id: "s".into(), config_hash: "x".into(), plan, d_hidden: d, elem_bytes: 4 })
            .unwrap();
        let mut want = Vec::new();
        for (l, kind) in [(0, StateKind::Hidden), (1, StateKind::Kv)] {
            let w = kind.width(d);
            let data: Vec<f32> = (0..n * w).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
            store.snapshot_layer("s", l, kind, 0, &Matrix::from_vec(n, w, data.clone()).unwrap()).unwrap();
            want.push(data);
        }
        store.drain();
        store.append_tokens("s", 0, &vec![1; n]).unwrap();
        let man = store.finalize("s").map_err(|e| e.to_string())?;
        for (l, kind) in [(0, StateKind::Hidden), (1, StateKind::Kv)] {
            let got = store.read_layer("s", l, kind).map_err(|e| e.to_string())?.data;
            let same = got.data().iter().zip(&want[l]).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same && got.data().len() == want[l].len(), format!("case {case}: layer {l} differs"))?;
            let chunks = man.layer_chunks(l, kind);
            check(chunks.len() == n.div_ceil(CHUNK_TOKENS), format!("case {case}: {} chunks for {n}", chunks.len()))?;
            let mut per = vec![0usize; devices];
            for c in chunks {
                per[c.device] += 1;
            }
            let spread = per.iter().max().unwrap() - per.iter().min().unwrap();
            check(spread <= 1, format!("case {case}: per-device chunks {per:?}"))?;
        }
    }
    Ok("40 sessions bit-exact, balanced".into())
}

fn c10_invariance() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig { n_layers: 4, d_hidden: 64, n_heads: 4, d_ffn: 256, vocab_size: 256, ..ModelConfig::desk() };
    let mut prof = a100();
    prof.elem_bytes = model.elem_bytes;
    let timing = ServeTiming {
        sim: SimParams::new(model.clone(), prof, 2, 6.9e9),
        write: DeviceWrite { n_devices: 2, ..DeviceWrite::default() },
        save_mode: SaveMode::TwoStage,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tokens = 0;
    for t in 0..20 {
        let mut p = if t % 4 == 3 { TraceParams::long_context(t) } else { TraceParams::conversation(t) };
        p.sessions = rng.gen_range(1..=4);
        p.rounds = if t % 4 == 3 { 1 } else { rng.gen_range(1..=3) };
        p.max_input = 48;
        p.max_output = 24;
        p.context_min = 64;
        p.context_max = 400;
        p.short_max = 24;
        p.rate = 2.0;
        p.round_gap_s = 0.3;
        let trace = gen_trace(&p).unwrap();
        let mut cfg = RunConfig::new(model.clone(), timing.clone(), dir.path());
        cfg.weight_seed = t;
        let ideal = run(&trace, Strategy::Ideal, &cfg).map_err(|e| e.to_string())?.outputs();
        for s in [Strategy::HCache, Strategy::KvOffload, Strategy::Recompute] {
            let got = run(&trace, s, &cfg).map_err(|e| e.to_string())?.outputs();
            check(got == ideal, format!("trace {t}: {s} answers differ"))?;
        }
        tokens += ideal.iter().map(Vec::len).sum::<usize>();
    }
    Ok(format!("20 traces, {tokens} tokens identical across 4 strategies"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 lossless restore", c1_lossless),
        ("2 hidden bytes are half of kv", c2_io_ratio),
        ("3 recompute/projection flops", c3_compute_ratio),
        ("4 scheduler near optimum", c4_scheduler),
        ("5 reference schedules", c5_schedules),
        ("6 simulated restore speedups", c6_end_to_end),
        ("7 bubble elimination", c7_bubbles),
        ("8 two-stage saving", c8_saving),
        ("9 storage round trip", c9_storage),
        ("10 strategy-invariant outputs", c10_invariance),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                println!("FAIL criterion {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
