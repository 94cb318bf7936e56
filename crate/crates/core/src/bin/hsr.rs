use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hsr_core::cost::{storage_bytes, HardwareProfile};
use hsr_core::kvtext;
use hsr_core::model::{Model, ModelConfig};
use hsr_core::restore::SimParams;
use hsr_core::schedule::{self, ProfiledTimings, RestorationPlan};
use hsr_core::serving::{
    ablation, gen_trace, oracle_timings, profile_hardware, report_csv, report_table, run, DeviceWrite, Metrics, Mode,
    ProbeMode, RunConfig, SaveMode, ServeTiming, Strategy, Trace, TraceKind, TraceParams,
};
use hsr_core::storage::{DevicePool, SessionStore};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "hsr", version, about = "Restore KV caches from saved hidden states")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic request trace.
    GenTrace(GenTraceArgs),
    /// Measure per-layer stage times.
    Profile(ProfileArgs),
    /// Pick a partition plan for a profile.
    Plan(PlanArgs),
    /// Serve a trace under one or more strategies.
    Run(RunArgs),
    /// Compare saved metrics.
    Report(ReportArgs),
    /// Restoration and saving ablations on the simulated clock.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ClockMode {
    Wall,
    Sim,
}

#[derive(Args, Clone)]
struct Hw {
    /// desk, 7b, 13b or 30b. Anything but desk only drives the clocks.
    #[arg(long, default_value = "desk")]
    model_preset: String,
    /// Storage devices in the pool.
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// Read bytes per second per device.
    #[arg(long, default_value_t = 6.9e9)]
    device_bw: f64,
    /// Peak accelerator FLOP/s; overrides the accelerator preset.
    #[arg(long)]
    flops: Option<f64>,
    /// Accelerator preset: a100, a30, 4090, l20, h800.
    #[arg(long, default_value = "a100")]
    gpu: String,
    /// Flat key=value file with further settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClockMode::Sim)]
    mode: ClockMode,
}

struct Setup {
    model: ModelConfig,
    timing: ServeTiming,
    timing_only: bool,
    max_batch: usize,
    prefetch: Option<usize>,
    plan: Option<RestorationPlan>,
}

fn setup(hw: &Hw) -> Res<Setup> {
    let dims = ModelConfig::preset(&hw.model_preset).ok_or_else(|| format!("unknown model preset {:?}", hw.model_preset))?;
    let mut profile = HardwareProfile::preset(&hw.gpu).ok_or_else(|| format!("unknown accelerator {:?}", hw.gpu))?;
    profile.efficiency = 0.5;
    profile.elem_bytes = dims.elem_bytes;
    if let Some(f) = hw.flops {
        profile.flops = f;
    }
    let mut sim = SimParams::new(dims.clone(), profile, hw.devices, hw.device_bw);
    let mut write = DeviceWrite { n_devices: hw.devices, ..DeviceWrite::default() };
    let mut s = Setup {
        model: ModelConfig::desk(),
        timing: ServeTiming { sim: sim.clone(), write: write.clone(), save_mode: SaveMode::TwoStage },
        timing_only: hw.model_preset != "desk",
        max_batch: 16,
        prefetch: None,
        plan: None,
    };
    if let Some(path) = &hw.config {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in kvtext::parse_pairs(&text)? {
            let f = || v.parse::<f64>().map_err(|_| format!("{k}: not a number: {v}"));
            let u = || v.parse::<usize>().map_err(|_| format!("{k}: not a count: {v}"));
            match k.as_str() {
                "efficiency" => sim.profile.efficiency = f()?,
                "flops" => sim.profile.flops = f()?,
                "bw" | "bw_bytes_per_s" => sim.profile.bw = f()?,
                "mem_bw" => sim.profile.mem_bw = f()?,
                "host_copy_bw" => sim.profile.host_copy_bw = f()?,
                "device_bw" => sim.device_bw = f()?,
                "step_tokens" => sim.step_tokens = u()?,
                "minibatch" => sim.minibatch = u()?,
                "write_bw" => write.write_bw = f()?,
                "write_latency_s" => write.latency_s = f()?,
                "buffer_bytes" => write.buffer_bytes = u()?,
                "max_batch" => s.max_batch = u()?,
                "prefetch" => s.prefetch = Some(u()?),
                "plan" => s.plan = Some(v.parse()?),
                "save_mode" => {
                    s.timing.save_mode = match v.as_str() {
                        "two_stage" => SaveMode::TwoStage,
                        "direct_io" => SaveMode::DirectIo,
                        _ => return Err(format!("save_mode: {v:?}").into()),
                    }
                }
                _ => return Err(format!("unknown config key {k:?}").into()),
            }
        }
    }
    sim.profile.validate()?;
    s.timing.sim = sim;
    s.timing.write = write;
    Ok(s)
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, default_value = "conversation")]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator overrides as key=value, repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    hw: Hw,
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write timings as key=value text here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    hw: Hw,
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    /// Timings written by `hsr profile`; defaults to the cost oracle.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    hw: Hw,
    #[arg(long)]
    trace: PathBuf,
    /// Comma-separated strategies, or `all`.
    #[arg(long, default_value = "all")]
    strategy: String,
    /// Weight seed of the model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for metrics CSVs and the device pool.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing_only: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files written by `hsr run`.
    metrics: Vec<PathBuf>,
    /// Also write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Ablation {
    TokenWise,
    Saving,
    Bubble,
    All,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    hw: Hw,
    #[arg(long, value_enum, default_value_t = Ablation::All)]
    kind: Ablation,
    #[arg(long, default_value_t = 1024)]
    tokens: usize,
    /// Decode context for the saving ablation.
    #[arg(long, default_value_t = 512)]
    context: usize,
}

fn timings_text(t: &ProfiledTimings) -> String {
    format!("io_h={:e}\nio_kv={:e}\nc_h={:e}\nc_token={:e}\nn_layers={}\n", t.io_h, t.io_kv, t.c_h, t.c_token, t.n_layers)
}

fn load_timings(path: &Path) -> Res<ProfiledTimings> {
    let map = kvtext::parse_map(&std::fs::read_to_string(path)?)?;
    let get = |k: &str| map.get(k).ok_or_else(|| format!("{}: missing {k}", path.display()));
    let t = ProfiledTimings {
        io_h: get("io_h")?.parse()?,
        io_kv: get("io_kv")?.parse()?,
        c_h: get("c_h")?.parse()?,
        c_token: get("c_token")?.parse()?,
        n_layers: get("n_layers")?.parse()?,
    };
    t.validate()?;
    Ok(t)
}

fn cmd_gen_trace(a: GenTraceArgs) -> Res<()> {
    let mut p = match TraceKind::parse(&a.kind)? {
        TraceKind::Conversation => TraceParams::conversation(a.seed),
        TraceKind::LongContext => TraceParams::long_context(a.seed),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
        p.apply(k.trim(), v.trim())?;
    }
    let t = gen_trace(&p)?;
    t.save(&a.out)?;
    println!("{} requests -> {}", t.requests.len(), a.out.display());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Res<()> {
    let s = setup(&a.hw)?;
    let t = if s.timing_only {
        oracle_timings(&s.timing.sim, a.tokens)
    } else {
        let model = Model::init(&s.model, a.seed)?;
        let dir = std::env::temp_dir().join(format!("hsr-profile-{}", std::process::id()));
        let throttle = (a.hw.mode == ClockMode::Sim).then_some(s.timing.sim.device_bw);
        let store = SessionStore::new(DevicePool::under(&dir, a.hw.devices, throttle)?, 256 << 20);
        let mode = match a.hw.mode {
            ClockMode::Sim => ProbeMode::Simulated(s.timing.sim.profile.clone()),
            ClockMode::Wall => ProbeMode::Wall { reps: 5 },
        };
        let t = profile_hardware(&model, &store, a.tokens, &mode);
        let _ = std::fs::remove_dir_all(&dir);
        t?
    };
    let text = timings_text(&t);
    print!("{text}");
    if let Some(out) = a.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Res<()> {
    let s = setup(&a.hw)?;
    let t = match &a.timings {
        Some(p) => load_timings(p)?,
        None => oracle_timings(&s.timing.sim, a.tokens),
    };
    let p = schedule::plan(&t)?;
    let mut c = s.timing.sim.config.clone();
    c.elem_bytes = s.timing.sim.profile.elem_bytes;
    let b = storage_bytes(&p, &c, a.tokens);
    println!("plan {p}");
    println!("makespan_s {:e}", schedule::makespan(&p, &t)?);
    println!("kv_offload_s {:e}", schedule::makespan(&RestorationPlan::all_kv(t.n_layers), &t)?);
    println!("storage_ratio {:.3}", b.offload_ratio());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Res<()> {
    let s = setup(&a.hw)?;
    let trace = Trace::load(&a.trace)?;
    let strategies: Vec<Strategy> = if a.strategy == "all" {
        Strategy::ALL.to_vec()
    } else {
        a.strategy.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?
    };
    std::fs::create_dir_all(&a.out)?;
    let mut cfg = RunConfig::new(s.model, s.timing, &a.out.join("pool"));
    cfg.weight_seed = a.seed;
    cfg.mode = match a.hw.mode {
        ClockMode::Sim => Mode::Sim,
        ClockMode::Wall => Mode::Wall,
    };
    cfg.timing_only = a.timing_only || s.timing_only;
    cfg.max_batch = s.max_batch;
    cfg.prefetch = s.prefetch;
    cfg.plan = s.plan;
    let mut sets = Vec::new();
    for st in strategies {
        let m = run(&trace, st, &cfg)?;
        let path = a.out.join(format!("metrics_{st}.csv"));
        m.save(&path)?;
        eprintln!("{st}: {} requests -> {}", m.requests.len(), path.display());
        sets.push(m);
    }
    print!("{}", report_table(&sets));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Res<()> {
    if a.metrics.is_empty() {
        return Err("no metrics files given".into());
    }
    let sets = a.metrics.iter().map(|p| Metrics::load(p)).collect::<Result<Vec<_>, _>>()?;
    print!("{}", report_table(&sets));
    if let Some(out) = a.out {
        std::fs::write(out, report_csv(&sets))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Res<()> {
    let s = setup(&a.hw)?;
    let sim = &s.timing.sim;
    let restore_rows = |title: &str, rows: Vec<ablation::RestoreRow>| {
        println!("{title}");
        for r in rows {
            println!("  {:<28} {:>12.6} s  bubble {:.3}", r.label, r.total_s, r.bubble);
        }
    };
    if matches!(a.kind, Ablation::Bubble | Ablation::All) {
        restore_rows("restoration pipeline", ablation::bubble(sim, a.tokens)?);
    }
    if matches!(a.kind, Ablation::TokenWise | Ablation::All) {
        let split = ablation::balanced_split(sim, a.tokens);
        restore_rows("layer-wise vs token-wise", ablation::token_wise(sim, a.tokens, &[split])?);
    }
    if matches!(a.kind, Ablation::Saving | Ablation::All) {
        println!("decode with state saving (context {})", a.context);
        println!("  {:>5} {:>12} {:>12} {:>12} {:>7}", "batch", "ideal_s", "direct_s", "two_stage_s", "stalls");
        for r in ablation::saving(&s.timing, a.context, &[1, 4, 8, 16, 32], 32) {
            println!(
                "  {:>5} {:>12.6} {:>12.6} {:>12.6} {:>7}",
                r.batch, r.ideal_tbt_s, r.direct_tbt_s, r.two_stage_tbt_s, r.two_stage_stalls
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenTrace(a) => cmd_gen_trace(a),
        Cmd::Profile(a) => cmd_profile(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hsr: {e}");
            ExitCode::FAILURE
        }
    }
}
