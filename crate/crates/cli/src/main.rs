use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dualsplat::floater_lab::{deadlock_break_experiment, deadlock_fixture, ColorLossKind, DeadlockConfig, FixtureConfig};
use dualsplat::geometry::{pairs_to_table, select_pairs};
use dualsplat::gradcheck::{run_suite, PARAM_GROUPS};
use dualsplat::io::{
    load_dataset, parse_colmap_text, read_json, read_pmap_dir, read_scene, write_dataset, write_depth_png16, write_json,
    write_pfm, write_png, DatasetDir, DEPTH_PNG_SCALE,
};
use dualsplat::scale_align::{scales_to_table, solve_scales, IntraPenalty, SolverConfig, HUBER_WIDTH};
use dualsplat::synth::{synth_scene, SceneKind, SynthSpec};
use dualsplat::trainer::{evaluate, train, EvalMetrics, TrainConfig, TrainData};
use dualsplat::{Camera, RenderPath, RenderSettings};

#[derive(Parser)]
#[command(name = "dualsplat", version, about = "Dual-opacity Gaussian splatting on the CPU")]
struct Cli {
    /// Worker threads for rendering (default: all cores).
    #[arg(long, global = true, env = "DUALSPLAT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one view of a scene file to PNG, optionally with depth.
    Render(RenderArgs),
    /// Train a scene on a dataset directory.
    Train(TrainArgs),
    /// Select consistency pairs from a COLMAP text model.
    SelectPairs(SelectPairsArgs),
    /// Solve point-map scales.
    SolveScales(SolveScalesArgs),
    /// Run the two-view floater experiment.
    FloaterDemo(FloaterDemoArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Compare analytic render gradients with finite differences.
    CheckGrads(CheckGradsArgs),
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Camera list; defaults to the cameras stored in the scene file.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// `geometric` or `appearance`.
    #[arg(long, default_value = "appearance")]
    path: RenderPath,
    #[arg(long)]
    out: PathBuf,
    /// Expected depth as PFM.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Depth as 16-bit PNG, millimetre steps.
    #[arg(long)]
    depth_png: Option<PathBuf>,
    /// Divide depth by accumulated alpha where it exceeds this value.
    #[arg(long)]
    normalize_depth: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct SelectPairsArgs {
    #[arg(long)]
    colmap: PathBuf,
    /// Table destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveScalesArgs {
    #[arg(long)]
    pmaps: PathBuf,
    /// Camera list in JSON.
    #[arg(long, conflicts_with = "colmap", required_unless_present = "colmap")]
    poses: Option<PathBuf>,
    /// COLMAP text model supplying the poses.
    #[arg(long)]
    colmap: Option<PathBuf>,
    /// `huber` or `l1`.
    #[arg(long, default_value = "huber")]
    penalty: String,
    #[arg(long, default_value_t = HUBER_WIDTH)]
    huber_width: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FloaterDemoArgs {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.25)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda_consis: f64,
    /// `l1` or `mse`.
    #[arg(long, default_value = "l1")]
    loss: ColorLossKind,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step opacity and loss trace.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// `box`, `plane-floater`, `translucent-slab` or `ring`.
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    floaters: usize,
}

#[derive(Args)]
struct CheckGradsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 5)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    size: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Render(a) => render_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::SelectPairs(a) => select_pairs_cmd(a),
        Command::SolveScales(a) => solve_scales_cmd(a),
        Command::FloaterDemo(a) => floater_demo_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::CheckGrads(a) => check_grads_cmd(a),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render_cmd(a: RenderArgs) -> Result<ExitCode> {
    let scene = read_scene(&a.scene)?;
    let cameras: Vec<Camera> = match &a.cameras {
        Some(p) => read_json(p)?,
        None => scene.cameras.clone(),
    };
    let Some(cam) = cameras.get(a.view) else {
        bail!("view {} out of range ({} cameras)", a.view, cameras.len());
    };
    cam.validate()?;
    let out = dualsplat::render::render_with(&scene.gaussians, cam, a.path, &RenderSettings::default(), None);
    write_png(&a.out, &out.color)?;
    let depth = match a.normalize_depth {
        Some(m) => out.normalized_depth(m),
        None => out.depth.clone(),
    };
    if let Some(p) = &a.depth {
        write_pfm(p, &depth)?;
    }
    if let Some(p) = &a.depth_png {
        write_depth_png16(p, &depth)?;
        log::info!("depth PNG scale: {DEPTH_PNG_SCALE} steps per unit");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct HoldoutReport {
    view: usize,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

#[derive(Serialize)]
struct TrainReport {
    dataset: String,
    iterations: usize,
    seed: u64,
    gaussians: usize,
    skipped_steps: usize,
    final_train_psnr: Option<f64>,
    holdout: Vec<HoldoutReport>,
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    if ds.init.is_empty() {
        bail!("dataset {} has an empty initialization", a.data.display());
    }
    let data = TrainData::from_dataset(&ds, &SolverConfig::default())?;
    let result = train(&ds.init, &data, &cfg, Some(&a.out))?;
    let mut holdout = Vec::new();
    for &v in &ds.meta.holdout {
        let backdrop = ds.meta.backdrop.map(|p| p.backdrop(&ds.cameras[v]));
        let metrics = evaluate(
            &result.cloud,
            &ds.cameras[v],
            &ds.images[v],
            ds.depths.get(v),
            cfg.depth_min_alpha,
            backdrop.as_ref(),
        )?;
        println!(
            "held-out view {v}: PSNR {:.3} dB{}",
            metrics.psnr,
            metrics.depth_mae.map(|m| format!(", depth MAE {m:.5}")).unwrap_or_default()
        );
        holdout.push(HoldoutReport { view: v, metrics });
    }
    let report = TrainReport {
        dataset: ds.meta.name.clone(),
        iterations: cfg.iterations,
        seed: cfg.seed,
        gaussians: result.cloud.len(),
        skipped_steps: result.skipped_steps,
        final_train_psnr: result.metrics.last().map(|r| r.psnr),
        holdout,
    };
    write_json(&a.out.join("report.json"), &report)?;
    Ok(ExitCode::SUCCESS)
}

fn select_pairs_cmd(a: SelectPairsArgs) -> Result<ExitCode> {
    let model = parse_colmap_text(&a.colmap)?;
    let cams = model.to_cameras()?;
    let pairs = select_pairs(&model.to_matches(), &cams)?;
    log::info!("{} pairs selected among {} views", pairs.len(), cams.len());
    write_text(a.out.as_deref(), &pairs_to_table(&pairs))?;
    Ok(ExitCode::SUCCESS)
}

fn solve_scales_cmd(a: SolveScalesArgs) -> Result<ExitCode> {
    let records = read_pmap_dir(&a.pmaps)?;
    if records.is_empty() {
        bail!("no .pmap files in {}", a.pmaps.display());
    }
    let cameras: Vec<Camera> = match (&a.poses, &a.colmap) {
        (Some(p), _) => read_json(p)?,
        (None, Some(d)) => parse_colmap_text(d)?.to_cameras()?,
        (None, None) => bail!("either --poses or --colmap is required"),
    };
    let penalty = match a.penalty.to_ascii_lowercase().as_str() {
        "l1" => IntraPenalty::L1,
        "huber" => IntraPenalty::Huber { width: a.huber_width },
        other => bail!("unknown penalty `{other}` (expected `huber` or `l1`)"),
    };
    let poses: Vec<_> = cameras.iter().map(|c| c.cam_to_world()).collect();
    let config = SolverConfig {
        penalty,
        ..SolverConfig::default()
    };
    let sol = solve_scales(&records, &poses, &config)?;
    log::info!(
        "objective {:.6e} -> {:.6e} over {} component(s)",
        sol.history.first().copied().unwrap_or(f64::NAN),
        sol.history.last().copied().unwrap_or(f64::NAN),
        sol.components
    );
    write_text(a.out.as_deref(), &scales_to_table(&sol))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FloaterSummary {
    steps: usize,
    delta: f64,
    lambda_consis: f64,
    color_only_final_alpha: f64,
    with_consis_final_alpha: f64,
    equilibrium_alpha_grad: f64,
    reference_alpha_grad: f64,
    gradient_ratio: f64,
}

fn floater_demo_cmd(a: FloaterDemoArgs) -> Result<ExitCode> {
    let fixture = FixtureConfig {
        delta: a.delta,
        ..FixtureConfig::default()
    };
    let views = deadlock_fixture(&fixture)?;
    let cfg = DeadlockConfig {
        steps: a.steps,
        lambda_consis: a.lambda_consis,
        loss: a.loss,
        ..DeadlockConfig::default()
    };
    let report = deadlock_break_experiment(&views, a.delta, &cfg)?;
    let summary = FloaterSummary {
        steps: a.steps,
        delta: a.delta,
        lambda_consis: a.lambda_consis,
        color_only_final_alpha: report.color_only.final_mean_alpha(),
        with_consis_final_alpha: report.with_consis.final_mean_alpha(),
        equilibrium_alpha_grad: report.equilibrium_alpha_grad,
        reference_alpha_grad: report.reference_alpha_grad,
        gradient_ratio: report.gradient_ratio(),
    };
    println!(
        "color only: mean alpha {:.4}, gradient ratio {:.3e}; with consistency: mean alpha {:.4}",
        summary.color_only_final_alpha, summary.gradient_ratio, summary.with_consis_final_alpha
    );
    if let Some(p) = &a.out {
        write_json(p, &summary)?;
    }
    if let Some(p) = &a.csv {
        write_text(Some(p), &report.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth_cmd(a: SynthArgs) -> Result<ExitCode> {
    let kind: SceneKind = a.scene.parse()?;
    let spec = SynthSpec {
        kind,
        seed: a.seed,
        noise: a.noise,
        floaters: a.floaters,
    };
    let ds = DatasetDir::from_synth(&synth_scene(&spec)?)?;
    write_dataset(&a.out, &ds)?;
    println!("wrote {} ({} views) to {}", ds.meta.name, ds.cameras.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn check_grads_cmd(a: CheckGradsArgs) -> Result<ExitCode> {
    if a.scenes == 0 || a.gaussians == 0 || a.size == 0 {
        bail!("--scenes, --gaussians and --size must be positive");
    }
    let report = run_suite(a.seed, a.scenes, a.gaussians, a.size);
    for (g, w) in PARAM_GROUPS.iter().zip(report.worst) {
        println!("{g}: worst relative error {w:.3e}");
    }
    if report.passed() {
        println!("PASS: {} gradient entries checked", report.checked);
        Ok(ExitCode::SUCCESS)
    } else {
        for f in report.failures.iter().take(10) {
            eprintln!(
                "gaussian {} slot {}: analytic {:.6e} numeric {:.6e} (rel {:.3e})",
                f.gaussian, f.slot, f.analytic, f.numeric, f.rel_error
            );
        }
        println!("FAIL: {} of {} entries exceed tolerance", report.failures.len(), report.checked);
        Ok(ExitCode::from(2))
    }
}
