//! `ssimloss` command-line front end. Results go to stdout as JSON; larger
//! artifacts are written to the paths given with `--out`.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ssimloss::fit::{compare_losses, evaluate_depth_with, fit_depth, render_scene, EvalOptions, FitConfig, FitRun, SceneSpec};
use ssimloss::geometry::{warp, CameraIntrinsics, DepthMap, Pose};
use ssimloss::grad::{run_gradcheck, GradCheckOptions, LossSetup};
use ssimloss::pfm::{read_pfm, write_pfm};
use ssimloss::resample::{pixel_shuffle, upsample_bilinear, upsample_nearest, ChannelStack};
use ssimloss::ssim::{loss, sweep_surface, sweep_to_csv, SweepGrid, SweepPreset, SweepVariant};
use ssimloss::{load_image, Error, Image, LossKind, SsimConfig};

#[derive(Parser)]
#[command(name = "ssimloss", version, about = "Decomposed SSIM losses for photometric depth learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a loss between two images.
    Compare(CompareArgs),
    /// Tabulate a toy loss surface over (luminance-contrast, structure).
    Sweep(SweepArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Warp a source image into the target frame.
    Warp(WarpArgs),
    /// Fit a depth grid to a synthetic scene.
    Fit(FitArgs),
    /// Upsample an image or a channel stack.
    Upsample(UpsampleArgs),
    /// Score a depth map against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Clone, Default)]
struct SsimFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    wl: Option<f64>,
    #[arg(long)]
    wc: Option<f64>,
    #[arg(long)]
    ws: Option<f64>,
    /// SSIM weight of the baseline residual.
    #[arg(long)]
    kappa: Option<f64>,
    /// SSIM weight of the multiplicative loss.
    #[arg(long = "w")]
    w: Option<f64>,
    /// Odd window size.
    #[arg(long)]
    window: Option<usize>,
}

impl SsimFlags {
    fn apply(&self, mut cfg: SsimConfig) -> ssimloss::Result<SsimConfig> {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.beta, self.beta);
        set(&mut cfg.gamma, self.gamma);
        set(&mut cfg.w_1, self.w1);
        set(&mut cfg.w_l, self.wl);
        set(&mut cfg.w_c, self.wc);
        set(&mut cfg.w_s, self.ws);
        set(&mut cfg.kappa, self.kappa);
        set(&mut cfg.w, self.w);
        if let Some(win) = self.window {
            cfg.window = win;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> ssimloss::Result<SsimConfig> {
        self.apply(SsimConfig::default())
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse::<LossKind>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// mae, baseline, m or a.
    #[arg(long, default_value = "a", value_parser = parse_loss)]
    loss: LossKind,
    #[command(flatten)]
    ssim: SsimFlags,
    /// Write the per-pixel loss map as PFM.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// fig2a, fig2b, fig2c or fig2d; flags given alongside override it.
    #[arg(long)]
    preset: Option<String>,
    /// classic, m or a.
    #[arg(long)]
    variant: Option<String>,
    #[command(flatten)]
    ssim: SsimFlags,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    x_max: f64,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    y_min: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    y_max: f64,
    #[arg(long, default_value_t = 21)]
    resolution: usize,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size.
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Restrict to these setups (mae, baseline, m_1_1_1, m_1_2_1, m_1_1_2, a_default).
    #[arg(long, value_delimiter = ',')]
    losses: Vec<String>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct WarpArgs {
    /// Source image (PNG, PGM/PPM or PFM).
    src: PathBuf,
    /// Target depth map (PFM).
    #[arg(long, conflicts_with = "depth_const")]
    depth: Option<PathBuf>,
    /// Constant target depth in meters.
    #[arg(long)]
    depth_const: Option<f64>,
    /// Target-to-source pose JSON.
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Warped image (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Validity mask (PFM, 1 valid, 0 invalid).
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Scene JSON; the default fronto-parallel scene when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Texture seed override.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "a", value_parser = parse_loss)]
    loss: LossKind,
    /// Fit these losses side by side instead of a single run.
    #[arg(long, value_delimiter = ',', value_parser = parse_loss)]
    compare: Vec<LossKind>,
    #[command(flatten)]
    ssim: SsimFlags,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    smoothness_weight: Option<f64>,
    #[arg(long)]
    init_depth: Option<f64>,
    /// Directory for depth PFM and loss history CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nearest,
    Shuffle,
    Bilinear,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Image, or for `shuffle` a channel-stack PFM with its JSON sidecar.
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    #[arg(long, default_value_t = 80.0)]
    cap: f64,
    #[arg(long)]
    median_scaling: bool,
}

fn read_image(path: &Path) -> ssimloss::Result<Image> {
    let is_pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        read_pfm(path)
    } else {
        load_image(path)
    }
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let cfg = args.ssim.config()?;
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    let report = loss(args.loss, &a, &b, &cfg)?;
    if let Some(out) = &args.out {
        write_pfm(out, &report.map)?;
    }
    print_json(&report.to_json(args.loss, &cfg))
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (variant, base) = match (&args.preset, &args.variant) {
        (Some(p), _) => {
            let (v, cfg) = p.parse::<SweepPreset>()?.setup();
            let v = match &args.variant {
                Some(name) => name.parse::<SweepVariant>()?,
                None => v,
            };
            (v, cfg)
        }
        (None, Some(v)) => (v.parse::<SweepVariant>()?, SsimConfig::default()),
        (None, None) => bail!(Error::Argument("either --preset or --variant is required".into())),
    };
    let cfg = args.ssim.apply(base)?;
    let grid = SweepGrid {
        x_min: args.x_min,
        x_max: args.x_max,
        y_min: args.y_min,
        y_max: args.y_max,
        resolution: args.resolution,
    };
    let points = sweep_surface(variant, &cfg, &grid)?;
    let csv = sweep_to_csv(&points);
    match &args.out {
        Some(out) => {
            std::fs::write(out, csv).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            print_json(&json!({ "rows": points.len(), "out": out, "config": cfg }))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Returns whether every setup passed.
fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let mut setups = LossSetup::standard_suite();
    if !args.losses.is_empty() {
        for name in &args.losses {
            if !setups.iter().any(|s| &s.name == name) {
                bail!(Error::Argument(format!("unknown gradcheck setup {name:?}")));
            }
        }
        setups.retain(|s| args.losses.contains(&s.name));
    }
    let opts = GradCheckOptions {
        seed: args.seed,
        height: args.size,
        width: args.size,
        channels: args.channels,
        trials: args.trials,
        setups,
        inject_fault: args.inject_fault,
        ..GradCheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    print_json(&serde_json::to_value(&report)?)?;
    Ok(report.passed)
}

fn cmd_warp(args: WarpArgs) -> anyhow::Result<()> {
    let src = read_image(&args.src)?;
    let depth = match (&args.depth, args.depth_const) {
        (Some(p), _) => DepthMap::load(p)?,
        (None, Some(d)) => DepthMap::constant(src.height(), src.width(), d)?,
        (None, None) => bail!(Error::Argument("either --depth or --depth-const is required".into())),
    };
    let pose = Pose::load(&args.pose)?;
    let k = CameraIntrinsics::load(&args.intrinsics)?;
    let out = warp(&src, &depth, &k, &pose)?;
    write_pfm(&args.out, &out.image)?;
    if let Some(mask_path) = &args.mask_out {
        let mask = out.valid_mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        write_pfm(mask_path, &Image::new(src.height(), src.width(), 1, mask)?)?;
    }
    print_json(&json!({
        "out": args.out,
        "valid_fraction": out.valid_fraction(),
        "height": src.height(),
        "width": src.width(),
        "channels": src.channels(),
    }))
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let mut spec = match &args.scene {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::fronto_parallel_default(),
    };
    if let Some(seed) = args.seed {
        spec.texture.seed = seed;
    }
    let ssim = args.ssim.config()?;
    let config_for = |loss: LossKind| {
        let mut cfg = FitConfig {
            loss,
            ssim,
            ..FitConfig::default()
        };
        if let Some(v) = args.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = args.step {
            cfg.step_size = v;
        }
        if let Some(v) = args.smoothness_weight {
            cfg.smoothness_weight = v;
        }
        if let Some(v) = args.init_depth {
            cfg.init_depth = v;
        }
        cfg
    };

    if !args.compare.is_empty() {
        let runs: Vec<FitRun> = args.compare.iter().map(|&k| FitRun::new(k.name(), config_for(k))).collect();
        let report = compare_losses(&spec, &runs, args.out.as_deref())?;
        return print_json(&serde_json::to_value(&report)?);
    }

    let cfg = config_for(args.loss);
    let scene = render_scene(&spec)?;
    let fit = fit_depth(&scene.views(), &cfg)?;
    let eval = EvalOptions {
        median_scaling: spec.scale_free,
        ..EvalOptions::default()
    };
    let metrics = evaluate_depth_with(&fit.depth, &scene.depth, eval)?;
    let (mut depth_pfm, mut history_csv) = (None, None);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let pfm = dir.join("depth.pfm");
        write_pfm(&pfm, &fit.depth.to_image())?;
        let csv = dir.join("history.csv");
        std::fs::write(&csv, fit.history_csv()).map_err(|e| Error::Io { path: csv.clone(), source: e })?;
        depth_pfm = Some(pfm);
        history_csv = Some(csv);
    }
    print_json(&json!({
        "loss": args.loss.name(),
        "config": cfg,
        "metrics": metrics,
        "initial_loss": fit.history[0],
        "final_loss": fit.final_loss(),
        "iterations": fit.history.len() - 1,
        "stalled_iterations": fit.stalled_iterations,
        "depth_pfm": depth_pfm,
        "history_csv": history_csv,
    }))
}

fn cmd_upsample(args: UpsampleArgs) -> anyhow::Result<()> {
    let out = match args.mode {
        Mode::Shuffle => pixel_shuffle(&ChannelStack::read(&args.input)?, args.r)?,
        Mode::Nearest => upsample_nearest(&read_image(&args.input)?, args.r)?,
        Mode::Bilinear => upsample_bilinear(&read_image(&args.input)?, args.r)?,
    };
    write_pfm(&args.out, &out)?;
    print_json(&json!({
        "out": args.out,
        "height": out.height(),
        "width": out.width(),
        "channels": out.channels(),
    }))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let pred = DepthMap::load(&args.pred)?;
    let gt = DepthMap::load(&args.gt)?;
    let opts = EvalOptions {
        cap: args.cap,
        median_scaling: args.median_scaling,
    };
    print_json(&serde_json::to_value(evaluate_depth_with(&pred, &gt, opts)?)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Argument(_)) => 1,
        Some(Error::Numeric(_) | Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Compare(a) => cmd_compare(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Warp(a) => cmd_warp(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Upsample(a) => cmd_upsample(a)?,
        Command::Eval(a) => cmd_eval(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
