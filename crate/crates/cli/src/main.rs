use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use zest_core::data_io::{self, SceneBundle};
use zest_core::losses::LossTerm;
use zest_core::metrics::{self, EvalOptions, LpipsHook, MetricRow, SsimMode};
use zest_core::model::RenderMode;
use zest_core::synthetic::{SyntheticScene, SyntheticSceneSpec};
use zest_core::trainer::{self, FitOptions, LogEntry, TrainState};
use zest_core::{par, Error, TrainConfig};

const RESOLVED_CONFIG: &str = "config.toml";
const LOSS_CSV: &str = "losses.csv";
const LATEST: &str = "latest.ckpt";

#[derive(Parser)]
#[command(name = "zest", version, about = "Dynamic novel-view synthesis from monocular video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedurally generated scene.
    Synth(SynthArgs),
    /// Train from scratch on one or more scenes.
    Train(TrainArgs),
    /// Continue training a checkpoint on one scene.
    Finetune(FinetuneArgs),
    /// Render views of a scene with a trained checkpoint.
    Render(RenderArgs),
    /// Score rendered frames against a scene.
    Eval(EvalArgs),
    /// Leave-one-out training and evaluation over a scene list.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    cameras: usize,
    /// Motion variant index; 0 keeps the default trajectory.
    #[arg(long, default_value_t = 0)]
    variant: usize,
    /// Object does not move.
    #[arg(long = "static")]
    still: bool,
    /// Also write renders from cameras between the training ring positions.
    #[arg(long)]
    heldout: bool,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small CPU-scale settings instead of the full defaults.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    no_geometry_volume: bool,
    #[arg(long)]
    no_motion_volume: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None if self.toy => TrainConfig::toy(),
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if self.no_geometry_volume {
            cfg.use_geometry_volume = false;
        }
        if self.no_motion_volume {
            cfg.use_motion_volume = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene directory; repeat for multi-scene training.
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/latest.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "blend")]
    mode: String,
    /// Camera indices from the scene; by default each frame uses its own camera.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Frame indices, as a list (`1,4,5`) or half-open range (`2..6`); default all.
    #[arg(long)]
    times: Option<String>,
    #[arg(long)]
    no_geometry_volume: bool,
    #[arg(long)]
    no_motion_volume: bool,
}

#[derive(Args, Clone)]
struct MetricArgs {
    /// Score SSIM with the deviation-product form instead of covariance.
    #[arg(long)]
    ssim_literal: bool,
    /// Executable printing an LPIPS distance for two image paths.
    #[arg(long)]
    lpips: Option<PathBuf>,
}

impl MetricArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            ssim_mode: if self.ssim_literal {
                SsimMode::DeviationProduct
            } else {
                SsimMode::Covariance
            },
            lpips: self.lpips.clone().map(LpipsHook::new),
            ..EvalOptions::new()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `%05d.png` renders named by frame index.
    #[arg(long)]
    renders: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Directory for `metrics.txt` and `metrics.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, required = true, num_args = 2..)]
    scene: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    par::configure_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Crossval(a) => cmd_crossval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 3 data, 4 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) | Some(Error::InvalidArgument(_)) => 2,
        Some(Error::NonFinite { .. }) => 4,
        Some(_) => 3,
        None if e.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_scenes(paths: &[PathBuf]) -> anyhow::Result<Vec<SceneBundle>> {
    paths.iter().map(|p| Ok(data_io::load_scene(p)?)).collect()
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let base = SyntheticSceneSpec {
        frames: a.frames,
        height: a.height,
        width: a.width,
        cameras: a.cameras,
        ..SyntheticSceneSpec::default()
    };
    let mut spec = if a.variant == 0 { base } else { base.variant(a.variant) };
    if a.still {
        spec.trajectory.velocity = [0.0; 3];
    }
    let scene = SyntheticScene::new(spec, a.seed)?;
    data_io::save_scene(&scene.bundle(), &a.out)?;
    if a.heldout {
        let dir = a.out.join("heldout");
        let images: Vec<_> = (0..a.frames)
            .map(|t| scene.render_gt(&scene.heldout_camera(t), t as f64))
            .collect();
        data_io::save_render(&images, &dir)?;
    }
    log::info!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn csv_header() -> String {
    let mut s = String::from("step,scene_id,time,total");
    for t in LossTerm::ALL {
        s.push(',');
        s.push_str(t.name());
    }
    s
}

fn csv_row(e: &LogEntry) -> String {
    let mut s = format!("{},{},{},{}", e.step, e.scene_id, e.time, e.report.total);
    for t in LossTerm::ALL {
        s.push(',');
        if let Some(v) = e.report.get(t) {
            let _ = write!(s, "{v}");
        }
    }
    s
}

/// Runs `fit_state`, appending one CSV row per step and checkpointing into `out`.
fn run_training(state: &mut TrainState, scenes: &[SceneBundle], out: &Path, fresh_csv: bool) -> anyhow::Result<()> {
    let csv_path = out.join(LOSS_CSV);
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_csv)
        .truncate(fresh_csv)
        .open(&csv_path)
        .with_context(|| format!("opening {}", csv_path.display()))?;
    if fresh_csv {
        writeln!(csv, "{}", csv_header())?;
    }
    let log_every = state.config().log_every.max(1);
    let mut write_err = None;
    let mut opts = FitOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        on_step: Some(Box::new(|e: &LogEntry| {
            if let Err(err) = writeln!(csv, "{}", csv_row(e)) {
                write_err.get_or_insert(err);
            }
            if e.step.is_multiple_of(log_every) {
                log::info!("step {} scene {} loss {:.6}", e.step, e.scene_id, e.report.total);
            }
        })),
    };
    let result = trainer::fit_state(state, scenes, &mut opts);
    drop(opts);
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", csv_path.display()));
    }
    result?;
    trainer::save_checkpoint(state, &out.join(LATEST))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let scenes = load_scenes(&a.scene)?;
    ensure_dir(&a.out)?;
    let (mut state, fresh) = if a.resume {
        let mut state = trainer::load_checkpoint(&a.out.join(LATEST))?;
        let mut cfg = state.config().clone();
        if a.config.config.is_some() || a.config.toy {
            cfg = a.config.resolve()?;
        } else {
            a.config.apply(&mut cfg);
        }
        state.reconfigure(&cfg)?;
        log::info!("resuming at step {}", state.step);
        (state, false)
    } else {
        (TrainState::new(&a.config.resolve()?)?, true)
    };
    state.config().save(&a.out.join(RESOLVED_CONFIG))?;
    run_training(&mut state, &scenes, &a.out, fresh)
}

fn cmd_finetune(a: &FinetuneArgs) -> anyhow::Result<()> {
    let scene = data_io::load_scene(&a.scene)?;
    let mut state = trainer::load_checkpoint(&a.ckpt)?;
    let mut cfg = state.config().clone();
    cfg.total_steps = state.step + a.steps;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    state.reconfigure(&cfg)?;
    ensure_dir(&a.out)?;
    cfg.save(&a.out.join(RESOLVED_CONFIG))?;
    run_training(&mut state, std::slice::from_ref(&scene), &a.out, true)
}

fn parse_times(spec: Option<&str>, n: usize) -> anyhow::Result<Vec<usize>> {
    let times: Vec<usize> = match spec {
        None => (0..n).collect(),
        Some(s) => match s.split_once("..") {
            Some((lo, hi)) => (lo.trim().parse::<usize>()?..hi.trim().parse::<usize>()?).collect(),
            None => s
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()?,
        },
    };
    if let Some(&t) = times.iter().find(|&&t| t >= n) {
        bail!(Error::InvalidArgument(format!("time {t} outside a {n}-frame scene")));
    }
    Ok(times)
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let mode = RenderMode::parse(&a.mode)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {:?}; use blend, static or dynamic", a.mode)))?;
    let scene = data_io::load_scene(&a.scene)?;
    let mut state = trainer::load_checkpoint(&a.ckpt)?;
    let mut cfg = state.config().clone();
    cfg.use_geometry_volume &= !a.no_geometry_volume;
    cfg.use_motion_volume &= !a.no_motion_volume;
    state.reconfigure(&cfg)?;
    let times = parse_times(a.times.as_deref(), scene.len())?;
    if let Some(&v) = a.views.iter().flatten().find(|&&v| v >= scene.cameras.len()) {
        bail!(Error::InvalidArgument(format!(
            "view {v} outside {} cameras",
            scene.cameras.len()
        )));
    }
    ensure_dir(&a.out)?;
    cfg.save(&a.out.join(RESOLVED_CONFIG))?;
    let (h, w) = scene.original_hw;
    let jobs: Vec<(Option<usize>, usize)> = match &a.views {
        None => times.iter().map(|&t| (None, t)).collect(),
        Some(vs) => vs
            .iter()
            .flat_map(|&v| times.iter().map(move |&t| (Some(v), t)))
            .collect(),
    };
    for (view, t) in jobs {
        let cam = &scene.cameras[view.unwrap_or(t)];
        let img = trainer::render(&state.model, &scene, t, cam, mode)?;
        let dir = match view {
            None => a.out.clone(),
            Some(v) => a.out.join(format!("view{v:02}")),
        };
        ensure_dir(&dir)?;
        data_io::write_png(&dir.join(format!("{t:05}.png")), &data_io::crop_chw(&img, h, w))?;
    }
    log::info!(
        "rendered {} images to {}",
        a.views.as_ref().map_or(1, Vec::len) * times.len(),
        a.out.display()
    );
    Ok(())
}

fn metrics_csv(label: &str, rows: &[(String, MetricRow)]) -> String {
    let mut s = format!("{label},psnr,ssim,lpips\n");
    for (name, r) in rows {
        let lp = r.lpips.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{name},{},{},{lp}", r.psnr, r.ssim);
    }
    s
}

fn write_tables(out: Option<&Path>, label: &str, rows: &[(String, MetricRow)]) -> anyhow::Result<()> {
    let table = metrics::format_table(label, rows);
    print!("{table}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_text(&dir.join("metrics.txt"), &table)?;
        write_text(&dir.join("metrics.csv"), &metrics_csv(label, rows))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let scene = data_io::load_scene(&a.scene)?;
    let (h, w) = scene.original_hw;
    let mut indices = Vec::new();
    for entry in fs::read_dir(&a.renders).with_context(|| format!("reading {}", a.renders.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(t) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
            {
                indices.push(t);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        bail!(Error::Format {
            path: a.renders.clone(),
            message: "no renders named by frame index (00000.png, ...)".into(),
        });
    }
    let mut renders = Vec::new();
    let mut targets = Vec::new();
    for &t in &indices {
        if t >= scene.len() {
            bail!(Error::InvalidArgument(format!(
                "render {t:05}.png has no frame in a {}-frame scene",
                scene.len()
            )));
        }
        renders.push(data_io::read_png(&a.renders.join(format!("{t:05}.png")))?);
        targets.push(data_io::crop_chw(&scene.frames[t], h, w));
    }
    let report = metrics::evaluate_sequence(&renders, &targets, &a.metrics.options())?;
    let mut rows: Vec<(String, MetricRow)> = indices
        .iter()
        .zip(&report.frames)
        .map(|(t, r)| (format!("{t:05}"), *r))
        .collect();
    rows.push(("mean".into(), report.mean));
    write_tables(a.out.as_deref(), "frame", &rows)
}

fn cmd_crossval(a: &CrossvalArgs) -> anyhow::Result<()> {
    let scenes = load_scenes(&a.scene)?;
    let cfg = a.config.resolve()?;
    ensure_dir(&a.out)?;
    cfg.save(&a.out.join(RESOLVED_CONFIG))?;
    let report = trainer::cross_validate(&scenes, &cfg, &a.metrics.options())?;
    let mut audit = String::from("eval_scene,trained_on,leaked\n");
    for f in &report.audit {
        let _ = writeln!(audit, "{},{},{}", f.eval_scene, f.trained_on.join(";"), f.leaked());
    }
    write_text(&a.out.join("audit.csv"), &audit)?;
    if let Some(f) = report.audit.iter().find(|f| f.leaked()) {
        bail!(Error::InvalidArgument(format!(
            "scene {} appears in its own training fold",
            f.eval_scene
        )));
    }
    let mut rows = report.rows.clone();
    rows.push(("mean".into(), report.mean));
    write_tables(Some(&a.out), "scene", &rows)
}
