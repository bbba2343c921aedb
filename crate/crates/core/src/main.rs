//! `surfelflow` command-line entry point.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use surfelflow::flow::FlowError;
use surfelflow::io::IoError;
use surfelflow::nets::NetError;
use surfelflow::surfel::SurfelError;

#[derive(Parser, Debug)]
#[command(
    name = "surfelflow",
    version,
    about = "Surfel splatting, point-cloud latents and cascaded flow matching"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct GlobalArgs {
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Request bitwise-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "SURFELFLOW_THREADS")]
    threads: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare autodiff, rasterizer and denoiser gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Render a splat scene from a camera.
    Render(RenderArgs),
    /// Fit splats to posed views.
    Fit(FitArgs),
    /// Train a stage-1 (anchor) or stage-2 (feature) flow model.
    Train(TrainArgs),
    /// Sample anchors then features from a trained cascade.
    Sample(SampleArgs),
    /// Edit sampled anchors and regenerate their features.
    Edit(EditArgs),
    /// Utilization, Chamfer distance and PSNR of a scene or cloud.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Negate the analytic gradient of the named check.
    #[arg(long)]
    fault: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    scene: Option<PathBuf>,
    camera: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write depth, normal and alpha images next to `--out`.
    #[arg(long)]
    aux: bool,
    /// Write L_d and L_n of the render to this CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
    /// Reference normal map (`.tsr`, H×W×3) for L_n; defaults to the render's own blended normals.
    #[arg(long)]
    normals: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    background: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SyntheticViews {
    Sphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SyntheticShapes {
    Shapes,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Directory of views (`name.ppm`, `name.depth.tsr`, `name.normal.tsr`, `name.json`).
    views: Option<PathBuf>,
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticViews>,
    /// Extra views scored but not fitted.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    splats: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration loss CSV; defaults to `--out` with its extension replaced by `.losses.csv`.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    /// Fraction of iterations fitted on colour alone.
    #[arg(long)]
    geometry_start: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    init_opacity: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    stage: Option<u8>,
    /// Directory with `index.json` and PLY clouds.
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticShapes>,
    /// Write the generated toy dataset here as PLY plus `index.json`.
    #[arg(long)]
    emit_dataset: Option<PathBuf>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    feature_width: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Fourier bands of the stage-2 anchor encoding.
    #[arg(long)]
    bands: Option<usize>,
    /// Train stage 2 without adding the anchor encoding (ablation).
    #[arg(long)]
    no_anchor_injection: bool,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-2 seed; the stage-1 output is unchanged.
    #[arg(long)]
    resample_h: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct EditArgs {
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resample_h: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct MetricsArgs {
    input: Option<PathBuf>,
    /// Reference cloud or scene for the Chamfer distance.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Views directory for per-view PSNR of a scene.
    #[arg(long)]
    views: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
}

/// Exit status classes.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Io(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Io(e) | Failure::Numeric(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        for cause in e.chain() {
            if cause.downcast_ref::<IoError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
                return Failure::Io(e);
            }
            if let Some(f) = cause.downcast_ref::<FlowError>() {
                match f {
                    FlowError::Io { .. } | FlowError::Checkpoint(_) => return Failure::Io(e),
                    FlowError::Diverged { .. } | FlowError::NonFinite(_) => return Failure::Numeric(e),
                    _ => {}
                }
            }
            if let Some(NetError::Checkpoint(_)) = cause.downcast_ref::<NetError>() {
                return Failure::Io(e);
            }
            if let Some(SurfelError::Diverged(_)) = cause.downcast_ref::<SurfelError>() {
                return Failure::Numeric(e);
            }
        }
        Failure::Validation(e)
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow::anyhow!(msg.into()))
}

/// Settings shared by every command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct Common {
    pub seed: u64,
    pub deterministic: bool,
    pub threads: Option<usize>,
}

fn flag_values<T: Serialize>(args: &T) -> Map<String, Value> {
    match serde_json::to_value(args).expect("flags serialize") {
        Value::Object(m) => m
            .into_iter()
            .filter(|(_, v)| !v.is_null() && *v != Value::Bool(false))
            .collect(),
        _ => Map::new(),
    }
}

fn read_config_file(path: &Path, command: &str) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), e.line())))?;
    let Value::Object(mut map) = value else {
        return Err(invalid(format!("{}: config must be a JSON object", path.display())));
    };
    match map.remove("command") {
        Some(Value::String(c)) if c != command => {
            return Err(invalid(format!(
                "{}: config is for `{c}`, not `{command}`",
                path.display()
            )))
        }
        _ => {}
    }
    Ok(map)
}

/// File values, overridden by flags, into the command's resolved config.
/// Unknown keys are rejected.
fn resolve<C: Serialize + DeserializeOwned>(
    command: &str,
    global: &GlobalArgs,
    flags: Map<String, Value>,
) -> Result<(Common, C), Failure> {
    let mut merged = match &global.config {
        Some(p) => read_config_file(p, command)?,
        None => Map::new(),
    };
    merged.extend(flag_values(global));
    merged.extend(flags);
    let common: Common =
        serde_json::from_value(Value::Object(merged.clone())).map_err(|e| invalid(format!("config: {e}")))?;
    let cmd: C = serde_json::from_value(Value::Object(merged.clone())).map_err(|e| invalid(format!("config: {e}")))?;
    let mut known: Vec<String> = serde_json::to_value(&common)
        .ok()
        .and_then(|v| v.as_object().map(|m| m.keys().cloned().collect()))
        .unwrap_or_default();
    if let Value::Object(m) = serde_json::to_value(&cmd).expect("config serializes") {
        known.extend(m.keys().cloned());
    }
    if let Some(k) = merged.keys().find(|k| !known.contains(k)) {
        return Err(invalid(format!("unknown config key `{k}` for `{command}`")));
    }
    Ok((common, cmd))
}

/// Prints the resolved config; feeding it back through `--config` reproduces the run.
fn echo<C: Serialize>(command: &str, common: &Common, cmd: &C) {
    let mut m = Map::new();
    m.insert("command".into(), Value::String(command.into()));
    if let Value::Object(c) = serde_json::to_value(common).expect("config serializes") {
        m.extend(c);
    }
    if let Value::Object(c) = serde_json::to_value(cmd).expect("config serializes") {
        m.extend(c);
    }
    eprintln!("{}", Value::Object(m));
}

fn setup_threads(common: &Common) -> CmdResult {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch<C: Serialize + DeserializeOwned>(
    name: &str,
    global: &GlobalArgs,
    flags: Map<String, Value>,
    run: impl FnOnce(&Common, &C) -> CmdResult,
) -> CmdResult {
    let (common, cfg) = resolve::<C>(name, global, flags)?;
    echo(name, &common, &cfg);
    setup_threads(&common)?;
    run(&common, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Gradcheck(a) => dispatch("gradcheck", g, flag_values(a), commands::gradcheck),
        Command::Render(a) => dispatch("render", g, flag_values(a), commands::render),
        Command::Fit(a) => dispatch("fit", g, flag_values(a), commands::fit),
        Command::Train(a) => dispatch("train", g, flag_values(a), commands::train),
        Command::Sample(a) => dispatch("sample", g, flag_values(a), commands::sample),
        Command::Edit(a) => dispatch("edit", g, flag_values(a), commands::edit),
        Command::Metrics(a) => dispatch("metrics", g, flag_values(a), commands::metrics),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
