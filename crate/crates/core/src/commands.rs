use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use surfelflow::autodiff::{tsr, Tensor};
use surfelflow::checks::{run_all, Fault, TOLERANCE};
use surfelflow::flow::{
    check_cascade, sample_anchors, sample_features, FlowModel, ModelConfig, TrainConfig, TrainSample, Trainer,
};
use surfelflow::geometry::{chamfer_distance, points_to_tensor, tensor_to_points, Aabb, RenderingInput};
use surfelflow::io::{
    load_views_dir, read_camera_json, read_cloud_ply, read_ply, read_scene_ply, write_cloud_ply, write_csv,
    write_gray_ppm, write_ppm, write_scene_ply,
};
use surfelflow::nets::DenoiserConfig;
use surfelflow::surfel::{
    distortion_loss, fit_splats, init_scene_from_views, normal_loss, psnr, rasterize, utilization_ratio, FitOptions,
    RasterOptions, SplatScene, UTILIZATION_TAU,
};
use surfelflow::synthetic::{shape_dataset, sphere_dataset, ShapeClass};

use crate::{invalid, CmdResult, Common, Failure, SyntheticShapes, SyntheticViews};

const CHAMFER_CONVENTION: &str = "squared Euclidean distance, mean over points, symmetric sum";

fn required<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| invalid(format!("missing required `{name}`")))
}

fn ensure_parent(path: &Path) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.with_extension("");
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, fault: None }
    }
}

pub fn gradcheck(_: &Common, cfg: &GradcheckConfig) -> CmdResult {
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(invalid(format!("--eps must be positive, got {}", cfg.eps)));
    }
    let start = std::time::Instant::now();
    println!("gradcheck eps={:e} tolerance={:e}", cfg.eps, TOLERANCE);
    let results = run_all(cfg.eps, &Fault(cfg.fault.clone())).map_err(Failure::Validation)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<9} {:<40} {:.3e} {status}", r.suite, r.name, r.max_rel_err);
        if !r.passed() {
            failed.push(format!("{}:{}", r.suite, r.name));
        }
    }
    println!("{} checks in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("gradient check failed for {}", failed.join(", "))))
    }
}

// ---------------------------------------------------------------- render

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub scene: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub out: PathBuf,
    pub aux: bool,
    pub losses: Option<PathBuf>,
    pub normals: Option<PathBuf>,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            scene: None,
            camera: None,
            out: PathBuf::from("render.ppm"),
            aux: false,
            losses: None,
            normals: None,
            background: [1.0; 3],
        }
    }
}

pub fn render(_: &Common, cfg: &RenderConfig) -> CmdResult {
    let scene = read_scene_ply(required(&cfg.scene, "scene")?).map_err(anyhow::Error::from)?;
    let camera = read_camera_json(required(&cfg.camera, "camera")?).map_err(anyhow::Error::from)?;
    let mut opts = RasterOptions::default().with_background(Vector3::from(cfg.background));
    if cfg.losses.is_some() {
        opts = opts.with_hits();
    }
    let r = rasterize(&scene, &camera, &opts);
    ensure_parent(&cfg.out)?;
    write_ppm(&cfg.out, &r.color).map_err(anyhow::Error::from)?;
    if cfg.aux {
        let fg: Vec<f64> = r
            .depth
            .data()
            .iter()
            .zip(r.alpha.data())
            .filter(|(_, &a)| a > 0.0)
            .map(|(&d, _)| d)
            .collect();
        let lo = fg.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = fg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo < hi { (lo, hi) } else { (0.0, 1.0) };
        write_gray_ppm(&with_suffix(&cfg.out, ".depth.ppm"), &r.depth, lo, hi).map_err(anyhow::Error::from)?;
        write_gray_ppm(&with_suffix(&cfg.out, ".alpha.ppm"), &r.alpha, 0.0, 1.0).map_err(anyhow::Error::from)?;
        let normal_rgb = r.normal.map(|n| 0.5 * n + 0.5);
        write_ppm(&with_suffix(&cfg.out, ".normal.ppm"), &normal_rgb).map_err(anyhow::Error::from)?;
    }
    if let Some(path) = &cfg.losses {
        let reference = match &cfg.normals {
            Some(p) => tsr::load(p)
                .with_context(|| format!("{}", p.display()))
                .map_err(Failure::Io)?,
            None => blended_unit_normals(&r.normal),
        };
        let ld = distortion_loss(&r).map_err(anyhow::Error::from)?;
        let ln = normal_loss(&r, &reference).map_err(anyhow::Error::from)?;
        ensure_parent(path)?;
        write_csv(path, &["l_d", "l_n"], &[vec![ld, ln]]).map_err(anyhow::Error::from)?;
    }
    Ok(())
}

fn blended_unit_normals(normal: &Tensor) -> Tensor {
    let mut out = normal.clone();
    for px in out.data_mut().chunks_mut(3) {
        let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
        if n > 0.0 {
            px.iter_mut().for_each(|c| *c /= n);
        }
    }
    out
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub views: Option<PathBuf>,
    pub synthetic: Option<SyntheticViews>,
    pub heldout: Option<PathBuf>,
    pub splats: usize,
    pub iters: usize,
    pub out: PathBuf,
    pub losses: Option<PathBuf>,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub geometry_start: f64,
    pub resolution: usize,
    pub init_opacity: f64,
    pub tau: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        Self {
            views: None,
            synthetic: None,
            heldout: None,
            splats: 256,
            iters: f.iters,
            out: PathBuf::from("scene.ply"),
            losses: None,
            lambda_d: f.lambda_d,
            lambda_n: f.lambda_n,
            geometry_start: f.geometry_start,
            resolution: 64,
            init_opacity: 0.8,
            tau: UTILIZATION_TAU,
        }
    }
}

pub fn fit(_: &Common, cfg: &FitConfig) -> CmdResult {
    let (train, mut heldout) = match (&cfg.views, cfg.synthetic) {
        (Some(_), Some(_)) => return Err(invalid("give either a views directory or --synthetic, not both")),
        (Some(dir), None) => (load_views_dir(dir).map_err(anyhow::Error::from)?, Vec::new()),
        (None, Some(SyntheticViews::Sphere)) => {
            let ds = sphere_dataset(cfg.resolution);
            (ds.train, ds.heldout)
        }
        (None, None) => return Err(invalid("missing views directory (or --synthetic sphere)")),
    };
    if let Some(dir) = &cfg.heldout {
        heldout = load_views_dir(dir).map_err(anyhow::Error::from)?;
    }
    let init = init_scene_from_views(&train, cfg.splats, cfg.init_opacity)
        .context("initializing splats from foreground pixels")
        .map_err(Failure::Validation)?;
    let opts = FitOptions {
        iters: cfg.iters,
        lambda_d: cfg.lambda_d,
        lambda_n: cfg.lambda_n,
        geometry_start: cfg.geometry_start,
        ..FitOptions::default()
    };
    let start = std::time::Instant::now();
    let result = fit_splats(&train, &init, &opts).map_err(anyhow::Error::from)?;
    ensure_parent(&cfg.out)?;
    write_scene_ply(&cfg.out, &result.scene).map_err(anyhow::Error::from)?;
    let loss_path = cfg
        .losses
        .clone()
        .unwrap_or_else(|| with_suffix(&cfg.out, ".losses.csv"));
    let rows: Vec<Vec<f64>> = result
        .log
        .iter()
        .map(|r| vec![r.iter as f64, r.l1, r.ld, r.ln, r.total])
        .collect();
    write_csv(&loss_path, &["iter", "l1", "l_d", "l_n", "total"], &rows).map_err(anyhow::Error::from)?;
    let score = |views: &[RenderingInput]| -> Vec<f64> {
        let opts = RasterOptions::default().with_background(Vector3::from(FitOptions::default().background));
        views
            .iter()
            .map(|v| psnr(&rasterize(&result.scene, &v.camera, &opts).color, &v.image))
            .collect()
    };
    print_json(&json!({
        "psnr_train": score(&train),
        "psnr_heldout": score(&heldout),
        "utilization": utilization_ratio(&result.scene, cfg.tau),
        "tau": cfg.tau,
        "final": result.log.last(),
        "seconds": start.elapsed().as_secs_f64(),
    }));
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCliConfig {
    pub stage: u8,
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticShapes>,
    pub emit_dataset: Option<PathBuf>,
    pub per_class: usize,
    pub points: usize,
    pub feature_width: usize,
    pub out: PathBuf,
    pub resume: bool,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub bands: usize,
    pub no_anchor_injection: bool,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DenoiserConfig::default();
        Self {
            stage: 1,
            dataset: None,
            synthetic: None,
            emit_dataset: None,
            per_class: 64,
            points: 64,
            feature_width: 4,
            out: PathBuf::from("checkpoint"),
            resume: false,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            drop_prob: t.drop_prob,
            log_every: t.log_every,
            checkpoint_every: t.checkpoint_every,
            width: d.width,
            layers: d.layers,
            heads: d.heads,
            bands: 4,
            no_anchor_injection: false,
        }
    }
}

/// One entry of a dataset's `index.json`.
#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: PathBuf,
    label: usize,
}

struct Cloud {
    points: Vec<Vector3<f64>>,
    features: Vec<Vec<f64>>,
    label: usize,
}

fn emit_dataset(dir: &Path, clouds: &[Cloud]) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", dir.display())))?;
    let mut index = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let name = ShapeClass::from_label(c.label).map(|s| s.name()).unwrap_or("cloud");
        let file = PathBuf::from(format!("{i:04}_{name}.ply"));
        write_cloud_ply(&dir.join(&file), &c.points, Some(&c.features)).map_err(anyhow::Error::from)?;
        index.push(IndexEntry { file, label: c.label });
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", path.display())))?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Cloud>, Failure> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", path.display())))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text)
        .map_err(|e| Failure::Io(anyhow::anyhow!("{}:{}: {e}", path.display(), e.line())))?;
    if index.is_empty() {
        return Err(invalid(format!("{}: dataset is empty", path.display())));
    }
    index
        .iter()
        .map(|e| {
            let (points, features) = read_cloud_ply(&dir.join(&e.file)).map_err(anyhow::Error::from)?;
            Ok(Cloud {
                points,
                features,
                label: e.label,
            })
        })
        .collect()
}

fn to_samples(clouds: &[Cloud], bounds: &Aabb, stage: u8) -> Result<Vec<TrainSample>, Failure> {
    let n = clouds[0].points.len();
    let fw = clouds[0].features.first().map_or(0, Vec::len);
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.points.len() != n {
                return Err(invalid(format!(
                    "cloud {i} has {} points, expected {n}",
                    c.points.len()
                )));
            }
            let features = if stage == 2 {
                if c.features.iter().any(|f| f.len() != fw) || fw == 0 {
                    return Err(invalid(format!(
                        "cloud {i}: stage 2 needs {fw} feature columns per point"
                    )));
                }
                Some(Tensor::new(&[n, fw], c.features.concat()).map_err(anyhow::Error::from)?)
            } else {
                None
            };
            let normalized: Vec<_> = c.points.iter().map(|p| bounds.normalize(p)).collect();
            Ok(TrainSample {
                anchors: points_to_tensor(&normalized),
                features,
                label: c.label,
            })
        })
        .collect()
}

pub fn train(common: &Common, cfg: &TrainCliConfig) -> CmdResult {
    if cfg.stage != 1 && cfg.stage != 2 {
        return Err(invalid(format!("--stage must be 1 or 2, got {}", cfg.stage)));
    }
    let (clouds, bounds) = match (&cfg.dataset, cfg.synthetic) {
        (Some(_), Some(_)) => return Err(invalid("give either a dataset directory or --synthetic, not both")),
        (Some(dir), None) => {
            let clouds = load_dataset(dir)?;
            let all: Vec<_> = clouds.iter().flat_map(|c| c.points.iter().copied()).collect();
            (clouds, Aabb::from_points(&all))
        }
        (None, Some(SyntheticShapes::Shapes)) => {
            let clouds: Vec<Cloud> = shape_dataset(cfg.per_class, cfg.points, cfg.feature_width, common.seed)
                .into_iter()
                .map(|s| Cloud {
                    label: s.class.label(),
                    points: s.points,
                    features: s.features,
                })
                .collect();
            if let Some(dir) = &cfg.emit_dataset {
                emit_dataset(dir, &clouds)?;
            }
            (clouds, Aabb::unit())
        }
        (None, None) => return Err(invalid("missing dataset directory (or --synthetic shapes)")),
    };
    let samples = to_samples(&clouds, &bounds, cfg.stage)?;
    let num_classes = clouds.iter().map(|c| c.label).max().unwrap_or(0) + 1;
    let config = TrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        drop_prob: cfg.drop_prob,
        seed: common.seed,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
    };
    let mut trainer = if cfg.resume {
        let mut t = Trainer::load(&cfg.out).map_err(anyhow::Error::from)?;
        t.config.steps = cfg.steps;
        t
    } else {
        let den = DenoiserConfig {
            width: cfg.width,
            layers: cfg.layers,
            heads: cfg.heads,
            num_classes,
            anchor_injection: !cfg.no_anchor_injection,
            ..DenoiserConfig::default()
        };
        let n = samples[0].anchors.shape()[0];
        let model_cfg = if cfg.stage == 1 {
            ModelConfig::stage1(n, den, bounds, common.seed)
        } else {
            let fw = samples[0].features.as_ref().map_or(0, |f| f.shape()[1]);
            ModelConfig::stage2(n, fw, cfg.bands, den, bounds, common.seed)
        };
        Trainer::new(FlowModel::new(model_cfg).map_err(anyhow::Error::from)?, config)
    };
    if trainer.model.config.stage != cfg.stage {
        return Err(invalid(format!(
            "checkpoint is stage {}, --stage is {}",
            trainer.model.config.stage, cfg.stage
        )));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", cfg.out.display())))?;
    let log_path = cfg.out.join("loss.csv");
    let mut rows: Vec<Vec<f64>> = if cfg.resume {
        read_loss_log(&log_path)?
    } else {
        Vec::new()
    };
    let first = trainer.step;
    let log = trainer
        .run(&samples, Some(&cfg.out), |r| {
            eprintln!("step {} loss {:.6} drop_rate {:.4}", r.step + 1, r.loss, r.drop_rate)
        })
        .map_err(anyhow::Error::from)?;
    rows.extend(log.iter().map(|r| vec![r.step as f64, r.loss, r.drop_rate]));
    trainer.save(&cfg.out).map_err(anyhow::Error::from)?;
    write_csv(&log_path, &["step", "loss", "drop_rate"], &rows).map_err(anyhow::Error::from)?;
    print_json(&json!({
        "stage": cfg.stage,
        "steps": trainer.step,
        "trained_from": first,
        "final_loss": log.last().map(|r| r.loss),
        "drop_rate": trainer.drop_rate(),
        "parameters": trainer.model.store.scalar_count(),
    }));
    Ok(())
}

fn read_loss_log(path: &Path) -> Result<Vec<Vec<f64>>, Failure> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            line.split(',')
                .map(|c| c.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Io(anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------- sample / edit

/// Stage-2 seed when no explicit `--resample-h` is given.
fn feature_seed(seed: u64, resample: Option<u64>) -> u64 {
    resample.unwrap_or(seed ^ 0xD1B5_4A32_D192_ED03)
}

fn load_model(path: &Path) -> Result<FlowModel, Failure> {
    FlowModel::load(path).map_err(|e| Failure::from(anyhow::Error::from(e)))
}

/// Runs stage 2 on world-space anchors and writes both files.
#[allow(clippy::too_many_arguments)]
fn write_featured(
    stage2: &FlowModel,
    world: &[Vector3<f64>],
    label: Option<usize>,
    seed: u64,
    steps: usize,
    cfg: Option<f64>,
    prefix: &Path,
) -> CmdResult {
    let normalized: Vec<_> = world.iter().map(|p| stage2.config.bounds.normalize(p)).collect();
    let features = sample_features(stage2, &points_to_tensor(&normalized), label, seed, steps, cfg)
        .map_err(anyhow::Error::from)?;
    if !features.is_finite() {
        return Err(Failure::Numeric(anyhow::anyhow!(
            "stage 2 produced non-finite features"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..world.len()).map(|i| features.row(i).to_vec()).collect();
    ensure_parent(prefix)?;
    write_cloud_ply(&PathBuf::from(format!("{}.x.ply", prefix.display())), world, None).map_err(anyhow::Error::from)?;
    write_cloud_ply(
        &PathBuf::from(format!("{}.xh.ply", prefix.display())),
        world,
        Some(&rows),
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

fn guidance(cfg: f64) -> Option<f64> {
    (cfg != 1.0).then_some(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub label: Option<usize>,
    pub steps: usize,
    pub cfg: f64,
    pub out: PathBuf,
    pub resample_h: Option<u64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            stage1: None,
            stage2: None,
            label: None,
            steps: 250,
            cfg: 4.0,
            out: PathBuf::from("sample"),
            resample_h: None,
        }
    }
}

pub fn sample(common: &Common, cfg: &SampleConfig) -> CmdResult {
    let s1 = load_model(required(&cfg.stage1, "stage1")?)?;
    let s2 = load_model(required(&cfg.stage2, "stage2")?)?;
    check_cascade(&s1, &s2).map_err(|e| invalid(e.to_string()))?;
    s2.check_label(cfg.label).map_err(|e| invalid(e.to_string()))?;
    let anchors =
        sample_anchors(&s1, cfg.label, common.seed, cfg.steps, guidance(cfg.cfg)).map_err(anyhow::Error::from)?;
    if !anchors.is_finite() {
        return Err(Failure::Numeric(anyhow::anyhow!("stage 1 produced non-finite anchors")));
    }
    let world: Vec<_> = tensor_to_points(&anchors)
        .iter()
        .map(|p| s1.config.bounds.denormalize(p))
        .collect();
    let seed2 = feature_seed(common.seed, cfg.resample_h);
    write_featured(&s2, &world, cfg.label, seed2, cfg.steps, guidance(cfg.cfg), &cfg.out)
}

/// Rigid edit of the anchors inside an axis-aligned box (all anchors when
/// the box is omitted). Rotation is about `pivot`, defaulting to the box
/// centre or the origin.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionEdit {
    pub min: Option<[f64; 3]>,
    pub max: Option<[f64; 3]>,
    pub translate: [f64; 3],
    pub axis: Option<[f64; 3]>,
    pub degrees: f64,
    pub pivot: Option<[f64; 3]>,
}

type Pivoted = (Rotation3<f64>, Vector3<f64>);

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditFile {
    pub edits: Vec<RegionEdit>,
}

impl RegionEdit {
    fn selects(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min.unwrap_or([f64::NEG_INFINITY; 3]);
        let hi = self.max.unwrap_or([f64::INFINITY; 3]);
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Rotation and pivot, or `None` for a zero angle.
    fn rotation(&self) -> Result<Option<Pivoted>, String> {
        if self.degrees == 0.0 {
            return Ok(None);
        }
        let axis = Vector3::from(self.axis.ok_or("rotation needs an `axis`")?);
        let axis = Unit::try_new(axis, 1e-12).ok_or("rotation axis must be non-zero")?;
        let pivot = match (self.pivot, self.min, self.max) {
            (Some(p), _, _) => Vector3::from(p),
            (None, Some(lo), Some(hi)) => (Vector3::from(lo) + Vector3::from(hi)) * 0.5,
            _ => Vector3::zeros(),
        };
        Ok(Some((
            Rotation3::from_axis_angle(&axis, self.degrees.to_radians()),
            pivot,
        )))
    }
}

/// Applies every edit in order; returns the number of anchors each selected.
pub fn apply_edits(points: &mut [Vector3<f64>], file: &EditFile) -> Result<Vec<usize>, String> {
    let mut counts = Vec::with_capacity(file.edits.len());
    for e in &file.edits {
        let rot = e.rotation()?;
        let shift = Vector3::from(e.translate);
        let selected: Vec<usize> = (0..points.len()).filter(|&i| e.selects(&points[i])).collect();
        for &i in &selected {
            let mut p = points[i];
            if let Some((r, c)) = &rot {
                p = r * (p - c) + c;
            }
            if shift != Vector3::zeros() {
                p += shift;
            }
            points[i] = p;
        }
        counts.push(selected.len());
    }
    Ok(counts)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub anchors: Option<PathBuf>,
    pub transform: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub label: Option<usize>,
    pub steps: usize,
    pub cfg: f64,
    pub out: PathBuf,
    pub resample_h: Option<u64>,
}

impl Default for EditConfig {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            anchors: None,
            transform: None,
            stage2: None,
            label: None,
            steps: s.steps,
            cfg: s.cfg,
            out: PathBuf::from("edited"),
            resample_h: None,
        }
    }
}

pub fn edit(common: &Common, cfg: &EditConfig) -> CmdResult {
    let (mut points, _) = read_cloud_ply(required(&cfg.anchors, "anchors")?).map_err(anyhow::Error::from)?;
    let tpath = required(&cfg.transform, "transform")?;
    let text = fs::read_to_string(tpath).map_err(|e| Failure::Io(anyhow::anyhow!("{}: {e}", tpath.display())))?;
    let file: EditFile = serde_json::from_str(&text)
        .map_err(|e| Failure::Io(anyhow::anyhow!("{}:{}: {e}", tpath.display(), e.line())))?;
    let s2 = load_model(required(&cfg.stage2, "stage2")?)?;
    if s2.config.stage != 2 {
        return Err(invalid("--stage2 must point at a stage-2 checkpoint"));
    }
    s2.check_label(cfg.label).map_err(|e| invalid(e.to_string()))?;
    if points.len() != s2.config.points {
        return Err(invalid(format!(
            "{} has {} anchors, the stage-2 model expects {}",
            required(&cfg.anchors, "anchors")?.display(),
            points.len(),
            s2.config.points
        )));
    }
    let counts = apply_edits(&mut points, &file).map_err(|e| invalid(format!("{}: {e}", tpath.display())))?;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            eprintln!("warning: edit {i} selects no anchors");
        }
    }
    let seed2 = feature_seed(common.seed, cfg.resample_h);
    write_featured(&s2, &points, cfg.label, seed2, cfg.steps, guidance(cfg.cfg), &cfg.out)
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub views: Option<PathBuf>,
    pub tau: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            input: None,
            reference: None,
            views: None,
            tau: UTILIZATION_TAU,
        }
    }
}

enum Loaded {
    Scene(SplatScene),
    Cloud(Vec<Vector3<f64>>),
}

impl Loaded {
    fn points(&self) -> Vec<Vector3<f64>> {
        match self {
            Loaded::Scene(s) => s.splats.iter().map(|g| g.center).collect(),
            Loaded::Cloud(p) => p.clone(),
        }
    }
}

fn load_any(path: &Path) -> Result<Loaded, Failure> {
    let table = read_ply(path).map_err(anyhow::Error::from)?;
    if table.column("opacity").is_some() {
        Ok(Loaded::Scene(read_scene_ply(path).map_err(anyhow::Error::from)?))
    } else {
        Ok(Loaded::Cloud(read_cloud_ply(path).map_err(anyhow::Error::from)?.0))
    }
}

pub fn metrics(_: &Common, cfg: &MetricsConfig) -> CmdResult {
    let input = load_any(required(&cfg.input, "input")?)?;
    let mut report = serde_json::Map::new();
    match &input {
        Loaded::Scene(s) => {
            report.insert("kind".into(), json!("scene"));
            report.insert("utilization".into(), json!(utilization_ratio(s, cfg.tau)));
            report.insert("tau".into(), json!(cfg.tau));
        }
        Loaded::Cloud(p) => {
            report.insert("kind".into(), json!("cloud"));
            report.insert("points".into(), json!(p.len()));
        }
    }
    if let Some(r) = &cfg.reference {
        let reference = load_any(r)?;
        report.insert(
            "chamfer".into(),
            json!({
                "value": chamfer_distance(&input.points(), &reference.points()),
                "convention": CHAMFER_CONVENTION,
            }),
        );
    }
    if let Some(dir) = &cfg.views {
        let Loaded::Scene(scene) = &input else {
            return Err(invalid("per-view PSNR needs a splat scene, not a point cloud"));
        };
        let views = load_views_dir(dir).map_err(anyhow::Error::from)?;
        let opts = RasterOptions::default();
        let scores: Vec<f64> = views
            .iter()
            .map(|v| psnr(&rasterize(scene, &v.camera, &opts).color, &v.image))
            .collect();
        report.insert("psnr".into(), json!(scores));
    }
    print_json(&serde_json::Value::Object(report));
    Ok(())
}
