use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{gaussian_noise, ode_sample, Branch};
use super::schedule::{fm_loss_var, forward_interpolate, Schedule, T_MIN};
use super::FlowError;
use crate::autodiff::{adam_step, tsr, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::geometry::Aabb;
use crate::nets::{Denoiser, DenoiserConfig, ParamStore};

/// Architecture and data layout of one flow model, stored as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 1 generates anchors, 2 generates per-anchor features.
    pub stage: u8,
    pub schedule: Schedule,
    pub points: usize,
    pub feature_width: usize,
    pub denoiser: DenoiserConfig,
    /// Maps normalized anchors back to world space.
    pub bounds: Aabb,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn stage1(points: usize, denoiser: DenoiserConfig, bounds: Aabb, init_seed: u64) -> Self {
        Self {
            stage: 1,
            schedule: Schedule::Gvp,
            points,
            feature_width: 0,
            denoiser: DenoiserConfig {
                in_width: 3,
                anchor_bands: None,
                ..denoiser
            },
            bounds,
            init_seed,
        }
    }

    pub fn stage2(
        points: usize,
        feature_width: usize,
        bands: usize,
        denoiser: DenoiserConfig,
        bounds: Aabb,
        init_seed: u64,
    ) -> Self {
        Self {
            stage: 2,
            schedule: Schedule::Gvp,
            points,
            feature_width,
            denoiser: DenoiserConfig {
                in_width: feature_width,
                anchor_bands: Some(bands),
                ..denoiser
            },
            bounds,
            init_seed,
        }
    }

    pub fn token_width(&self) -> usize {
        if self.stage == 1 {
            3
        } else {
            self.feature_width
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::Config(m));
        match self.stage {
            1 if self.denoiser.in_width != 3 || self.denoiser.anchor_bands.is_some() => {
                bad("stage 1 denoises 3-wide anchor tokens without anchor injection".into())
            }
            2 if self.denoiser.in_width != self.feature_width || self.denoiser.anchor_bands.is_none() => {
                bad("stage 2 denoises feature tokens and needs anchor bands".into())
            }
            1 | 2 => {
                if self.points == 0 {
                    return bad("points must be positive".into());
                }
                self.denoiser.validate()?;
                Ok(())
            }
            s => bad(format!("stage must be 1 or 2, got {s}")),
        }
    }
}

/// A denoiser together with its parameters.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Denoiser,
}

impl FlowModel {
    pub fn new(config: ModelConfig) -> Result<Self, FlowError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = Denoiser::new(&mut store, &config.denoiser, "denoiser", config.init_seed)?;
        Ok(Self { config, store, net })
    }

    /// Velocity prediction without gradient tracking.
    pub fn velocity(
        &self,
        z: &Tensor,
        t: f64,
        label: Option<usize>,
        anchors: Option<&Tensor>,
    ) -> Result<Tensor, FlowError> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        Ok(self
            .net
            .forward(&p, tape.constant(z.clone()), t, label, anchors)?
            .value())
    }

    pub fn check_label(&self, label: Option<usize>) -> Result<(), FlowError> {
        match label {
            Some(l) if l >= self.config.denoiser.num_classes => Err(FlowError::Config(format!(
                "label {l} outside the trained classes 0..{}",
                self.config.denoiser.num_classes
            ))),
            _ => Ok(()),
        }
    }

    /// Writes `config.json` and one `.tsr` per parameter.
    pub fn save(&self, dir: &Path) -> Result<(), FlowError> {
        std::fs::create_dir_all(dir).map_err(|e| FlowError::io(dir, e))?;
        let path = dir.join("config.json");
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&path, json).map_err(|e| FlowError::io(&path, e))?;
        self.store.save_dir(dir)?;
        Ok(())
    }

    /// Rebuilds the architecture from `config.json`, then loads the weights;
    /// a weight whose shape disagrees with the config is an error.
    pub fn load(dir: &Path) -> Result<Self, FlowError> {
        let path = dir.join("config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| FlowError::io(&path, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut model = Self::new(config)?;
        model.store.load_dir(dir)?;
        Ok(model)
    }
}

/// One training cloud: normalized anchors, optional per-anchor features and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub anchors: Tensor,
    pub features: Option<Tensor>,
    pub label: usize,
}

impl TrainSample {
    fn target(&self, stage: u8) -> Result<&Tensor, FlowError> {
        if stage == 1 {
            Ok(&self.anchors)
        } else {
            self.features
                .as_ref()
                .ok_or_else(|| FlowError::Data("stage-2 training needs feature columns".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the class label by the null condition.
    pub drop_prob: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            drop_prob: 0.1,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Fraction of condition draws dropped so far.
    pub drop_rate: f64,
}

/// Model, optimizer state and counters; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub step: usize,
    pub drops: u64,
    pub draws: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    step: usize,
    drops: u64,
    draws: u64,
    adam_step: u64,
    config: TrainConfig,
}

/// Each step draws from its own stream so a resumed run replays exactly.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Self {
        let adam = AdamState::new(model.store.tensors());
        Self {
            model,
            adam,
            config,
            step: 0,
            drops: 0,
            draws: 0,
        }
    }

    pub fn drop_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.drops as f64 / self.draws as f64
        }
    }

    /// One Adam step on a minibatch; returns the mean loss before the update.
    pub fn train_step(&mut self, data: &[TrainSample]) -> Result<f64, FlowError> {
        if data.is_empty() {
            return Err(FlowError::Data("empty training set".into()));
        }
        let stage = self.model.config.stage;
        let schedule = self.model.config.schedule;
        let mut rng = step_rng(self.config.seed, self.step);
        let tape = Tape::new();
        let p = self.model.store.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        let batch = self.config.batch.max(1);
        for _ in 0..batch {
            let sample = &data[rng.random_range(0..data.len())];
            let x0 = sample.target(stage)?;
            if x0.shape() != [self.model.config.points, self.model.config.token_width()] {
                return Err(FlowError::Data(format!(
                    "sample shape {:?}, model expects [{}, {}]",
                    x0.shape(),
                    self.model.config.points,
                    self.model.config.token_width()
                )));
            }
            let t = rng.random_range(T_MIN..1.0 - T_MIN);
            let eps = gaussian_noise(x0.shape(), rng.random());
            let dropped = rng.random::<f64>() < self.config.drop_prob;
            self.draws += 1;
            self.drops += dropped as u64;
            let label = if dropped { None } else { Some(sample.label) };
            let z = forward_interpolate(x0, &eps, t, schedule)?;
            let anchors = (stage == 2).then_some(&sample.anchors);
            let v = self.model.net.forward(&p, tape.constant(z), t, label, anchors)?;
            let loss = fm_loss_var(v, x0, &eps, t, schedule)?;
            total = Some(match total {
                Some(acc) => acc.add(loss)?,
                None => loss,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / batch as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(FlowError::Diverged { step: self.step });
        }
        let grads = p.grads(&tape.backward(loss)?);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(FlowError::Diverged { step: self.step });
        }
        let cfg = AdamConfig {
            lr: self.config.lr,
            ..AdamConfig::default()
        };
        adam_step(self.model.store.tensors_mut(), &grads, &mut self.adam, &cfg)?;
        self.step += 1;
        Ok(value)
    }

    /// Trains until `config.steps`, logging every `log_every` steps and
    /// checkpointing into `checkpoint_dir` when configured.
    pub fn run(
        &mut self,
        data: &[TrainSample],
        checkpoint_dir: Option<&Path>,
        mut on_log: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>, FlowError> {
        let mut log = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step(data)?;
            let rec = StepRecord {
                step: self.step - 1,
                loss,
                drop_rate: self.drop_rate(),
            };
            log.push(rec);
            if self.config.log_every > 0 && self.step.is_multiple_of(self.config.log_every) {
                on_log(&rec);
            }
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                    self.save(dir)?;
                }
            }
        }
        Ok(log)
    }

    /// Model files plus `adam/m.<name>.tsr`, `adam/v.<name>.tsr` and `trainer.json`.
    pub fn save(&self, dir: &Path) -> Result<(), FlowError> {
        self.model.save(dir)?;
        let adam_dir = dir.join("adam");
        std::fs::create_dir_all(&adam_dir).map_err(|e| FlowError::io(&adam_dir, e))?;
        for (i, name) in self.model.store.names().iter().enumerate() {
            for (tag, t) in [("m", &self.adam.m[i]), ("v", &self.adam.v[i])] {
                let path = adam_dir.join(format!("{tag}.{name}.tsr"));
                tsr::save(&path, t).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
            }
        }
        let meta = TrainerMeta {
            step: self.step,
            drops: self.drops,
            draws: self.draws,
            adam_step: self.adam.step,
            config: self.config.clone(),
        };
        let path = dir.join("trainer.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(|e| FlowError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FlowError> {
        let model = FlowModel::load(dir)?;
        let path = dir.join("trainer.json");
        let text = std::fs::read_to_string(&path).map_err(|e| FlowError::io(&path, e))?;
        let meta: TrainerMeta =
            serde_json::from_str(&text).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut adam = AdamState::new(model.store.tensors());
        adam.step = meta.adam_step;
        for (i, name) in model.store.names().iter().enumerate() {
            for tag in ["m", "v"] {
                let path = dir.join("adam").join(format!("{tag}.{name}.tsr"));
                let t = tsr::load(&path).map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
                let slot = if tag == "m" { &mut adam.m[i] } else { &mut adam.v[i] };
                if t.shape() != slot.shape() {
                    return Err(FlowError::Checkpoint(format!("{}: shape mismatch", path.display())));
                }
                *slot = t;
            }
        }
        Ok(Self {
            model,
            adam,
            config: meta.config,
            step: meta.step,
            drops: meta.drops,
            draws: meta.draws,
        })
    }
}

/// Mean conditional flow-matching loss over a fixed grid of times and seeded
/// noise, for comparing models (e.g. with and without anchor injection).
pub fn validation_loss(model: &FlowModel, data: &[TrainSample], times: &[f64], seed: u64) -> Result<f64, FlowError> {
    let stage = model.config.stage;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, sample) in data.iter().enumerate() {
        let x0 = sample.target(stage)?;
        for (j, &t) in times.iter().enumerate() {
            let eps = gaussian_noise(
                x0.shape(),
                seed ^ ((i * times.len() + j) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let z = forward_interpolate(x0, &eps, t, model.config.schedule)?;
            let anchors = (stage == 2).then_some(&sample.anchors);
            let tape = Tape::new();
            let p = model.store.bind(&tape);
            let v = model
                .net
                .forward(&p, tape.constant(z), t, Some(sample.label), anchors)?;
            total += fm_loss_var(v, x0, &eps, t, model.config.schedule)?.item();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Anchors `[N, 3]` (normalized) with per-anchor features `[N, C_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPointCloud {
    pub anchors: Tensor,
    pub features: Tensor,
    pub bounds: Aabb,
}

impl LatentPointCloud {
    pub fn world_anchors(&self) -> Vec<nalgebra::Vector3<f64>> {
        crate::geometry::tensor_to_points(&self.anchors)
            .iter()
            .map(|p| self.bounds.denormalize(p))
            .collect()
    }
}

/// Stage-1 Euler sample of `N` normalized anchors.
pub fn sample_anchors(
    model: &FlowModel,
    label: Option<usize>,
    seed: u64,
    steps: usize,
    cfg: Option<f64>,
) -> Result<Tensor, FlowError> {
    if model.config.stage != 1 {
        return Err(FlowError::Config("anchors come from a stage-1 model".into()));
    }
    model.check_label(label)?;
    let cfg = if label.is_some() { cfg } else { None };
    ode_sample(
        |z, t, branch| {
            let l = if branch == Branch::Conditional { label } else { None };
            model.velocity(z, t, l, None)
        },
        steps,
        cfg,
        seed,
        &[model.config.points, 3],
    )
}

/// Stage-2 Euler sample of features on fixed anchors. Guidance drops only
/// the class label; the anchors condition both branches.
pub fn sample_features(
    model: &FlowModel,
    anchors: &Tensor,
    label: Option<usize>,
    seed: u64,
    steps: usize,
    cfg: Option<f64>,
) -> Result<Tensor, FlowError> {
    if model.config.stage != 2 {
        return Err(FlowError::Config("features come from a stage-2 model".into()));
    }
    model.check_label(label)?;
    if anchors.shape() != [model.config.points, 3] {
        return Err(FlowError::Config(format!(
            "anchors {:?} do not match the model's {} points",
            anchors.shape(),
            model.config.points
        )));
    }
    let cfg = if label.is_some() { cfg } else { None };
    ode_sample(
        |z, t, branch| {
            let l = if branch == Branch::Conditional { label } else { None };
            model.velocity(z, t, l, Some(anchors))
        },
        steps,
        cfg,
        seed,
        &[model.config.points, model.config.feature_width],
    )
}

/// Checks that a stage-1 and a stage-2 model can be chained.
pub fn check_cascade(stage1: &FlowModel, stage2: &FlowModel) -> Result<(), FlowError> {
    if stage1.config.stage != 1 || stage2.config.stage != 2 {
        return Err(FlowError::Config("cascade needs a stage-1 then a stage-2 model".into()));
    }
    if stage1.config.points != stage2.config.points {
        return Err(FlowError::Config(format!(
            "stage 1 makes {} points, stage 2 expects {}",
            stage1.config.points, stage2.config.points
        )));
    }
    if stage1.config.denoiser.num_classes != stage2.config.denoiser.num_classes {
        return Err(FlowError::Config("stage models disagree on the class count".into()));
    }
    Ok(())
}

/// Anchors from stage 1, then features on those anchors from stage 2.
pub fn cascade_sample(
    stage1: &FlowModel,
    stage2: &FlowModel,
    label: Option<usize>,
    seeds: (u64, u64),
    steps: usize,
    cfg: Option<f64>,
) -> Result<LatentPointCloud, FlowError> {
    check_cascade(stage1, stage2)?;
    let anchors = sample_anchors(stage1, label, seeds.0, steps, cfg)?;
    let features = sample_features(stage2, &anchors, label, seeds.1, steps, cfg)?;
    Ok(LatentPointCloud {
        anchors,
        features,
        bounds: stage1.config.bounds,
    })
}
