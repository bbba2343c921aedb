//! Finite-difference gradient suites behind `surfelflow gradcheck`.
//!
//! Each check compares a tape or rasterizer gradient with central
//! differences and reports `max |analytic − numeric| / max(1, |analytic|)`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::geometry::{Camera, CameraPose, PinholeIntrinsics};
use crate::nets::{Denoiser, DenoiserConfig, ParamStore};
use crate::surfel::{
    distortion_loss, distortion_loss_grad, normal_loss, normal_loss_grad, rasterize, rasterize_backward, OutputGrads,
    RasterOptions, SplatGrad, SplatScene, SurfelGaussian,
};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Deliberately corrupts one check (its analytic gradient is negated) to
/// exercise the failure path.
#[derive(Clone, Debug, Default)]
pub struct Fault(pub Option<String>);

impl Fault {
    fn sign(&self, name: &str) -> f64 {
        match &self.0 {
            Some(f) if f == name => -1.0,
            _ => 1.0,
        }
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

type OpFn<'a> = dyn for<'t> Fn(&'t Tape, Var<'t>) -> anyhow::Result<Var<'t>> + 'a;

fn tape_check(f: &OpFn<'_>, x: &Tensor, eps: f64, sign: f64) -> anyhow::Result<f64> {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let analytic: Vec<f64> = tape
        .backward(y)?
        .get_or_zeros(xv)
        .data()
        .iter()
        .map(|g| sign * g)
        .collect();
    let eval = |t: &Tensor| -> anyhow::Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, tape.constant(t.clone()))?.item())
    };
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(rel_err(&analytic, &numeric))
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches buffer")
}

/// Every autodiff op over five seeds and shapes up to 2×3×4.
pub fn autodiff_suite(eps: f64, fault: &Fault) -> anyhow::Result<Vec<CheckResult>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name.to_string(), e)),
    };
    let shapes: [&[usize]; 3] = [&[4], &[3, 4], &[2, 3, 4]];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        for shape in shapes {
            let x = uniform(shape, &mut rng, -1.5, 1.5);
            let pos = uniform(shape, &mut rng, 0.5, 2.0);
            let other = uniform(shape, &mut rng, -1.0, 1.0);
            let weights = uniform(shape, &mut rng, -1.0, 1.0);
            let last = *shape.last().expect("non-empty shape");
            let row = uniform(&[last], &mut rng, 0.5, 1.5);
            let mat = uniform(&[last, 3], &mut rng, -1.0, 1.0);
            let mat_w = uniform(&[shape.iter().product::<usize>() / last, 3], &mut rng, -1.0, 1.0);

            let mut run = |name: &str, input: &Tensor, f: &OpFn<'_>| -> anyhow::Result<()> {
                let e = tape_check(f, input, eps, fault.sign(name))?;
                record(name, e);
                Ok(())
            };
            run("add", &x, &|tp, v| {
                Ok(v.add(tp.constant(other.clone()))?
                    .mul(tp.constant(weights.clone()))?
                    .sum_all())
            })?;
            run("add_broadcast", &row, &|tp, v| {
                Ok(tp
                    .constant(x.clone())
                    .add(v)?
                    .mul(tp.constant(weights.clone()))?
                    .sum_all())
            })?;
            run("sub", &x, &|tp, v| {
                Ok(tp
                    .constant(other.clone())
                    .sub(v)?
                    .mul(tp.constant(weights.clone()))?
                    .sum_all())
            })?;
            run("mul", &x, &|tp, v| {
                Ok(v.mul(v)?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("div", &pos, &|tp, v| {
                Ok(tp
                    .constant(other.clone())
                    .div(v)?
                    .mul(tp.constant(weights.clone()))?
                    .sum_all())
            })?;
            run("exp", &x, &|tp, v| {
                Ok(v.exp().mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("log", &pos, &|tp, v| {
                Ok(v.log()?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("sqrt", &pos, &|tp, v| {
                Ok(v.sqrt()?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("square", &x, &|tp, v| {
                Ok(v.square()?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("tanh", &x, &|tp, v| {
                Ok(v.tanh().mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("sigmoid", &x, &|tp, v| {
                Ok(v.sigmoid().mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("silu", &x, &|tp, v| {
                Ok(v.silu().mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("scale", &x, &|tp, v| {
                Ok(v.scale(-2.5)
                    .add_scalar(1.0)
                    .mul(tp.constant(weights.clone()))?
                    .sum_all())
            })?;
            run("sum", &x, &|_, v| Ok(v.sum(0)?.exp().sum_all()))?;
            run("mean", &x, &|_, v| Ok(v.mean(shape.len() - 1)?.exp().sum_all()))?;
            run("mean_all", &x, &|_, v| Ok(v.square()?.mean_all()))?;
            run("reshape", &x, &|tp, v| {
                Ok(v.reshape(&[x.len()])?
                    .mul(tp.constant(weights.reshaped(&[x.len()])?))?
                    .exp()
                    .sum_all())
            })?;
            run("concat", &x, &|tp, v| {
                Ok(concat(&[v, tp.constant(other.clone())], 0)?.exp().sum_all())
            })?;
            run("slice", &x, &|_, v| {
                Ok(v.slice(shape.len() - 1, 1, last)?.exp().sum_all())
            })?;
            run("softmax", &x, &|tp, v| {
                Ok(v.softmax()?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("layer_norm", &x, &|tp, v| {
                Ok(v.layer_norm(1e-6)?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            run("l2_normalize", &x, &|tp, v| {
                Ok(v.l2_normalize(1e-9)?.mul(tp.constant(weights.clone()))?.sum_all())
            })?;
            if shape.len() >= 2 {
                let flat = shape.iter().product::<usize>() / last;
                run("transpose", &x, &|_, v| Ok(v.transpose()?.exp().sum_all()))?;
                run("matmul", &x, &|tp, v| {
                    let y = v.reshape(&[flat, last])?.matmul(tp.constant(mat.clone()))?;
                    Ok(y.mul(tp.constant(mat_w.clone()))?.sum_all())
                })?;
                run("matmul_rhs", &mat, &|tp, v| {
                    let y = tp.constant(x.reshaped(&[flat, last])?).matmul(v)?;
                    Ok(y.mul(tp.constant(mat_w.clone()))?.sum_all())
                })?;
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, e)| CheckResult {
            suite: "autodiff",
            name,
            max_rel_err: e,
        })
        .collect())
}

fn check_camera() -> Camera {
    Camera::new(
        CameraPose::identity(),
        PinholeIntrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).expect("valid intrinsics"),
    )
}

/// Depth-separated, slightly tilted splats wide enough to cover the image,
/// so no sort order or cut-off flips under small perturbations.
fn layered_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatScene {
    SplatScene::new(
        (0..n)
            .map(|k| {
                SurfelGaussian::new(
                    Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        3.0 + 0.6 * k as f64,
                    ),
                    [
                        1.0,
                        rng.random_range(-0.025..0.025),
                        rng.random_range(-0.025..0.025),
                        rng.random_range(-0.4..0.4),
                    ],
                    [rng.random_range(0.7..1.2), rng.random_range(0.7..1.2)],
                    rng.random_range(0.2..0.9),
                    Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
                )
                .expect("valid splat")
            })
            .collect(),
    )
}

struct Probe {
    wc: Vec<f64>,
    wa: Vec<f64>,
    wd: Vec<f64>,
    wn: Vec<f64>,
    target: Tensor,
}

const PROBE_LD: f64 = 3.0;
const PROBE_LN: f64 = 0.7;

impl Probe {
    fn new(rng: &mut ChaCha8Rng, px: usize) -> Self {
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let wc = r(3 * px);
        let wa = r(px);
        let wd = r(px).into_iter().map(|x| 0.2 * x).collect();
        let wn = r(3 * px);
        let target = r(3 * px)
            .chunks(3)
            .flat_map(|c| {
                let v = Vector3::new(c[0], c[1], c[2] - 2.0).normalize();
                [v.x, v.y, v.z]
            })
            .collect();
        Self {
            wc,
            wa,
            wd,
            wn,
            target: Tensor::new(&[16, 16, 3], target).expect("shape matches buffer"),
        }
    }

    fn loss(&self, scene: &SplatScene, cam: &Camera) -> f64 {
        let r = rasterize(scene, cam, &RasterOptions::default().with_hits());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.wc, r.color.data())
            + dot(&self.wa, r.alpha.data())
            + dot(&self.wd, r.depth.data())
            + dot(&self.wn, r.normal.data())
            + PROBE_LD * distortion_loss(&r).expect("hits retained")
            + PROBE_LN * normal_loss(&r, &self.target).expect("hits retained")
    }

    fn grad(&self, scene: &SplatScene, cam: &Camera) -> Vec<SplatGrad> {
        let r = rasterize(scene, cam, &RasterOptions::default().with_hits());
        let mut hg = distortion_loss_grad(&r, PROBE_LD).expect("hits retained");
        hg.add_assign(&normal_loss_grad(&r, &self.target, PROBE_LN).expect("hits retained"));
        let out = OutputGrads {
            color: Some(self.wc.clone()),
            alpha: Some(self.wa.clone()),
            depth: Some(self.wd.clone()),
            normal: Some(self.wn.clone()),
        };
        rasterize_backward(scene, &r, &out, Some(&hg)).expect("render matches scene")
    }
}

const FIELD_GROUPS: [(&str, std::ops::RangeInclusive<usize>); 5] = [
    ("raster.center", 0..=2),
    ("raster.rotation", 3..=6),
    ("raster.scales", 7..=8),
    ("raster.opacity", 9..=9),
    ("raster.color", 10..=12),
];

fn perturbed(scene: &SplatScene, k: usize, field: usize, delta: f64) -> SplatScene {
    let mut splats = scene.splats.clone();
    let s = splats[k];
    let (mut center, mut q, mut scales, mut opacity, mut color) =
        (s.center, s.rotation(), s.scales, s.opacity, s.color);
    match field {
        0..=2 => center[field] += delta,
        3..=6 => q[field - 3] += delta,
        7..=8 => scales[field - 7] += delta,
        9 => opacity += delta,
        _ => color[field - 10] += delta,
    }
    splats[k] = SurfelGaussian::new(center, q, scales, opacity, color).expect("small perturbation stays valid");
    SplatScene::new(splats)
}

fn analytic_field(s: &SurfelGaussian, g: &SplatGrad, field: usize) -> f64 {
    match field {
        0..=2 => g.center[field],
        3..=6 => g.quaternion(s)[field - 3],
        7..=8 => g.scales[field - 7],
        9 => g.opacity,
        _ => g.color[field - 10],
    }
}

/// Rasterizer backward (colour, alpha, depth, normal, L_d, L_n) on five
/// random 16×16 scenes of five splats, every splat field.
pub fn raster_suite(eps: f64, fault: &Fault) -> Vec<CheckResult> {
    let cam = check_camera();
    let mut worst = [0.0f64; 5];
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let scene = layered_scene(&mut rng, 5);
        let probe = Probe::new(&mut rng, 256);
        let grads = probe.grad(&scene, &cam);
        for (gi, (name, fields)) in FIELD_GROUPS.iter().enumerate() {
            let sign = fault.sign(name);
            for field in fields.clone() {
                // positions and frames use a larger step
                let h = if field <= 8 { eps.max(1e-4) } else { eps };
                for (k, (splat, grad)) in scene.splats.iter().zip(&grads).enumerate() {
                    let numeric = (probe.loss(&perturbed(&scene, k, field, h), &cam)
                        - probe.loss(&perturbed(&scene, k, field, -h), &cam))
                        / (2.0 * h);
                    let analytic = sign * analytic_field(splat, grad, field);
                    worst[gi] = worst[gi].max(rel_err(&[analytic], &[numeric]));
                }
            }
        }
    }
    FIELD_GROUPS
        .iter()
        .zip(worst)
        .map(|((name, _), e)| CheckResult {
            suite: "raster",
            name: name.to_string(),
            max_rel_err: e,
        })
        .collect()
}

/// A 2-layer denoiser on 4 tokens: gradients with respect to the input and
/// to a representative parameter from each kind of layer.
pub fn denoiser_suite(eps: f64, fault: &Fault) -> anyhow::Result<Vec<CheckResult>> {
    let mut store = ParamStore::new();
    let cfg = DenoiserConfig {
        in_width: 3,
        width: 8,
        layers: 2,
        heads: 2,
        cond_width: 4,
        ..DenoiserConfig::default()
    };
    let net = Denoiser::new(&mut store, &cfg, "d", 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // move every weight off its initial value; zero-initialized outputs would hide errors
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let z = uniform(&[4, 3], &mut rng, -1.0, 1.0);
    let w = uniform(&[4, 3], &mut rng, -1.0, 1.0);
    let mut out = Vec::new();
    let name = "denoiser.input";
    let e = tape_check(
        &|tp, x| {
            let p = store.bind(tp);
            let y = net.forward(&p, x, 0.3, Some(2), None)?;
            Ok(y.mul(tp.constant(w.clone()))?.sum_all())
        },
        &z,
        eps,
        fault.sign(name),
    )?;
    out.push(CheckResult {
        suite: "denoiser",
        name: name.into(),
        max_rel_err: e,
    });
    for param in [
        "d.input.w",
        "d.block0.qkv.w",
        "d.block0.mod_offset",
        "d.block1.temperature",
        "d.block1.mlp_in.w",
        "d.cross0.kv.w",
        "d.time_in.w",
        "d.time_out.w",
        "d.labels",
        "d.output.w",
    ] {
        let name = format!("denoiser.{}", param.trim_start_matches("d."));
        let value = store.get(param).expect("registered parameter").clone();
        let e = tape_check(
            &|tp, x| {
                let mut p = store.bind(tp);
                p.replace(param, x)?;
                let y = net.forward(&p, tp.constant(z.clone()), 0.3, Some(2), None)?;
                Ok(y.mul(tp.constant(w.clone()))?.sum_all())
            },
            &value,
            eps,
            fault.sign(&name),
        )?;
        out.push(CheckResult {
            suite: "denoiser",
            name,
            max_rel_err: e,
        });
    }
    Ok(out)
}

/// All three suites in order.
pub fn run_all(eps: f64, fault: &Fault) -> anyhow::Result<Vec<CheckResult>> {
    let mut all = autodiff_suite(eps, fault)?;
    all.extend(raster_suite(eps, fault));
    all.extend(denoiser_suite(eps, fault)?);
    Ok(all)
}
