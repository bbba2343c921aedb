use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::backward::{rasterize_backward, OutputGrads};
use super::losses::{distortion_loss, distortion_loss_grad, l1_color_loss, normal_loss, normal_loss_grad};
use super::raster::{rasterize, RasterOptions};
use super::splat::quat_tangents_vjp;
use super::{SplatGrad, SplatScene, SurfelError, SurfelGaussian};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor};
use crate::geometry::{fps_points, unproject_depth, RenderingInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub iters: usize,
    pub lambda_d: f64,
    pub lambda_n: f64,
    /// Fraction of the iterations run on the colour loss alone before the
    /// geometry terms are switched on.
    pub geometry_start: f64,
    pub lr_position: f64,
    /// Position learning rate at the last iteration; decays exponentially from `lr_position`.
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub background: [f64; 3],
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            lambda_d: 1000.0,
            lambda_n: 0.2,
            geometry_start: 0.0,
            lr_position: 1e-3,
            lr_position_final: 1e-5,
            lr_rotation: 5e-3,
            lr_scale: 5e-3,
            lr_opacity: 2e-2,
            lr_color: 2e-2,
            background: [1.0; 3],
        }
    }
}

/// View-averaged loss terms of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l1: f64,
    pub ld: f64,
    pub ln: f64,
    pub total: f64,
}

pub type FitLog = Vec<LossRecord>;

#[derive(Clone, Debug)]
pub struct FitResult {
    pub scene: SplatScene,
    pub log: FitLog,
}

const OPACITY_CLAMP: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained optimizer variables: centres (N×3), raw quaternions (N×4),
/// log-scales (N×2), opacity logits (N) and colour logits (N×3).
pub fn splat_params(scene: &SplatScene) -> [Tensor; 5] {
    let n = scene.len();
    let mut out = [
        Vec::with_capacity(3 * n),
        Vec::with_capacity(4 * n),
        Vec::with_capacity(2 * n),
        Vec::with_capacity(n),
        Vec::with_capacity(3 * n),
    ];
    for s in &scene.splats {
        out[0].extend(s.center.iter());
        out[1].extend(s.rotation());
        out[2].extend(s.scales.map(f64::ln));
        out[3].push(logit(s.opacity));
        out[4].extend(s.color.iter().map(|&c| logit(c)));
    }
    let shapes: [&[usize]; 5] = [&[n, 3], &[n, 4], &[n, 2], &[n], &[n, 3]];
    let mut it = out.into_iter();
    shapes.map(|s| Tensor::new(s, it.next().expect("five groups")).expect("sizes match"))
}

/// Inverse of [`splat_params`].
pub fn scene_from_params(params: &[Tensor; 5]) -> Result<SplatScene, SurfelError> {
    let n = params[3].len();
    let [c, q, s, a, col] = params.each_ref().map(|t| t.data());
    let splats = (0..n)
        .map(|i| {
            SurfelGaussian::new(
                Vector3::new(c[3 * i], c[3 * i + 1], c[3 * i + 2]),
                [q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]],
                [s[2 * i].exp(), s[2 * i + 1].exp()],
                sigmoid(a[i]),
                Vector3::new(sigmoid(col[3 * i]), sigmoid(col[3 * i + 1]), sigmoid(col[3 * i + 2])),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SplatScene::new(splats))
}

fn param_grads(params: &[Tensor; 5], scene: &SplatScene, grads: &[SplatGrad]) -> [Tensor; 5] {
    let mut out = params.each_ref().map(|t| Tensor::zeros(t.shape()));
    let q = params[1].data().to_vec();
    for (i, (s, g)) in scene.splats.iter().zip(grads).enumerate() {
        out[0].data_mut()[3 * i..3 * i + 3].copy_from_slice(g.center.as_slice());
        let raw_q = [q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]];
        out[1].data_mut()[4 * i..4 * i + 4].copy_from_slice(&quat_tangents_vjp(&raw_q, &g.t_u, &g.t_v));
        for a in 0..2 {
            out[2].data_mut()[2 * i + a] = g.scales[a] * s.scales[a];
        }
        out[3].data_mut()[i] = g.opacity * s.opacity * (1.0 - s.opacity);
        for c in 0..3 {
            out[4].data_mut()[3 * i + c] = g.color[c] * s.color[c] * (1.0 - s.color[c]);
        }
    }
    out
}

/// View-averaged `L1 + λ_d L_d + λ_n L_n` and its gradient per splat.
pub fn scene_loss_grads(
    scene: &SplatScene,
    views: &[RenderingInput],
    opts: &FitOptions,
    iter: usize,
    raster: &RasterOptions,
) -> Result<(LossRecord, Vec<SplatGrad>), SurfelError> {
    let nv = views.len() as f64;
    let mut total_grad = vec![SplatGrad::default(); scene.len()];
    let mut rec = LossRecord {
        iter,
        l1: 0.0,
        ld: 0.0,
        ln: 0.0,
        total: 0.0,
    };
    for view in views {
        let render = rasterize(scene, &view.camera, raster);
        let (l1, g_color) = l1_color_loss(&render, &view.image)?;
        let ld = distortion_loss(&render)?;
        let ln = normal_loss(&render, &view.normal)?;
        rec.l1 += l1 / nv;
        rec.ld += ld / nv;
        rec.ln += ln / nv;
        let mut hg = distortion_loss_grad(&render, opts.lambda_d / nv)?;
        hg.add_assign(&normal_loss_grad(&render, &view.normal, opts.lambda_n / nv)?);
        let out = OutputGrads {
            color: Some(g_color.into_iter().map(|g| g / nv).collect()),
            ..Default::default()
        };
        for (acc, g) in total_grad
            .iter_mut()
            .zip(rasterize_backward(scene, &render, &out, Some(&hg))?)
        {
            acc.add_assign(&g);
        }
    }
    rec.total = rec.l1 + opts.lambda_d * rec.ld + opts.lambda_n * rec.ln;
    Ok((rec, total_grad))
}

/// Adam on `L1 + λ_d·L_d + λ_n·L_n`, summed gradients averaged over all views
/// every iteration. Returns the final scene and one log record per iteration.
pub fn fit_splats(views: &[RenderingInput], init: &SplatScene, opts: &FitOptions) -> Result<FitResult, SurfelError> {
    if views.is_empty() {
        return Err(SurfelError::NoViews);
    }
    let raster = RasterOptions::default()
        .with_hits()
        .with_background(Vector3::from(opts.background));
    let lrs = [
        opts.lr_position,
        opts.lr_rotation,
        opts.lr_scale,
        opts.lr_opacity,
        opts.lr_color,
    ];
    let mut params = splat_params(init);
    let mut states: Vec<AdamState> = params.iter().map(|p| AdamState::new(std::slice::from_ref(p))).collect();
    let mut log = Vec::with_capacity(opts.iters);
    let start = (opts.geometry_start.clamp(0.0, 1.0) * opts.iters as f64).round() as usize;
    let colour_only = FitOptions {
        lambda_d: 0.0,
        lambda_n: 0.0,
        ..opts.clone()
    };
    for iter in 0..opts.iters {
        let scene = scene_from_params(&params)?;
        let active = if iter < start { &colour_only } else { opts };
        let (rec, total_grad) = scene_loss_grads(&scene, views, active, iter, &raster)?;
        if !rec.total.is_finite() {
            return Err(SurfelError::Diverged(iter));
        }
        log.push(rec);
        let grads = param_grads(&params, &scene, &total_grad);
        let progress = iter as f64 / (opts.iters.max(2) - 1) as f64;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = if k == 0 {
                decayed(opts.lr_position, opts.lr_position_final, progress)
            } else {
                lrs[k]
            };
            let cfg = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            adam_step(std::slice::from_mut(p), std::slice::from_ref(&g), &mut states[k], &cfg)
                .expect("parameter and gradient shapes agree");
        }
    }
    Ok(FitResult {
        scene: scene_from_params(&params)?,
        log,
    })
}

/// Log-linear interpolation between `start` and `end`.
fn decayed(start: f64, end: f64, progress: f64) -> f64 {
    if start <= 0.0 || end <= 0.0 {
        return start;
    }
    (start.ln() * (1.0 - progress) + end.ln() * progress).exp()
}

fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let tu = helper.cross(n).normalize();
    (tu, n.cross(&tu))
}

/// Places `count` splats by farthest point sampling over the unprojected
/// foreground pixels of all views, oriented by the normal maps and coloured
/// by the images. Scales follow the nearest-neighbour spacing of the picks.
pub fn init_scene_from_views(views: &[RenderingInput], count: usize, opacity: f64) -> Result<SplatScene, SurfelError> {
    if views.is_empty() {
        return Err(SurfelError::NoViews);
    }
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    for v in views {
        let (xyz, mask) = unproject_depth(v);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let at = |t: &Tensor| Vector3::new(t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]);
                points.push(at(&xyz));
                normals.push(at(&v.normal));
                colors.push(at(&v.image));
            }
        }
    }
    let picks = fps_points(&points, count).map_err(|_| SurfelError::TooFewPoints {
        requested: count,
        available: points.len(),
    })?;
    let chosen: Vec<Vector3<f64>> = picks.iter().map(|&i| points[i]).collect();
    let splats = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let nn = chosen
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, q)| (q - chosen[k]).norm())
                .fold(f64::INFINITY, f64::min);
            let s = if nn.is_finite() && nn > 0.0 { 0.6 * nn } else { 0.05 };
            let (tu, tv) = tangent_frame(&normals[i]);
            let c = colors[i].map(|x| x.clamp(0.02, 0.98));
            SurfelGaussian::from_tangents(points[i], tu, tv, [s, s], opacity, c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SplatScene::new(splats))
}
