use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::raster::{bin_splats, prepare, Prepared, RenderOutput};
use super::{SplatGrad, SplatScene, SurfelError};

/// Upstream gradients of a loss with respect to the render's output images.
/// Missing buffers count as zero.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    /// H×W×3
    pub color: Option<Vec<f64>>,
    /// H×W
    pub alpha: Option<Vec<f64>>,
    /// H×W
    pub depth: Option<Vec<f64>>,
    /// H×W×3
    pub normal: Option<Vec<f64>>,
}

/// Gradient of a loss defined directly on one intersection's weight, depth
/// and (camera-facing) normal.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HitGrad {
    pub weight: f64,
    pub depth: f64,
    pub normal: Vector3<f64>,
}

/// Per-pixel hit gradients aligned with [`RenderOutput::hits`].
#[derive(Clone, Debug, PartialEq)]
pub struct HitGrads {
    pub per_pixel: Vec<Vec<HitGrad>>,
}

impl HitGrads {
    pub fn zeros_like(render: &RenderOutput) -> Result<Self, SurfelError> {
        let hits = render.hits.as_ref().ok_or(SurfelError::MissingForwardRecord)?;
        Ok(Self {
            per_pixel: hits.iter().map(|h| vec![HitGrad::default(); h.len()]).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &HitGrads) {
        for (a, b) in self.per_pixel.iter_mut().zip(&other.per_pixel) {
            for (x, y) in a.iter_mut().zip(b) {
                x.weight += y.weight;
                x.depth += y.depth;
                x.normal += y.normal;
            }
        }
    }
}

fn check_len(name: &'static str, buf: &Option<Vec<f64>>, expected: usize) -> Result<(), SurfelError> {
    match buf {
        Some(b) if b.len() != expected => Err(SurfelError::GradientShape {
            name,
            expected,
            got: b.len(),
        }),
        _ => Ok(()),
    }
}

/// Analytic gradients of a loss with respect to every splat field, given
/// gradients on the output images and optionally on the retained hits.
///
/// Per pixel the blend weights are differentiated with a back-to-front
/// suffix sum over the intersection list; per-hit gradients are then chained
/// through the Gaussian, the ray–plane solve and the tangent frame. Tiles
/// accumulate partial sums that are reduced in tile order, so the result
/// does not depend on thread scheduling.
pub fn rasterize_backward(
    scene: &SplatScene,
    render: &RenderOutput,
    grads: &OutputGrads,
    hit_grads: Option<&HitGrads>,
) -> Result<Vec<SplatGrad>, SurfelError> {
    let hits = render.hits.as_ref().ok_or(SurfelError::MissingForwardRecord)?;
    let camera = &render.camera;
    let (w, h) = (camera.width(), camera.height());
    check_len("color", &grads.color, h * w * 3)?;
    check_len("alpha", &grads.alpha, h * w)?;
    check_len("depth", &grads.depth, h * w)?;
    check_len("normal", &grads.normal, h * w * 3)?;
    if let Some(hg) = hit_grads {
        if hg.per_pixel.len() != hits.len() || hg.per_pixel.iter().zip(hits).any(|(a, b)| a.len() != b.len()) {
            return Err(SurfelError::GradientShape {
                name: "hits",
                expected: hits.len(),
                got: hg.per_pixel.len(),
            });
        }
    }
    let prep = prepare(scene);
    let grid = bin_splats(&prep, camera);
    let n_tiles = grid.tiles_x * grid.tiles_y;
    let tile_partials: Vec<BTreeMap<u32, SplatGrad>> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| {
            let mut acc = BTreeMap::new();
            let (xs, ys) = grid.pixel_range(tile, camera);
            for py in ys {
                for px in xs.clone() {
                    pixel_backward(px, py, render, &prep, grads, hit_grads, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut out = vec![SplatGrad::default(); scene.len()];
    for partial in &tile_partials {
        for (&id, g) in partial {
            out[id as usize].add_assign(g);
        }
    }
    Ok(out)
}

fn vec3_at(buf: &Option<Vec<f64>>, i: usize) -> Vector3<f64> {
    buf.as_ref()
        .map(|b| Vector3::new(b[3 * i], b[3 * i + 1], b[3 * i + 2]))
        .unwrap_or_else(Vector3::zeros)
}

fn scalar_at(buf: &Option<Vec<f64>>, i: usize) -> f64 {
    buf.as_ref().map(|b| b[i]).unwrap_or(0.0)
}

fn pixel_backward(
    px: usize,
    py: usize,
    render: &RenderOutput,
    prep: &[Prepared],
    grads: &OutputGrads,
    hit_grads: Option<&HitGrads>,
    acc: &mut BTreeMap<u32, SplatGrad>,
) {
    let camera = &render.camera;
    let i = py * camera.width() + px;
    let hits = &render.hits.as_ref().expect("checked by caller")[i];
    if hits.is_empty() {
        return;
    }
    let g_color = vec3_at(&grads.color, i);
    let g_alpha = scalar_at(&grads.alpha, i);
    let g_depth = scalar_at(&grads.depth, i);
    let g_normal = vec3_at(&grads.normal, i);
    let a_total = render.alpha.data()[i];
    let d_mean = render.depth.data()[i];
    let hg = hit_grads.map(|h| &h.per_pixel[i]);

    let o = camera.pose.origin();
    let f = camera.pose.forward();
    let d = camera.ray_direction(px, py);
    let d_dot_f = d.dot(&f);

    // gradient with respect to each blend weight, plus direct depth/normal terms
    let mut g_w = Vec::with_capacity(hits.len());
    for (k, hit) in hits.iter().enumerate() {
        let s = &prep[hit.splat as usize];
        let mut g = g_color.dot(&s.color) + g_alpha + g_normal.dot(&hit.normal);
        if a_total > 0.0 {
            g += g_depth * (hit.depth - d_mean) / a_total;
        }
        if let Some(hg) = hg {
            g += hg[k].weight;
        }
        g_w.push(g);
    }

    // suffix[k] = ∂L/∂T seen from behind hit k
    let mut suffix = g_color.dot(&render.background);
    for k in (0..hits.len()).rev() {
        let hit = &hits[k];
        let s = &prep[hit.splat as usize];
        let g_a = hit.transmittance * (g_w[k] - suffix);
        suffix = g_w[k] * hit.alpha + (1.0 - hit.alpha) * suffix;

        let mut g_hit_depth = if a_total > 0.0 {
            g_depth * hit.weight / a_total
        } else {
            0.0
        };
        let mut g_n = g_normal * hit.weight;
        if let Some(hg) = hg {
            g_hit_depth += hg[k].depth;
            g_n += hg[k].normal;
        }

        let entry = acc.entry(hit.splat).or_default();
        entry.color += g_color * hit.weight;
        entry.opacity += g_a * hit.gauss;

        // a = α G,  G = exp(−(u² + v²)/2)
        let g_gauss = g_a * s.opacity;
        let g_u = -g_gauss * hit.gauss * hit.u;
        let g_v = -g_gauss * hit.gauss * hit.v;

        // x = r + t d,  r = o − p,  t = −(r·w)/(d·w),  u = x·t_u/s_u,  v = x·t_v/s_v
        let den = d.dot(&s.tw);
        let r = o - s.center;
        let x = r + d * hit.t;
        let g_x = s.tu * (g_u / s.scales[0]) + s.tv * (g_v / s.scales[1]);
        let g_t = g_x.dot(&d) + g_hit_depth * d_dot_f;
        let g_r = g_x - s.tw * (g_t / den);
        let g_tw = -x * (g_t / den) + g_n * hit.normal_sign;

        entry.center -= g_r;
        entry.t_u += x * (g_u / s.scales[0]) + s.tv.cross(&g_tw);
        entry.t_v += x * (g_v / s.scales[1]) + g_tw.cross(&s.tu);
        entry.scales[0] -= g_u * hit.u / s.scales[0];
        entry.scales[1] -= g_v * hit.v / s.scales[1];
    }
}
