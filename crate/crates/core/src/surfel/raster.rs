use std::cmp::Ordering;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::splat::{eval_gaussian, intersect_frame, SplatScene, SurfelGaussian, GAUSS_CUTOFF_SQ};
use crate::autodiff::Tensor;
use crate::geometry::Camera;

pub const TILE_SIZE: usize = 16;
/// Blending stops once transmittance falls below this value.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterOptions {
    /// composited behind the blended splats
    pub background: Vector3<f64>,
    /// keep per-pixel intersection lists for losses and the backward pass
    pub retain_hits: bool,
    /// spread tiles over the rayon pool
    pub parallel: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            background: Vector3::new(1.0, 1.0, 1.0),
            retain_hits: false,
            parallel: true,
        }
    }
}

impl RasterOptions {
    pub fn with_hits(mut self) -> Self {
        self.retain_hits = true;
        self
    }

    pub fn with_background(mut self, bg: Vector3<f64>) -> Self {
        self.background = bg;
        self
    }
}

/// One blended ray–splat intersection, in front-to-back order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub splat: u32,
    /// blend weight `ω = a · T`
    pub weight: f64,
    /// `a = α Ĝ`
    pub alpha: f64,
    /// transmittance in front of this hit
    pub transmittance: f64,
    pub depth: f64,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub gauss: f64,
    /// splat normal flipped to face the camera
    pub normal: Vector3<f64>,
    /// +1 when `normal = t_w`, −1 when flipped
    pub normal_sign: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// H×W×3, background composited
    pub color: Tensor,
    /// H×W, exactly the sum of the pixel's blend weights
    pub alpha: Tensor,
    /// H×W, `Σωd / Σω` (0 where nothing was hit)
    pub depth: Tensor,
    /// H×W×3, `Σω n`
    pub normal: Tensor,
    pub final_transmittance: Vec<f64>,
    pub hits: Option<Vec<Vec<Hit>>>,
    pub camera: Camera,
    pub background: Vector3<f64>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }
}

/// Splat with its frame materialized once per render.
pub(crate) struct Prepared {
    pub center: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub tw: Vector3<f64>,
    pub scales: [f64; 2],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

pub(crate) fn prepare(scene: &SplatScene) -> Vec<Prepared> {
    scene
        .splats
        .iter()
        .map(|s| {
            let (tu, tv) = s.tangents();
            Prepared {
                center: s.center,
                tu,
                tv,
                tw: tu.cross(&tv),
                scales: s.scales,
                opacity: s.opacity,
                color: s.color,
            }
        })
        .collect()
}

fn content_key(s: &SurfelGaussian) -> [f64; 13] {
    let q = s.rotation();
    [
        s.center.x,
        s.center.y,
        s.center.z,
        q[0],
        q[1],
        q[2],
        q[3],
        s.scales[0],
        s.scales[1],
        s.opacity,
        s.color.x,
        s.color.y,
        s.color.z,
    ]
}

/// Rank of every splat in a content-based total order, used to break depth
/// ties independently of list position.
fn content_ranks(scene: &SplatScene) -> Vec<u32> {
    let keys: Vec<[f64; 13]> = scene.splats.iter().map(content_key).collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut rank = vec![0u32; keys.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as u32;
    }
    rank
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn pixel_range(&self, tile: usize, camera: &Camera) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (
            x0..(x0 + TILE_SIZE).min(camera.width()),
            y0..(y0 + TILE_SIZE).min(camera.height()),
        )
    }
}

/// Inserts every splat into each tile its projected cut-off square touches.
/// Splats crossing the camera plane go into every tile.
pub(crate) fn bin_splats(prep: &[Prepared], camera: &Camera) -> TileGrid {
    let (w, h) = (camera.width(), camera.height());
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let k = GAUSS_CUTOFF_SQ.sqrt();
    for (id, s) in prep.iter().enumerate() {
        let a = s.tu * (k * s.scales[0]);
        let b = s.tv * (k * s.scales[1]);
        let corners = [s.center + a + b, s.center + a - b, s.center - a + b, s.center - a - b]
            .map(|c| camera.pose.world_to_camera(&c));
        if corners.iter().all(|c| c.z <= 0.0) {
            continue;
        }
        let (tx0, tx1, ty0, ty1) = if corners.iter().any(|c| c.z <= 1e-6) {
            (0, tiles_x - 1, 0, tiles_y - 1)
        } else {
            let mut lo = (f64::INFINITY, f64::INFINITY);
            let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in &corners {
                let (px, py) = camera.intrinsics.project(c);
                lo = (lo.0.min(px), lo.1.min(py));
                hi = (hi.0.max(px), hi.1.max(py));
            }
            // pixel centres sit at integer + 0.5, so pixel i covers [i, i+1)
            if hi.0 < 0.0 || hi.1 < 0.0 || lo.0 >= w as f64 || lo.1 >= h as f64 {
                continue;
            }
            let clamp_tile = |v: f64, n_px: usize| ((v.max(0.0) as usize).min(n_px - 1)) / TILE_SIZE;
            (
                clamp_tile(lo.0, w),
                clamp_tile(hi.0, w),
                clamp_tile(lo.1, h),
                clamp_tile(hi.1, h),
            )
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(id as u32);
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        lists,
    }
}

struct PixelOut {
    color: Vector3<f64>,
    alpha: f64,
    depth: f64,
    normal: Vector3<f64>,
    transmittance: f64,
    hits: Vec<Hit>,
}

#[allow(clippy::too_many_arguments)]
fn shade_pixel(
    px: usize,
    py: usize,
    list: &[u32],
    prep: &[Prepared],
    ranks: &[u32],
    camera: &Camera,
    bg: &Vector3<f64>,
    keep: bool,
) -> PixelOut {
    let o = camera.pose.origin();
    let f = camera.pose.forward();
    let d = camera.ray_direction(px, py);
    let mut cands: Vec<(f64, u32, u32, f64, f64, f64, f64)> = Vec::new();
    for &id in list {
        let s = &prep[id as usize];
        if let Some(h) = intersect_frame(&o, &d, &s.center, &s.tu, &s.tv, &s.tw, s.scales, &f) {
            let g = eval_gaussian(h.u, h.v);
            if g > 0.0 {
                cands.push((h.depth, ranks[id as usize], id, h.t, h.u, h.v, g));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut t_acc = 1.0;
    let mut color = Vector3::zeros();
    let mut alpha = 0.0;
    let mut depth_num = 0.0;
    let mut normal = Vector3::zeros();
    let mut hits = Vec::new();
    for &(depth, _, id, t, u, v, g) in &cands {
        let s = &prep[id as usize];
        let a = s.opacity * g;
        let w = a * t_acc;
        let sign = if s.tw.dot(&d) < 0.0 { 1.0 } else { -1.0 };
        let n = s.tw * sign;
        color += s.color * w;
        alpha += w;
        depth_num += w * depth;
        normal += n * w;
        if keep {
            hits.push(Hit {
                splat: id,
                weight: w,
                alpha: a,
                transmittance: t_acc,
                depth,
                t,
                u,
                v,
                gauss: g,
                normal: n,
                normal_sign: sign,
            });
        }
        t_acc *= 1.0 - a;
        if t_acc < TRANSMITTANCE_EPS {
            break;
        }
    }
    PixelOut {
        color: color + bg * t_acc,
        alpha,
        depth: if alpha > 0.0 { depth_num / alpha } else { 0.0 },
        normal,
        transmittance: t_acc,
        hits,
    }
}

/// Front-to-back alpha blending of ray–splat intersections, tile by tile.
pub fn rasterize(scene: &SplatScene, camera: &Camera, opts: &RasterOptions) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let prep = prepare(scene);
    let ranks = content_ranks(scene);
    let grid = bin_splats(&prep, camera);
    let n_tiles = grid.tiles_x * grid.tiles_y;
    let render_tile = |tile: usize| {
        let (xs, ys) = grid.pixel_range(tile, camera);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for py in ys {
            for px in xs.clone() {
                out.push(shade_pixel(
                    px,
                    py,
                    &grid.lists[tile],
                    &prep,
                    &ranks,
                    camera,
                    &opts.background,
                    opts.retain_hits,
                ));
            }
        }
        out
    };
    let tiles: Vec<Vec<PixelOut>> = if opts.parallel {
        (0..n_tiles).into_par_iter().map(render_tile).collect()
    } else {
        (0..n_tiles).map(render_tile).collect()
    };

    let mut color = vec![0.0; h * w * 3];
    let mut alpha = vec![0.0; h * w];
    let mut depth = vec![0.0; h * w];
    let mut normal = vec![0.0; h * w * 3];
    let mut trans = vec![1.0; h * w];
    let mut hits: Vec<Vec<Hit>> = if opts.retain_hits {
        vec![Vec::new(); h * w]
    } else {
        Vec::new()
    };
    for (tile, pixels) in tiles.into_iter().enumerate() {
        let (xs, ys) = grid.pixel_range(tile, camera);
        let coords = ys.flat_map(|py| xs.clone().map(move |px| (px, py)));
        for ((px, py), p) in coords.zip(pixels) {
            let i = py * w + px;
            color[3 * i..3 * i + 3].copy_from_slice(p.color.as_slice());
            normal[3 * i..3 * i + 3].copy_from_slice(p.normal.as_slice());
            alpha[i] = p.alpha;
            depth[i] = p.depth;
            trans[i] = p.transmittance;
            if opts.retain_hits {
                hits[i] = p.hits;
            }
        }
    }
    RenderOutput {
        color: Tensor::new(&[h, w, 3], color).expect("shape matches buffer"),
        alpha: Tensor::new(&[h, w], alpha).expect("shape matches buffer"),
        depth: Tensor::new(&[h, w], depth).expect("shape matches buffer"),
        normal: Tensor::new(&[h, w, 3], normal).expect("shape matches buffer"),
        final_transmittance: trans,
        hits: opts.retain_hits.then_some(hits),
        camera: *camera,
        background: opts.background,
    }
}
