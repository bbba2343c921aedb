//! Surfel primitives, the differentiable alpha-blending rasterizer, geometry
//! regularizers and the per-scene fitting loop.

mod backward;
mod fit;
mod losses;
mod raster;
mod splat;

use nalgebra::Vector3;
use thiserror::Error;

pub use backward::{rasterize_backward, HitGrad, HitGrads, OutputGrads};
pub use fit::{
    fit_splats, init_scene_from_views, scene_from_params, scene_loss_grads, splat_params, FitLog, FitOptions,
    FitResult, LossRecord,
};
pub use losses::{distortion_loss, distortion_loss_grad, l1_color_loss, normal_loss, normal_loss_grad, psnr};
pub use raster::{rasterize, Hit, RasterOptions, RenderOutput, TILE_SIZE, TRANSMITTANCE_EPS};
pub use splat::{
    decode_attributes, decode_attributes_backward, eval_gaussian, local_to_world, quat_tangents, quat_tangents_vjp,
    ray_splat_intersect, utilization_ratio, GaussianAttributes13, RayHit, SplatScene, SurfelGaussian, GAUSS_CUTOFF_SQ,
    NEAR_PLANE, PARALLEL_EPS, UTILIZATION_TAU,
};

#[derive(Debug, Error)]
pub enum SurfelError {
    #[error("quaternion norm {0} is below 1e-8")]
    DegenerateQuaternion(f64),
    #[error("invalid splat: {0}")]
    InvalidSplat(String),
    #[error("raw attribute vector has length {0}, expected 13")]
    AttributeLength(usize),
    #[error("render has no retained intersection lists")]
    MissingForwardRecord,
    #[error("gradient buffer `{name}` has length {got}, expected {expected}")]
    GradientShape {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("target has shape {got:?}, expected {expected:?}")]
    TargetShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("fitting diverged at iteration {0}")]
    Diverged(usize),
    #[error("no views supplied")]
    NoViews,
    #[error("views contain {available} foreground points, cannot place {requested} splats")]
    TooFewPoints { requested: usize, available: usize },
}

/// Gradient with respect to every field of one splat, with the tangent
/// frame held as the two explicit tangents.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub center: Vector3<f64>,
    pub t_u: Vector3<f64>,
    pub t_v: Vector3<f64>,
    pub scales: [f64; 2],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl SplatGrad {
    pub fn add_assign(&mut self, o: &SplatGrad) {
        self.center += o.center;
        self.t_u += o.t_u;
        self.t_v += o.t_v;
        self.scales[0] += o.scales[0];
        self.scales[1] += o.scales[1];
        self.opacity += o.opacity;
        self.color += o.color;
    }

    /// Gradient with respect to the splat's unit quaternion.
    pub fn quaternion(&self, splat: &SurfelGaussian) -> [f64; 4] {
        quat_tangents_vjp(&splat.rotation(), &self.t_u, &self.t_v)
    }
}
