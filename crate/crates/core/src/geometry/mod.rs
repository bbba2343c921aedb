//! Cameras, ray embeddings, depth unprojection, multi-view input assembly and
//! point-cloud utilities.
//!
//! Conventions: pixel centres sit at `(u + 0.5, v + 0.5)`, depth maps store
//! z-depth along the camera forward axis, and camera frames are x-right,
//! y-down, z-forward.

mod camera;
mod points;
mod views;

pub use camera::{Camera, CameraPose, PinholeIntrinsics};
pub use points::{
    chamfer_distance, fourier_pe, fourier_pe_width, fps_points, fps_sample, points_to_tensor, tensor_to_points, Aabb,
    PointCloud, PE_DOMAIN,
};
pub use views::{
    assemble_view_tensor, foreground_points, plucker_embed, unproject_depth, RenderingInput, VIEW_CHANNELS,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("rotation is not a proper rotation (|RᵀR − I| = {orthogonality:e}, det = {det})")]
    InvalidPose { orthogonality: f64, det: f64 },
    #[error("look-at direction is parallel to the up vector")]
    DegenerateLookAt,
    #[error("invalid intrinsics {0:?}")]
    InvalidIntrinsics(PinholeIntrinsics),
    #[error("{field} has shape {got:?}, expected {expected:?}")]
    ViewShape {
        field: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid view: {0}")]
    InvalidView(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
    #[error("{colors} colors for {points} points")]
    ColorCount { points: usize, colors: usize },
    #[error("cannot sample {requested} points from a cloud of {available}")]
    SampleCount { requested: usize, available: usize },
    #[error("position {0:?} outside the positional-encoding domain [-1.5, 1.5]^3 (normalize first)")]
    OutsidePeDomain([f64; 3]),
}
