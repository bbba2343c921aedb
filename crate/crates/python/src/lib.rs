//! Python bindings: scenes and rendering, point-cloud utilities, the flow
//! schedules, gradient checks and cascade sampling from trained checkpoints.
//! Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use surfelflow::autodiff::Tensor;
use surfelflow::checks::{run_all, Fault};
use surfelflow::flow::{cascade_sample, fm_weight as flow_fm_weight, schedule_eval, FlowModel, Schedule};
use surfelflow::geometry::{chamfer_distance, fps_points, Camera};
use surfelflow::io::{read_scene_ply, write_scene_ply};
use surfelflow::surfel::{
    distortion_loss, psnr, rasterize, utilization_ratio, RasterOptions, RenderOutput, SplatScene, SurfelGaussian,
    UTILIZATION_TAU,
};
use surfelflow::synthetic::{orbit_camera, ShapeClass};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_points(points: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| Vector3::from(*p)).collect()
}

fn from_points(points: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// `H×W×C` tensor as nested lists; `H×W` gives rows of scalars wrapped in
/// one-element lists.
fn image_rows(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let c = t.len() / (h * w).max(1);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| t.data()[(y * w + x) * c..(y * w + x + 1) * c].to_vec())
                .collect()
        })
        .collect()
}

fn parse_schedule(kind: &str) -> PyResult<Schedule> {
    match kind {
        "gvp" => Ok(Schedule::Gvp),
        "linear" => Ok(Schedule::Linear),
        other => Err(value_err(format!(
            "unknown schedule {other:?}; expected \"gvp\" or \"linear\""
        ))),
    }
}

/// Pinhole camera.
#[pyclass(name = "Camera", frozen, module = "surfelflow")]
pub struct PyCamera {
    pub inner: Camera,
}

#[pymethods]
impl PyCamera {
    /// Camera on a sphere around the origin, looking at it.
    #[staticmethod]
    #[pyo3(signature = (azimuth, elevation, distance = 3.2, resolution = 64, fov = 45.0))]
    fn orbit(azimuth: f64, elevation: f64, distance: f64, resolution: usize, fov: f64) -> PyResult<Self> {
        let valid = resolution > 0 && fov > 0.0 && fov < 180.0 && distance > 0.0;
        if !valid {
            return Err(value_err(
                "resolution, fov and distance must be positive (fov below 180)",
            ));
        }
        Ok(Self {
            inner: orbit_camera(azimuth, elevation, distance, resolution, fov),
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.intrinsics.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.intrinsics.height
    }
}

/// Result of rasterizing a scene.
#[pyclass(name = "Render", frozen, module = "surfelflow")]
pub struct PyRender {
    pub inner: RenderOutput,
}

#[pymethods]
impl PyRender {
    /// `H×W×3` colour.
    fn color(&self) -> Vec<Vec<Vec<f64>>> {
        image_rows(&self.inner.color)
    }

    /// `H×W` accumulated opacity.
    fn alpha(&self) -> Vec<Vec<f64>> {
        image_rows(&self.inner.alpha)
            .into_iter()
            .map(|r| r.into_iter().map(|p| p[0]).collect())
            .collect()
    }

    /// `H×W` blended depth.
    fn depth(&self) -> Vec<Vec<f64>> {
        image_rows(&self.inner.depth)
            .into_iter()
            .map(|r| r.into_iter().map(|p| p[0]).collect())
            .collect()
    }

    fn distortion_loss(&self) -> PyResult<f64> {
        distortion_loss(&self.inner).map_err(value_err)
    }

    /// PSNR of the colour against another render of the same size.
    fn psnr(&self, other: &PyRender) -> PyResult<f64> {
        if self.inner.color.shape() != other.inner.color.shape() {
            return Err(value_err("renders differ in size"));
        }
        Ok(psnr(&self.inner.color, &other.inner.color))
    }
}

/// A set of surfel Gaussians.
#[pyclass(name = "Scene", module = "surfelflow")]
pub struct PyScene {
    pub inner: SplatScene,
}

#[pymethods]
impl PyScene {
    #[new]
    fn new() -> Self {
        Self {
            inner: SplatScene::empty(),
        }
    }

    /// Appends one splat. `rotation` is a quaternion `(w, x, y, z)`, normalized here.
    #[pyo3(signature = (position, rotation, scales, opacity, color))]
    fn add(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        scales: [f64; 2],
        opacity: f64,
        color: [f64; 3],
    ) -> PyResult<()> {
        let splat = SurfelGaussian::new(Vector3::from(position), rotation, scales, opacity, Vector3::from(color))
            .map_err(value_err)?;
        let mut splats = std::mem::take(&mut self.inner.splats);
        splats.push(splat);
        self.inner = SplatScene::new(splats);
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_scene_ply(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_scene_ply(&path, &self.inner).map_err(io_err)
    }

    /// Fraction of splats with opacity above `tau`.
    #[pyo3(signature = (tau = UTILIZATION_TAU))]
    fn utilization(&self, tau: f64) -> f64 {
        utilization_ratio(&self.inner, tau)
    }

    #[pyo3(signature = (camera, background = [1.0, 1.0, 1.0]))]
    fn render(&self, py: Python<'_>, camera: &PyCamera, background: [f64; 3]) -> PyRender {
        let opts = RasterOptions::default()
            .with_hits()
            .with_background(Vector3::from(background));
        let inner = py.detach(|| rasterize(&self.inner, &camera.inner, &opts));
        PyRender { inner }
    }
}

/// Indices of `n` farthest-point samples, starting from index 0.
#[pyfunction]
fn fps(points: Vec<[f64; 3]>, n: usize) -> PyResult<Vec<usize>> {
    fps_points(&to_points(&points), n).map_err(value_err)
}

/// Symmetric Chamfer distance: squared Euclidean, mean over points, summed both ways.
#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> f64 {
    chamfer_distance(&to_points(&a), &to_points(&b))
}

/// `(a, b, a', b')` of a schedule at time `t`.
#[pyfunction]
#[pyo3(signature = (t, kind = "gvp"))]
fn schedule(t: f64, kind: &str) -> PyResult<(f64, f64, f64, f64)> {
    let e = schedule_eval(parse_schedule(kind)?, t).map_err(value_err)?;
    Ok((e.a, e.b, e.da, e.db))
}

/// Weight of the noise-prediction error in the flow-matching loss.
#[pyfunction]
#[pyo3(signature = (t, kind = "gvp"))]
fn fm_weight(t: f64, kind: &str) -> PyResult<f64> {
    flow_fm_weight(t, parse_schedule(kind)?).map_err(value_err)
}

/// Surface samples of a toy shape class (`"sphere"`, `"cube"` or `"torus"`).
#[pyfunction]
#[pyo3(signature = (class_name, n, seed = 0))]
fn shape_cloud(class_name: &str, n: usize, seed: u64) -> PyResult<Vec<[f64; 3]>> {
    let class = ShapeClass::ALL
        .into_iter()
        .find(|c| c.name() == class_name)
        .ok_or_else(|| value_err(format!("unknown shape class {class_name:?}")))?;
    Ok(from_points(&class.sample_cloud(n, seed)))
}

/// Finite-difference gradient checks: `(suite, name, max relative error)` per check.
#[pyfunction]
#[pyo3(signature = (eps = 1e-6))]
fn gradcheck(py: Python<'_>, eps: f64) -> PyResult<Vec<(String, String, f64)>> {
    let results = py.detach(|| run_all(eps, &Fault::default())).map_err(value_err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.suite.to_string(), r.name, r.max_rel_err))
        .collect())
}

/// World-space anchors and their feature rows.
type Latent = (Vec<[f64; 3]>, Vec<Vec<f64>>);

/// Cascade sample from two checkpoint directories: world-space anchors and
/// their features.
#[pyfunction]
#[pyo3(signature = (stage1, stage2, label = None, seed = 0, feature_seed = 1, steps = 250, cfg = 4.0))]
#[allow(clippy::too_many_arguments)]
fn sample(
    py: Python<'_>,
    stage1: PathBuf,
    stage2: PathBuf,
    label: Option<usize>,
    seed: u64,
    feature_seed: u64,
    steps: usize,
    cfg: f64,
) -> PyResult<Latent> {
    let s1 = FlowModel::load(&stage1).map_err(io_err)?;
    let s2 = FlowModel::load(&stage2).map_err(io_err)?;
    let guidance = (cfg != 1.0).then_some(cfg);
    let latent = py
        .detach(|| cascade_sample(&s1, &s2, label, (seed, feature_seed), steps, guidance))
        .map_err(value_err)?;
    let features = (0..latent.features.shape()[0])
        .map(|i| latent.features.row(i).to_vec())
        .collect();
    Ok((from_points(&latent.world_anchors()), features))
}

#[pymodule]
#[pyo3(name = "surfelflow")]
pub fn surfelflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyRender>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(fm_weight, m)?)?;
    m.add_function(wrap_pyfunction!(shape_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add("UTILIZATION_TAU", UTILIZATION_TAU)?;
    Ok(())
}
