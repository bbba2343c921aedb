use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::image::{read_ppm, write_ppm};
use super::IoError;
use crate::autodiff::tsr;
use crate::geometry::{Camera, CameraPose, PinholeIntrinsics, RenderingInput};

/// Camera sidecar: row-major world-from-camera rotation, origin and intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub rotation: [[f64; 3]; 3],
    pub origin: [f64; 3],
    pub intrinsics: PinholeIntrinsics,
}

impl CameraFile {
    pub fn from_camera(cam: &Camera) -> Self {
        let r = cam.pose.rotation();
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            origin: cam.pose.origin().into(),
            intrinsics: cam.intrinsics,
        }
    }

    pub fn to_camera(&self, path: &Path) -> Result<Camera, IoError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let pose = CameraPose::new(r, Vector3::from(self.origin)).map_err(|e| IoError::format(path, e.to_string()))?;
        self.intrinsics
            .validate()
            .map_err(|e| IoError::format(path, e.to_string()))?;
        Ok(Camera::new(pose, self.intrinsics))
    }
}

pub fn read_camera_json(path: &Path) -> Result<Camera, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let file: CameraFile = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    file.to_camera(path)
}

pub fn write_camera_json(path: &Path, cam: &Camera) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(&CameraFile::from_camera(cam)).expect("camera serializes");
    fs::write(path, text + "\n").map_err(|e| IoError::io(path, e))
}

fn sibling(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}{suffix}"))
}

/// Writes `name.ppm`, `name.depth.tsr`, `name.normal.tsr` and `name.json`.
pub fn save_view(dir: &Path, name: &str, view: &RenderingInput) -> Result<(), IoError> {
    write_ppm(&sibling(dir, name, ".ppm"), &view.image)?;
    for (suffix, t) in [(".depth.tsr", &view.depth), (".normal.tsr", &view.normal)] {
        let p = sibling(dir, name, suffix);
        tsr::save(&p, t).map_err(|e| IoError::format(&p, e.to_string()))?;
    }
    write_camera_json(&sibling(dir, name, ".json"), &view.camera)
}

pub fn load_view(dir: &Path, name: &str) -> Result<RenderingInput, IoError> {
    let cam_path = sibling(dir, name, ".json");
    let camera = read_camera_json(&cam_path)?;
    let image = read_ppm(&sibling(dir, name, ".ppm"))?;
    let load = |suffix: &str| {
        let p = sibling(dir, name, suffix);
        tsr::load(&p).map_err(|e| IoError::format(&p, e.to_string()))
    };
    let depth = load(".depth.tsr")?;
    let normal = load(".normal.tsr")?;
    RenderingInput::new(image, depth, normal, camera).map_err(|e| IoError::format(&cam_path, e.to_string()))
}

/// Every view in `dir`, one per `*.json` sidecar, in file-name order.
pub fn load_views_dir(dir: &Path) -> Result<Vec<RenderingInput>, IoError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| IoError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".json"))
                .map(str::to_string)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(IoError::format(dir, "no camera sidecars (*.json) found"));
    }
    names.iter().map(|n| load_view(dir, n)).collect()
}

/// Comma-separated values with a header row; numbers in shortest round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| IoError::io(path, e))
}
