//! File formats: PLY scenes and point clouds, PPM images, camera JSON
//! sidecars, view directories and CSV logs.

mod image;
mod ply;
mod views;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use image::{read_ppm, write_gray_ppm, write_ppm};
pub use ply::{
    read_cloud_ply, read_ply, read_scene_ply, write_cloud_ply, write_scene_ply, CloudData, PlyTable, SCENE_COLUMNS,
};
pub use views::{load_view, load_views_dir, read_camera_json, save_view, write_camera_json, write_csv, CameraFile};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            Self::Io { path, .. } | Self::Parse { path, .. } | Self::Format { path, .. } => path,
        }
    }
}
