use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::autodiff::Tensor;

/// Inputs to [`fourier_pe`] must lie inside this cube.
pub const PE_DOMAIN: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if positions.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            positions,
            colors: None,
        })
    }

    pub fn with_colors(mut self, colors: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if colors.len() != self.positions.len() {
            return Err(GeometryError::ColorCount {
                points: self.positions.len(),
                colors: colors.len(),
            });
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// N×3 tensor of positions.
    pub fn to_tensor(&self) -> Tensor {
        points_to_tensor(&self.positions)
    }
}

pub fn points_to_tensor(points: &[Vector3<f64>]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::new(&[points.len().max(1), 3], data).unwrap_or_else(|_| Tensor::zeros(&[1, 3]))
}

pub fn tensor_to_points(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

/// Axis-aligned box with a uniform-scale map into `[−1, 1]³`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn unit() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self { min, max }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| 0.5 * (self.min[a] + self.max[a]))
    }

    /// Largest half-extent; 1 for degenerate boxes.
    pub fn half_extent(&self) -> f64 {
        let h = (0..3).map(|a| 0.5 * (self.max[a] - self.min[a])).fold(0.0, f64::max);
        if h > 0.0 {
            h
        } else {
            1.0
        }
    }

    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center()) / self.half_extent()
    }

    pub fn denormalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.half_extent() + self.center()
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - margin && p[a] <= self.max[a] + margin)
    }
}

/// Farthest point sampling seeded at index 0; ties go to the lowest index.
pub fn fps_sample(cloud: &PointCloud, n: usize) -> Result<Vec<usize>, GeometryError> {
    fps_points(&cloud.positions, n)
}

pub fn fps_points(points: &[Vector3<f64>], n: usize) -> Result<Vec<usize>, GeometryError> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(GeometryError::SampleCount {
            requested: n,
            available: total,
        });
    }
    let mut chosen = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; total];
    let mut current = 0;
    for _ in 0..n {
        chosen.push(current);
        let c = points[current];
        min_d2[current] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, d)) in points.iter().zip(min_d2.iter_mut()).enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let dist = (p - c).norm_squared();
            if dist < *d {
                *d = dist;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Output width of [`fourier_pe`] for a band count.
pub fn fourier_pe_width(num_bands: usize) -> usize {
    6 * num_bands + 3
}

/// Per row: `x` itself, then for each band `k`: `sin(2ᵏπx)` (3) and `cos(2ᵏπx)` (3).
pub fn fourier_pe(points: &[Vector3<f64>], num_bands: usize) -> Result<Tensor, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let width = fourier_pe_width(num_bands);
    let mut data = Vec::with_capacity(points.len() * width);
    for p in points {
        if p.iter().any(|x| x.is_nan() || x.abs() > PE_DOMAIN) {
            return Err(GeometryError::OutsidePeDomain([p.x, p.y, p.z]));
        }
        data.extend_from_slice(&[p.x, p.y, p.z]);
        for k in 0..num_bands {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            data.extend(p.iter().map(|x| (f * x).sin()));
            data.extend(p.iter().map(|x| (f * x).cos()));
        }
    }
    Ok(Tensor::new(&[points.len(), width], data).expect("shape matches buffer"))
}

/// Symmetric Chamfer distance with squared Euclidean point distances:
/// `mean_a min_b |a−b|² + mean_b min_a |a−b|²`.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    fn one_way(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        a.iter()
            .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    }
    one_way(a, b) + one_way(b, a)
}
