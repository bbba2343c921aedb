use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4};

use super::SurfelError;
use crate::geometry::Aabb;

/// Squared radius in the splat's uv plane beyond which the Gaussian is cut to zero.
pub const GAUSS_CUTOFF_SQ: f64 = 18.0;
/// Rays hitting a splat at or before this ray parameter are treated as misses.
pub const NEAR_PLANE: f64 = 1e-2;
/// Rays this close to parallel with the splat plane miss.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Flat 2-D Gaussian in 3-D. The tangent frame is held as a unit quaternion
/// `(w, x, y, z)`; `t_u` and `t_v` are its rotation matrix's first two columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelGaussian {
    pub center: Vector3<f64>,
    rotation: [f64; 4],
    pub scales: [f64; 2],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Rotation matrix columns 0 and 1 of the normalized quaternion.
pub fn quat_tangents(q: &[f64; 4]) -> (Vector3<f64>, Vector3<f64>) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let tu = Vector3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + w * z),
        2.0 * (x * z - w * y),
    );
    let tv = Vector3::new(
        2.0 * (x * y - w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + w * x),
    );
    (tu, tv)
}

/// Pulls tangent gradients back to the (not necessarily unit) quaternion `q`.
pub fn quat_tangents_vjp(q: &[f64; 4], g_tu: &Vector3<f64>, g_tv: &Vector3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let d_tu = [
        Vector3::new(0.0, 2.0 * z, -2.0 * y),
        Vector3::new(0.0, 2.0 * y, 2.0 * z),
        Vector3::new(-4.0 * y, 2.0 * x, -2.0 * w),
        Vector3::new(-4.0 * z, 2.0 * w, 2.0 * x),
    ];
    let d_tv = [
        Vector3::new(-2.0 * z, 0.0, 2.0 * x),
        Vector3::new(2.0 * y, -4.0 * x, 2.0 * w),
        Vector3::new(2.0 * x, 0.0, 2.0 * z),
        Vector3::new(-2.0 * w, -4.0 * z, 2.0 * y),
    ];
    let g_hat: [f64; 4] = std::array::from_fn(|i| g_tu.dot(&d_tu[i]) + g_tv.dot(&d_tv[i]));
    let qh = [w, x, y, z];
    let dot: f64 = (0..4).map(|i| g_hat[i] * qh[i]).sum();
    std::array::from_fn(|i| (g_hat[i] - qh[i] * dot) / n)
}

impl SurfelGaussian {
    /// Normalizes `rotation`; rejects degenerate quaternions and non-positive scales.
    pub fn new(
        center: Vector3<f64>,
        rotation: [f64; 4],
        scales: [f64; 2],
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SurfelError> {
        let n = rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n.is_nan() || n < 1e-8 {
            return Err(SurfelError::DegenerateQuaternion(n));
        }
        if !(scales[0] > 0.0 && scales[1] > 0.0) {
            return Err(SurfelError::InvalidSplat(format!("scales {scales:?} must be positive")));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(SurfelError::InvalidSplat(format!("opacity {opacity} outside [0, 1]")));
        }
        if !center.iter().chain(color.iter()).all(|v| v.is_finite()) {
            return Err(SurfelError::InvalidSplat("non-finite center or color".into()));
        }
        Ok(Self {
            center,
            rotation: rotation.map(|x| x / n),
            scales,
            opacity,
            color,
        })
    }

    /// Builds a splat from an orthonormal tangent pair.
    pub fn from_tangents(
        center: Vector3<f64>,
        t_u: Vector3<f64>,
        t_v: Vector3<f64>,
        scales: [f64; 2],
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SurfelError> {
        let t_w = t_u.cross(&t_v);
        if (t_u.norm() - 1.0).abs() > 1e-6 || (t_v.norm() - 1.0).abs() > 1e-6 || t_u.dot(&t_v).abs() > 1e-6 {
            return Err(SurfelError::InvalidSplat("tangents are not orthonormal".into()));
        }
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[t_u, t_v, t_w]));
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        Self::new(center, [q.w, q.i, q.j, q.k], scales, opacity, color)
    }

    /// Unit quaternion `(w, x, y, z)`.
    pub fn rotation(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn tangents(&self) -> (Vector3<f64>, Vector3<f64>) {
        quat_tangents(&self.rotation)
    }

    /// `t_w = t_u × t_v`
    pub fn normal(&self) -> Vector3<f64> {
        let (u, v) = self.tangents();
        u.cross(&v)
    }

    /// Point on the splat plane at local coordinates `(u, v)`.
    pub fn point_at(&self, u: f64, v: f64) -> Vector3<f64> {
        let (tu, tv) = self.tangents();
        self.center + tu * (self.scales[0] * u) + tv * (self.scales[1] * v)
    }

    /// Largest world-space radius of the cut-off footprint.
    pub fn support_radius(&self) -> f64 {
        GAUSS_CUTOFF_SQ.sqrt() * self.scales[0].max(self.scales[1])
    }
}

/// Homogeneous plane-to-world matrix with columns `[s_u t_u, s_v t_v, 0, p]`
/// over `[0, 0, 0, 1]`, so that `H (u, v, 1, 1)ᵀ = P(u, v)`.
pub fn local_to_world(s: &SurfelGaussian) -> Matrix4<f64> {
    let (tu, tv) = s.tangents();
    let a = tu * s.scales[0];
    let b = tv * s.scales[1];
    let p = s.center;
    Matrix4::from_columns(&[
        Vector4::new(a.x, a.y, a.z, 0.0),
        Vector4::new(b.x, b.y, b.z, 0.0),
        Vector4::new(0.0, 0.0, 0.0, 0.0),
        Vector4::new(p.x, p.y, p.z, 1.0),
    ])
}

/// `exp(−(u² + v²)/2)`, cut to exactly zero when `u² + v² > 18`.
pub fn eval_gaussian(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    if r2 > GAUSS_CUTOFF_SQ {
        0.0
    } else {
        (-0.5 * r2).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub u: f64,
    pub v: f64,
    /// ray parameter
    pub t: f64,
    /// camera z-depth `t · (d · forward)`
    pub depth: f64,
}

/// Solves `o + t d = p + s_u t_u u + s_v t_v v` for `(t, u, v)`.
///
/// The frame is orthonormal, so the 3×3 system decouples along `t_w` (giving
/// `t`) and along the tangents (giving `u` and `v`).
pub fn ray_splat_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    splat: &SurfelGaussian,
    forward: &Vector3<f64>,
) -> Option<RayHit> {
    let (tu, tv) = splat.tangents();
    intersect_frame(
        origin,
        dir,
        &splat.center,
        &tu,
        &tv,
        &tu.cross(&tv),
        splat.scales,
        forward,
    )
}

#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn intersect_frame(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    tu: &Vector3<f64>,
    tv: &Vector3<f64>,
    tw: &Vector3<f64>,
    scales: [f64; 2],
    forward: &Vector3<f64>,
) -> Option<RayHit> {
    let den = dir.dot(tw);
    if den.abs() < PARALLEL_EPS {
        return None;
    }
    let r = origin - center;
    let t = -r.dot(tw) / den;
    if t <= NEAR_PLANE {
        return None;
    }
    let x = r + dir * t;
    Some(RayHit {
        u: x.dot(tu) / scales[0],
        v: x.dot(tv) / scales[1],
        t,
        depth: t * dir.dot(forward),
    })
}

/// Splats plus the box that bounds them.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatScene {
    pub splats: Vec<SurfelGaussian>,
    pub bounds: Aabb,
}

impl SplatScene {
    pub fn new(splats: Vec<SurfelGaussian>) -> Self {
        let bounds = if splats.is_empty() {
            Aabb::unit()
        } else {
            let centers: Vec<Vector3<f64>> = splats.iter().map(|s| s.center).collect();
            Aabb::from_points(&centers)
        };
        Self { splats, bounds }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Every centre lies in the bounds inflated by three times the largest scale.
    pub fn check_bounds(&self) -> bool {
        let max_scale = self
            .splats
            .iter()
            .map(|s| s.scales[0].max(s.scales[1]))
            .fold(0.0, f64::max);
        self.splats
            .iter()
            .all(|s| self.bounds.contains(&s.center, 3.0 * max_scale))
    }
}

/// Fraction of splats with opacity strictly above `tau` (0 for an empty scene).
pub fn utilization_ratio(scene: &SplatScene, tau: f64) -> f64 {
    if scene.splats.is_empty() {
        return 0.0;
    }
    let effective = scene.splats.iter().filter(|s| s.opacity > tau).count();
    effective as f64 / scene.splats.len() as f64
}

pub const UTILIZATION_TAU: f64 = 0.005;

/// Raw 13-vector predicted per splat: position offset (3), scales (2),
/// quaternion (4), opacity logit (1), colour logits (3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianAttributes13(pub [f64; 13]);

impl GaussianAttributes13 {
    pub fn from_slice(raw: &[f64]) -> Result<Self, SurfelError> {
        let arr: [f64; 13] = raw.try_into().map_err(|_| SurfelError::AttributeLength(raw.len()))?;
        Ok(Self(arr))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `p = anchor + 0.05 σ tanh(offset)`, `s = 0.1 σ sigmoid(raw)`, tangents from
/// the normalized quaternion, sigmoid opacity and colour.
pub fn decode_attributes(
    raw: &GaussianAttributes13,
    anchor: &Vector3<f64>,
    scene_scale: f64,
) -> Result<SurfelGaussian, SurfelError> {
    let r = &raw.0;
    let q = [r[5], r[6], r[7], r[8]];
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn.is_nan() || qn < 1e-8 {
        return Err(SurfelError::DegenerateQuaternion(qn));
    }
    let center = anchor + Vector3::new(r[0].tanh(), r[1].tanh(), r[2].tanh()) * (0.05 * scene_scale);
    let scales = [0.1 * scene_scale * sigmoid(r[3]), 0.1 * scene_scale * sigmoid(r[4])];
    let scales = scales.map(|s| s.max(f64::MIN_POSITIVE));
    SurfelGaussian::new(
        center,
        q,
        scales,
        sigmoid(r[9]),
        Vector3::new(sigmoid(r[10]), sigmoid(r[11]), sigmoid(r[12])),
    )
}

/// Chains a splat-field gradient back through [`decode_attributes`].
pub fn decode_attributes_backward(raw: &GaussianAttributes13, scene_scale: f64, grad: &super::SplatGrad) -> [f64; 13] {
    let r = &raw.0;
    let mut out = [0.0; 13];
    for a in 0..3 {
        let th = r[a].tanh();
        out[a] = grad.center[a] * 0.05 * scene_scale * (1.0 - th * th);
    }
    for a in 0..2 {
        let s = sigmoid(r[3 + a]);
        out[3 + a] = grad.scales[a] * 0.1 * scene_scale * s * (1.0 - s);
    }
    let gq = quat_tangents_vjp(&[r[5], r[6], r[7], r[8]], &grad.t_u, &grad.t_v);
    out[5..9].copy_from_slice(&gq);
    let a = sigmoid(r[9]);
    out[9] = grad.opacity * a * (1.0 - a);
    for c in 0..3 {
        let s = sigmoid(r[10 + c]);
        out[10 + c] = grad.color[c] * s * (1.0 - s);
    }
    out
}
