use nalgebra::Vector3;

use super::{Camera, GeometryError};
use crate::autodiff::Tensor;

/// Channel count of an assembled view: RGB, position, normal, Plücker.
pub const VIEW_CHANNELS: usize = 3 + 3 + 3 + 6;

/// One posed RGB-D-N view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderingInput {
    /// H×W×3 in [0, 1]
    pub image: Tensor,
    /// H×W z-depth, 0 marks background
    pub depth: Tensor,
    /// H×W×3 unit normals, zero on background
    pub normal: Tensor,
    pub camera: Camera,
}

impl RenderingInput {
    pub fn new(image: Tensor, depth: Tensor, normal: Tensor, camera: Camera) -> Result<Self, GeometryError> {
        let (h, w) = (camera.height(), camera.width());
        let expect = |name: &'static str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(GeometryError::ViewShape {
                    field: name,
                    expected: shape.to_vec(),
                    got: t.shape().to_vec(),
                })
            }
        };
        expect("image", &image, &[h, w, 3])?;
        expect("depth", &depth, &[h, w])?;
        expect("normal", &normal, &[h, w, 3])?;
        if let Some(&d) = depth.data().iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(GeometryError::InvalidView(format!(
                "depth value {d} not finite and nonnegative"
            )));
        }
        for (i, &d) in depth.data().iter().enumerate() {
            if d > 0.0 {
                let n = &normal.data()[3 * i..3 * i + 3];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > 1e-6 {
                    return Err(GeometryError::InvalidView(format!(
                        "foreground normal at pixel {i} has length {len}"
                    )));
                }
            }
        }
        Ok(Self {
            image,
            depth,
            normal,
            camera,
        })
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn foreground_count(&self) -> usize {
        self.depth.data().iter().filter(|&&d| d > 0.0).count()
    }
}

/// Per-pixel `(o × d, d)` with `d` the unit world ray through the pixel centre.
pub fn plucker_embed(camera: &Camera) -> Tensor {
    let (h, w) = (camera.height(), camera.width());
    let o = camera.pose.origin();
    let mut data = Vec::with_capacity(h * w * 6);
    for py in 0..h {
        for px in 0..w {
            let d = camera.ray_direction(px, py);
            let m = o.cross(&d);
            data.extend_from_slice(&[m.x, m.y, m.z, d.x, d.y, d.z]);
        }
    }
    Tensor::new(&[h, w, 6], data).expect("shape matches buffer")
}

/// World positions of every pixel plus a foreground mask.
///
/// `X = o + R · (D · K⁻¹ (u + ½, v + ½, 1))`. Background pixels (`D = 0`)
/// land on the camera origin and are `false` in the mask.
pub fn unproject_depth(view: &RenderingInput) -> (Tensor, Vec<bool>) {
    let cam = &view.camera;
    let (h, w) = (cam.height(), cam.width());
    let rot = cam.pose.rotation();
    let o = cam.pose.origin();
    let mut data = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            let d = view.depth.data()[py * w + px];
            let x = o + rot * (cam.intrinsics.camera_ray(px as f64, py as f64) * d);
            data.extend_from_slice(&[x.x, x.y, x.z]);
            mask.push(d > 0.0);
        }
    }
    (Tensor::new(&[h, w, 3], data).expect("shape matches buffer"), mask)
}

/// Foreground points of a view, unprojected to world space.
pub fn foreground_points(view: &RenderingInput) -> Vec<Vector3<f64>> {
    let (xyz, mask) = unproject_depth(view);
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| Vector3::new(xyz.data()[3 * i], xyz.data()[3 * i + 1], xyz.data()[3 * i + 2]))
        .collect()
}

/// H×W×15 tensor `[I ⊕ X ⊕ N ⊕ P]`. Positions of background pixels are zeroed.
pub fn assemble_view_tensor(view: &RenderingInput) -> Tensor {
    let (h, w) = (view.height(), view.width());
    let (xyz, mask) = unproject_depth(view);
    let plucker = plucker_embed(&view.camera);
    let mut data = Vec::with_capacity(h * w * VIEW_CHANNELS);
    for (i, &fg) in mask.iter().enumerate().take(h * w) {
        data.extend_from_slice(&view.image.data()[3 * i..3 * i + 3]);
        if fg {
            data.extend_from_slice(&xyz.data()[3 * i..3 * i + 3]);
        } else {
            data.extend_from_slice(&[0.0; 3]);
        }
        data.extend_from_slice(&view.normal.data()[3 * i..3 * i + 3]);
        data.extend_from_slice(&plucker.data()[6 * i..6 * i + 6]);
    }
    Tensor::new(&[h, w, VIEW_CHANNELS], data).expect("shape matches buffer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraPose, PinholeIntrinsics};
    use nalgebra::Matrix3;

    fn cam(origin: Vector3<f64>) -> Camera {
        Camera::new(
            CameraPose::new(Matrix3::identity(), origin).unwrap(),
            PinholeIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap(),
        )
    }

    #[test]
    fn plucker_moment_vanishes_at_origin() {
        let p = plucker_embed(&cam(Vector3::zeros()));
        for px in p.data().chunks_exact(6) {
            assert_eq!(&px[..3], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn plucker_cross_product_example() {
        // o = (1,0,0), d = (0,0,1): o × d = (0,−1,0)
        let o = Vector3::new(1.0, 0.0, 0.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        let m = o.cross(&d);
        assert_eq!([m.x, m.y, m.z], [0.0, -1.0, 0.0]);
        // pixel (1.5, 1.5) of a 4×4 image with cx = cy = 2 looks straight down +z
        let k = PinholeIntrinsics::new(1.0, 1.0, 2.0, 2.0, 4, 4).unwrap();
        let ray = k.camera_ray(1.5, 1.5);
        assert_eq!([ray.x, ray.y, ray.z], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn background_view_assembly() {
        let c = cam(Vector3::new(0.3, -1.0, 2.0));
        let v = RenderingInput::new(
            Tensor::zeros(&[4, 4, 3]),
            Tensor::zeros(&[4, 4]),
            Tensor::zeros(&[4, 4, 3]),
            c,
        )
        .unwrap();
        let (_, mask) = unproject_depth(&v);
        assert!(mask.iter().all(|m| !m));
        let t = assemble_view_tensor(&v);
        assert_eq!(t.shape(), &[4, 4, 15]);
        let p = plucker_embed(&c);
        for (i, px) in t.data().chunks_exact(15).enumerate() {
            assert!(px[..9].iter().all(|&x| x == 0.0));
            assert!(px[9..].iter().any(|&x| x != 0.0));
            assert_eq!(&px[9..], &p.data()[6 * i..6 * i + 6]);
        }
    }

    #[test]
    fn rejects_non_unit_foreground_normal() {
        let mut depth = Tensor::zeros(&[4, 4]);
        depth.data_mut()[5] = 1.0;
        let err = RenderingInput::new(
            Tensor::zeros(&[4, 4, 3]),
            depth,
            Tensor::zeros(&[4, 4, 3]),
            cam(Vector3::zeros()),
        );
        assert!(err.is_err());
    }
}
