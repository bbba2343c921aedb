//! Seeded synthetic datasets: analytic ray-traced views of a two-colour
//! sphere and surface samplers for the toy shape classes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::geometry::{Camera, CameraPose, PinholeIntrinsics, RenderingInput};

/// Sphere whose upper (+y) hemisphere is one colour and lower hemisphere another.
#[derive(Clone, Copy, Debug)]
pub struct TwoColorSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub top: Vector3<f64>,
    pub bottom: Vector3<f64>,
}

impl Default for TwoColorSphere {
    fn default() -> Self {
        Self {
            center: Vector3::zeros(),
            radius: 1.0,
            top: Vector3::new(0.9, 0.35, 0.2),
            bottom: Vector3::new(0.15, 0.4, 0.85),
        }
    }
}

impl TwoColorSphere {
    /// Ray parameter of the first hit, if any.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let oc = o - self.center;
        let b = oc.dot(d);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b - disc.sqrt();
        (t > 0.0).then_some(t)
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        if p.y >= self.center.y {
            self.top
        } else {
            self.bottom
        }
    }
}

/// Infinite plane `normal · x = offset`, for unprojection oracles.
#[derive(Clone, Copy, Debug)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Anything an analytic view renderer can trace.
pub trait Traceable {
    /// Ray parameter, outward unit normal and colour of the first hit.
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, Vector3<f64>)>;
}

impl Traceable for TwoColorSphere {
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
        let t = self.intersect(o, d)?;
        let p = o + d * t;
        Some((t, (p - self.center).normalize(), self.color_at(&p)))
    }
}

impl Traceable for Plane {
    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
        let den = self.normal.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset - self.normal.dot(o)) / den;
        if t <= 0.0 {
            return None;
        }
        let n = if den < 0.0 { self.normal } else { -self.normal };
        Some((t, n.normalize(), Vector3::new(0.5, 0.5, 0.5)))
    }
}

/// Ray-traces a view. Depth and normal come from the pixel-centre ray; the
/// image averages a `supersample × supersample` grid over white background.
pub fn render_view<T: Traceable>(object: &T, camera: Camera, supersample: usize) -> RenderingInput {
    let (h, w) = (camera.height(), camera.width());
    let o = camera.pose.origin();
    let rot = camera.pose.rotation();
    let forward = camera.pose.forward();
    let k = camera.intrinsics;
    let ss = supersample.max(1);
    let mut image = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    let mut normal = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            let d = camera.ray_direction(px, py);
            match object.trace(&o, &d) {
                Some((t, n, _)) => {
                    depth.push(t * d.dot(&forward));
                    normal.extend_from_slice(&[n.x, n.y, n.z]);
                }
                None => {
                    depth.push(0.0);
                    normal.extend_from_slice(&[0.0; 3]);
                }
            }
            let mut acc = Vector3::zeros();
            for sy in 0..ss {
                for sx in 0..ss {
                    let fx = px as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let fy = py as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let dir = (rot * k.camera_ray(fx, fy)).normalize();
                    acc += object
                        .trace(&o, &dir)
                        .map(|(_, _, c)| c)
                        .unwrap_or_else(|| Vector3::new(1.0, 1.0, 1.0));
                }
            }
            acc /= (ss * ss) as f64;
            image.extend_from_slice(&[acc.x, acc.y, acc.z]);
        }
    }
    RenderingInput::new(
        Tensor::new(&[h, w, 3], image).expect("image shape"),
        Tensor::new(&[h, w], depth).expect("depth shape"),
        Tensor::new(&[h, w, 3], normal).expect("normal shape"),
        camera,
    )
    .expect("analytic render satisfies view invariants")
}

/// Camera on a sphere of radius `distance` around the origin, given azimuth
/// and elevation in degrees, looking at the origin with +y up.
pub fn orbit_camera(azimuth_deg: f64, elevation_deg: f64, distance: f64, resolution: usize, fov_deg: f64) -> Camera {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = Vector3::new(
        distance * el.cos() * az.sin(),
        distance * el.sin(),
        distance * el.cos() * az.cos(),
    );
    let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).expect("orbit pose");
    let k = PinholeIntrinsics::from_fov(fov_deg.to_radians(), resolution, resolution).expect("intrinsics");
    Camera::new(pose, k)
}

/// Training and held-out views of the built-in two-colour sphere.
pub struct SphereDataset {
    pub sphere: TwoColorSphere,
    pub train: Vec<RenderingInput>,
    pub heldout: Vec<RenderingInput>,
}

/// Four training views around the equator band and two held-out views in between.
pub fn sphere_dataset(resolution: usize) -> SphereDataset {
    let sphere = TwoColorSphere::default();
    let cam = |az: f64, el: f64| orbit_camera(az, el, 3.2, resolution, 45.0);
    let train = [(0.0, 25.0), (90.0, -20.0), (180.0, 25.0), (270.0, -20.0)]
        .iter()
        .map(|&(az, el)| render_view(&sphere, cam(az, el), 3))
        .collect();
    let heldout = [(45.0, 5.0), (225.0, -5.0)]
        .iter()
        .map(|&(az, el)| render_view(&sphere, cam(az, el), 3))
        .collect();
    SphereDataset { sphere, train, heldout }
}

/// Toy shape classes for the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
        }
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    /// Uniform-area sample of one surface point.
    pub fn sample_point<R: Rng>(self, rng: &mut R) -> Vector3<f64> {
        match self {
            ShapeClass::Sphere => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vector3::new(r * phi.cos(), r * phi.sin(), z) * 0.8
            }
            ShapeClass::Cube => {
                let h = 0.6;
                let face = rng.random_range(0..6usize);
                let a = rng.random_range(-h..h);
                let b = rng.random_range(-h..h);
                let s = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => Vector3::new(s, a, b),
                    1 => Vector3::new(a, s, b),
                    _ => Vector3::new(a, b, s),
                }
            }
            ShapeClass::Torus => {
                let (big, small) = (0.7, 0.22);
                // rejection on the tube angle for uniform area density
                loop {
                    let u: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let w: f64 = rng.random_range(0.0..1.0);
                    if w <= (big + small * v.cos()) / (big + small) {
                        let r = big + small * v.cos();
                        return Vector3::new(r * u.cos(), small * v.sin(), r * u.sin());
                    }
                }
            }
        }
    }

    pub fn sample_cloud(self, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_point(&mut rng)).collect()
    }
}

/// Deterministic per-anchor features used as the stage-2 target. They vary
/// with anchor position, so a model blind to the anchors cannot fit them.
pub fn anchor_features(anchor: &Vector3<f64>, class: ShapeClass, width: usize) -> Vec<f64> {
    let base = [
        anchor.y * 1.5,
        (2.5 * anchor.x).sin(),
        (2.0 * anchor.z).cos() - 0.5,
        class.label() as f64 - 1.0,
    ];
    (0..width)
        .map(|i| {
            if i < base.len() {
                base[i]
            } else {
                (anchor.x * i as f64).sin() * 0.5
            }
        })
        .collect()
}

/// One labelled cloud of the toy shape dataset.
#[derive(Clone, Debug)]
pub struct ShapeSample {
    pub class: ShapeClass,
    pub points: Vec<Vector3<f64>>,
    pub features: Vec<Vec<f64>>,
}

/// `per_class` clouds per class, `n_points` each, deterministic in `seed`.
pub fn shape_dataset(per_class: usize, n_points: usize, feature_width: usize, seed: u64) -> Vec<ShapeSample> {
    let mut out = Vec::with_capacity(per_class * 3);
    for i in 0..per_class {
        for class in ShapeClass::ALL {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((i * 3 + class.label()) as u64);
            let points = class.sample_cloud(n_points, s);
            let features = points
                .iter()
                .map(|p| anchor_features(p, class, feature_width))
                .collect();
            out.push(ShapeSample {
                class,
                points,
                features,
            });
        }
    }
    out
}
