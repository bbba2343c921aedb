use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfelflow::autodiff::Tensor;
use surfelflow::geometry::{Camera, CameraPose, PinholeIntrinsics, RenderingInput};
use surfelflow::surfel::*;

fn identity_camera(w: usize, h: usize, f: f64) -> Camera {
    Camera::new(
        CameraPose::identity(),
        PinholeIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
    )
}

/// Splat in the plane z = `z`, facing the camera at the origin.
fn facing(x: f64, y: f64, z: f64, scale: f64, opacity: f64, color: [f64; 3]) -> SurfelGaussian {
    SurfelGaussian::new(
        Vector3::new(x, y, z),
        [1.0, 0.0, 0.0, 0.0],
        [scale, scale],
        opacity,
        Vector3::from(color),
    )
    .unwrap()
}

const BLACK: Vector3<f64> = Vector3::new(0.0, 0.0, 0.0);

fn opts_black() -> RasterOptions {
    RasterOptions::default().with_hits().with_background(BLACK)
}

#[test]
fn empty_scene_shows_background() {
    let cam = identity_camera(20, 12, 10.0);
    let r = rasterize(&SplatScene::empty(), &cam, &RasterOptions::default());
    assert!(r.color.data().iter().all(|&c| c == 1.0));
    assert!(r.alpha.data().iter().all(|&a| a == 0.0));
}

#[test]
fn single_term_blend() {
    // the only pixel centre of a 1×1 image lies on the optical axis
    let cam = identity_camera(1, 1, 1.0);
    let scene = SplatScene::new(vec![facing(0.0, 0.0, 4.0, 1.0, 0.5, [1.0, 0.0, 0.0])]);
    let r = rasterize(&scene, &cam, &opts_black());
    assert_eq!(r.color.data(), &[0.5, 0.0, 0.0]);
    assert_eq!(r.alpha.data(), &[0.5]);
    assert_eq!(r.depth.data(), &[4.0]);
}

#[test]
fn two_term_blend() {
    let cam = identity_camera(1, 1, 1.0);
    let scene = SplatScene::new(vec![
        facing(0.0, 0.0, 3.0, 1.0, 1.0, [1.0, 1.0, 1.0]),
        facing(0.0, 0.0, 2.0, 1.0, 0.5, [1.0, 1.0, 1.0]),
    ]);
    let r = rasterize(&scene, &cam, &opts_black());
    assert_eq!(r.color.data(), &[1.0, 1.0, 1.0]);
    let hits = &r.hits.as_ref().unwrap()[0];
    assert_eq!(hits.len(), 2);
    assert_eq!(hits[0].depth, 2.0);
    assert_eq!([hits[0].weight, hits[1].weight], [0.5, 0.5]);
}

#[test]
fn distortion_examples() {
    let cam = identity_camera(1, 1, 1.0);
    let two = SplatScene::new(vec![
        facing(0.0, 0.0, 1.0, 1.0, 0.5, [1.0; 3]),
        facing(0.0, 0.0, 2.0, 1.0, 1.0, [1.0; 3]),
    ]);
    let r = rasterize(&two, &cam, &opts_black());
    // brute force over ordered pairs
    let hits = &r.hits.as_ref().unwrap()[0];
    let mut brute = 0.0;
    for a in hits {
        for b in hits {
            brute += a.weight * b.weight * (a.depth - b.depth).abs();
        }
    }
    assert_eq!(brute, 0.5);
    assert_eq!(distortion_loss(&r).unwrap(), 0.5);

    let same = SplatScene::new(vec![
        facing(0.0, 0.0, 3.0, 1.0, 0.3, [1.0; 3]),
        facing(0.0, 0.0, 3.0, 2.0, 0.7, [0.0; 3]),
    ]);
    assert_eq!(distortion_loss(&rasterize(&same, &cam, &opts_black())).unwrap(), 0.0);

    let one = SplatScene::new(vec![facing(0.0, 0.0, 3.0, 1.0, 0.3, [1.0; 3])]);
    let big = identity_camera(16, 16, 10.0);
    assert_eq!(distortion_loss(&rasterize(&one, &big, &opts_black())).unwrap(), 0.0);
    assert!(matches!(
        distortion_loss(&rasterize(&one, &big, &RasterOptions::default())),
        Err(SurfelError::MissingForwardRecord)
    ));
}

#[test]
fn normal_loss_examples() {
    let cam = identity_camera(1, 1, 1.0);
    let towards_camera = Tensor::new(&[1, 1, 3], vec![0.0, 0.0, -1.0]).unwrap();
    let opaque = SplatScene::new(vec![facing(0.0, 0.0, 3.0, 1.0, 1.0, [1.0; 3])]);
    let r = rasterize(&opaque, &cam, &opts_black());
    // identity frame has t_w = +z, facing away; the flip makes it −z
    assert_eq!(r.hits.as_ref().unwrap()[0][0].normal, Vector3::new(0.0, 0.0, -1.0));
    assert_eq!(normal_loss(&r, &towards_camera).unwrap(), 0.0);

    let half = SplatScene::new(vec![facing(0.0, 0.0, 3.0, 1.0, 0.5, [1.0; 3])]);
    let r = rasterize(&half, &cam, &opts_black());
    let perpendicular = Tensor::new(&[1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    assert_eq!(normal_loss(&r, &perpendicular).unwrap(), 0.5);

    // a splat seen exactly edge-on is a miss
    let edge_on = SurfelGaussian::from_tangents(
        Vector3::new(0.0, 0.0, 3.0),
        Vector3::x(),
        Vector3::z(),
        [1.0, 1.0],
        1.0,
        Vector3::new(1.0, 1.0, 1.0),
    )
    .unwrap();
    assert!(rasterize(&SplatScene::new(vec![edge_on]), &cam, &opts_black())
        .hits
        .unwrap()[0]
        .is_empty());
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatScene {
    SplatScene::new(
        (0..n)
            .map(|_| {
                SurfelGaussian::new(
                    Vector3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(3.0..5.0),
                    ),
                    [
                        1.0,
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                    ],
                    [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
                    rng.random_range(0.2..0.9),
                    Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
                )
                .unwrap()
            })
            .collect(),
    )
}

#[test]
fn blend_weights_sum_to_alpha_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = identity_camera(24, 20, 20.0);
    for _ in 0..5 {
        let scene = random_scene(&mut rng, 12);
        let r = rasterize(&scene, &cam, &opts_black());
        for (i, hits) in r.hits.as_ref().unwrap().iter().enumerate() {
            let mut sum = 0.0;
            for h in hits {
                sum += h.weight;
            }
            assert_eq!(sum, r.alpha.data()[i]);
            assert!((0.0..=1.0).contains(&sum));
            for c in &r.color.data()[3 * i..3 * i + 3] {
                assert!(*c <= 1.0 + 1e-12);
            }
        }
    }
}

#[test]
fn permutation_and_threading_leave_pixels_bitwise_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = identity_camera(40, 36, 30.0);
    let mut scene = random_scene(&mut rng, 30);
    // coplanar splats produce exact depth ties
    scene.splats.push(facing(0.1, 0.0, 3.5, 0.4, 0.6, [0.2, 0.8, 0.1]));
    scene.splats.push(facing(-0.1, 0.05, 3.5, 0.5, 0.4, [0.9, 0.1, 0.3]));
    let scene = SplatScene::new(scene.splats);
    let base = rasterize(&scene, &cam, &RasterOptions::default());
    let serial = rasterize(
        &scene,
        &cam,
        &RasterOptions {
            parallel: false,
            ..RasterOptions::default()
        },
    );
    assert_eq!(base.color, serial.color);
    for _ in 0..5 {
        let mut splats = scene.splats.clone();
        splats.shuffle(&mut rng);
        let r = rasterize(&SplatScene::new(splats), &cam, &RasterOptions::default());
        assert_eq!(r.color, base.color);
        assert_eq!(r.alpha, base.alpha);
        assert_eq!(r.depth, base.depth);
        assert_eq!(r.normal, base.normal);
    }
}

#[test]
fn tiles_do_not_drop_intersections() {
    // brute-force every splat for every pixel and compare hit counts
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cam = Camera::new(
        CameraPose::look_at(Vector3::new(0.5, -0.3, -1.0), Vector3::new(0.0, 0.0, 4.0), Vector3::y()).unwrap(),
        PinholeIntrinsics::new(40.0, 40.0, 25.0, 20.0, 50, 40).unwrap(),
    );
    let mut splats = random_scene(&mut rng, 20).splats;
    for s in &mut splats {
        s.scales = [s.scales[0] * 0.2, s.scales[1] * 0.2];
    }
    let scene = SplatScene::new(splats);
    let r = rasterize(&scene, &cam, &RasterOptions::default().with_hits());
    for py in 0..40 {
        for px in 0..50 {
            let d = cam.ray_direction(px, py);
            let mut count = 0;
            for s in &scene.splats {
                if let Some(h) = ray_splat_intersect(&cam.pose.origin(), &d, s, &cam.pose.forward()) {
                    if eval_gaussian(h.u, h.v) > 0.0 {
                        count += 1;
                    }
                }
            }
            let hits = &r.hits.as_ref().unwrap()[py * 50 + px];
            let terminated = r.final_transmittance[py * 50 + px] < TRANSMITTANCE_EPS;
            assert!(hits.len() == count || (terminated && hits.len() < count));
        }
    }
}

#[test]
fn color_gradient_is_sum_of_blend_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = identity_camera(16, 16, 14.0);
    let scene = random_scene(&mut rng, 4);
    let r = rasterize(&scene, &cam, &opts_black());
    let grads = OutputGrads {
        color: Some(vec![1.0; 16 * 16 * 3]),
        ..Default::default()
    };
    let g = rasterize_backward(&scene, &r, &grads, None).unwrap();
    let mut expected = [0.0; 4];
    for hits in r.hits.as_ref().unwrap() {
        for h in hits {
            expected[h.splat as usize] += h.weight;
        }
    }
    for k in 0..4 {
        for c in 0..3 {
            assert!((g[k].color[c] - expected[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn occluded_splat_gets_no_opacity_gradient() {
    let cam = identity_camera(8, 8, 8.0);
    let scene = SplatScene::new(vec![
        facing(0.0, 0.0, 2.0, 100.0, 1.0, [0.0, 0.0, 0.0]),
        facing(0.0, 0.0, 5.0, 1.0, 0.6, [1.0, 0.0, 0.0]),
    ]);
    let r = rasterize(&scene, &cam, &opts_black());
    let grads = OutputGrads {
        color: Some(vec![1.0; 8 * 8 * 3]),
        alpha: Some(vec![1.0; 64]),
        ..Default::default()
    };
    let g = rasterize_backward(&scene, &r, &grads, None).unwrap();
    assert_eq!(g[1].opacity, 0.0);
    assert_eq!(g[1], SplatGrad::default());
    assert!(rasterize_backward(
        &scene,
        &rasterize(&scene, &cam, &RasterOptions::default()),
        &grads,
        None
    )
    .is_err());
}

/// Scalar loss touching every render output plus both regularizers.
struct Probe {
    wc: Vec<f64>,
    wa: Vec<f64>,
    wd: Vec<f64>,
    wn: Vec<f64>,
    target: Tensor,
}

const LD_WEIGHT: f64 = 3.0;
const LN_WEIGHT: f64 = 0.7;

impl Probe {
    fn new(rng: &mut ChaCha8Rng, px: usize) -> Self {
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let wc = r(3 * px);
        let wa = r(px);
        let wd = r(px).into_iter().map(|x| 0.2 * x).collect();
        let wn = r(3 * px);
        let raw = r(3 * px);
        let target = raw
            .chunks(3)
            .flat_map(|c| {
                let v = Vector3::new(c[0], c[1], c[2] - 2.0).normalize();
                [v.x, v.y, v.z]
            })
            .collect();
        Self {
            wc,
            wa,
            wd,
            wn,
            target: Tensor::new(&[16, 16, 3], target).unwrap(),
        }
    }

    fn loss(&self, scene: &SplatScene, cam: &Camera) -> f64 {
        let r = rasterize(scene, cam, &RasterOptions::default().with_hits());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&self.wc, r.color.data())
            + dot(&self.wa, r.alpha.data())
            + dot(&self.wd, r.depth.data())
            + dot(&self.wn, r.normal.data())
            + LD_WEIGHT * distortion_loss(&r).unwrap()
            + LN_WEIGHT * normal_loss(&r, &self.target).unwrap()
    }

    fn grad(&self, scene: &SplatScene, cam: &Camera) -> Vec<SplatGrad> {
        let r = rasterize(scene, cam, &RasterOptions::default().with_hits());
        let mut hg = distortion_loss_grad(&r, LD_WEIGHT).unwrap();
        hg.add_assign(&normal_loss_grad(&r, &self.target, LN_WEIGHT).unwrap());
        let out = OutputGrads {
            color: Some(self.wc.clone()),
            alpha: Some(self.wa.clone()),
            depth: Some(self.wd.clone()),
            normal: Some(self.wn.clone()),
        };
        rasterize_backward(scene, &r, &out, Some(&hg)).unwrap()
    }
}

fn perturbed(scene: &SplatScene, k: usize, field: usize, delta: f64) -> SplatScene {
    let mut splats = scene.splats.clone();
    let s = splats[k];
    let mut center = s.center;
    let mut q = s.rotation();
    let mut scales = s.scales;
    let mut opacity = s.opacity;
    let mut color = s.color;
    match field {
        0..=2 => center[field] += delta,
        3..=6 => q[field - 3] += delta,
        7..=8 => scales[field - 7] += delta,
        9 => opacity += delta,
        _ => color[field - 10] += delta,
    }
    splats[k] = SurfelGaussian::new(center, q, scales, opacity, color).unwrap();
    SplatScene::new(splats)
}

fn analytic_field(s: &SurfelGaussian, g: &SplatGrad, field: usize) -> f64 {
    match field {
        0..=2 => g.center[field],
        3..=6 => g.quaternion(s)[field - 3],
        7..=8 => g.scales[field - 7],
        9 => g.opacity,
        _ => g.color[field - 10],
    }
}

/// Depth-layered splats with small tilts: no two planes cross inside the
/// frustum and every cut-off circle covers the whole image, so the loss is
/// smooth and central differences are a valid oracle.
fn layered_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatScene {
    SplatScene::new(
        (0..n)
            .map(|k| {
                SurfelGaussian::new(
                    Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        3.0 + 0.6 * k as f64,
                    ),
                    [
                        1.0,
                        rng.random_range(-0.025..0.025),
                        rng.random_range(-0.025..0.025),
                        rng.random_range(-0.4..0.4),
                    ],
                    [rng.random_range(0.7..1.2), rng.random_range(0.7..1.2)],
                    rng.random_range(0.2..0.9),
                    Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
                )
                .unwrap()
            })
            .collect(),
    )
}

#[test]
fn backward_matches_finite_differences() {
    let cam = identity_camera(16, 16, 16.0);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let scene = layered_scene(&mut rng, 5);
        let probe = Probe::new(&mut rng, 256);
        let grads = probe.grad(&scene, &cam);
        for (k, (splat, grad)) in scene.splats.iter().zip(&grads).enumerate() {
            for field in 0..13 {
                let eps = if field <= 8 { 1e-4 } else { 1e-5 };
                let up = probe.loss(&perturbed(&scene, k, field, eps), &cam);
                let down = probe.loss(&perturbed(&scene, k, field, -eps), &cam);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = analytic_field(splat, grad, field);
                let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "seed {seed} splat {k} field {field}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
    println!("worst relative error {worst:.3e}");
}

fn view_from_render(scene: &SplatScene, cam: Camera) -> RenderingInput {
    let r = rasterize(scene, &cam, &RasterOptions::default());
    let n = cam.width() * cam.height();
    let mut depth = vec![0.0; n];
    let mut normal = vec![0.0; 3 * n];
    for i in 0..n {
        if r.alpha.data()[i] > 0.0 {
            depth[i] = r.depth.data()[i];
            let v = Vector3::from_column_slice(&r.normal.data()[3 * i..3 * i + 3]).normalize();
            normal[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
    }
    RenderingInput::new(
        r.color,
        Tensor::new(&[cam.height(), cam.width()], depth).unwrap(),
        Tensor::new(&[cam.height(), cam.width(), 3], normal).unwrap(),
        cam,
    )
    .unwrap()
}

#[test]
fn ground_truth_splats_are_a_fixed_point() {
    let cam = identity_camera(32, 32, 32.0);
    let gt = SplatScene::new(vec![
        facing(-0.45, -0.45, 4.0, 0.05, 0.9, [0.8, 0.2, 0.1]),
        facing(0.45, -0.45, 4.0, 0.05, 0.7, [0.1, 0.7, 0.3]),
        facing(-0.45, 0.45, 4.0, 0.05, 0.8, [0.2, 0.3, 0.9]),
        facing(0.45, 0.45, 4.0, 0.05, 0.6, [0.6, 0.6, 0.2]),
    ]);
    let view = view_from_render(&gt, cam);
    let opts = FitOptions {
        iters: 100,
        ..FitOptions::default()
    };
    let fit = fit_splats(&[view], &gt, &opts).unwrap();
    assert_eq!(fit.log.len(), 100);
    assert!(fit.log.iter().all(|r| r.total < 1e-9), "{:?}", fit.log[0]);
    let before = splat_params(&gt);
    let after = splat_params(&fit.scene);
    for (a, b) in before.iter().zip(&after) {
        assert!(a.max_abs_diff(b) < 1e-3, "drift {}", a.max_abs_diff(b));
    }
}

#[test]
fn fit_rejects_missing_views() {
    assert!(matches!(
        fit_splats(&[], &SplatScene::empty(), &FitOptions::default()),
        Err(SurfelError::NoViews)
    ));
}
