use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfelflow::autodiff::{Tape, Tensor};
use surfelflow::flow::*;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_vec((0..n).map(|_| StandardNormal.sample(rng)).collect())
}

const SCHEDULES: [Schedule; 2] = [Schedule::Gvp, Schedule::Linear];

#[test]
fn eps_round_trip_and_two_velocity_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_rt: f64 = 0.0;
    let mut worst_u: f64 = 0.0;
    for s in SCHEDULES {
        for _ in 0..1000 {
            let t = rng.random_range(0.01..0.99);
            let x0 = randn(&mut rng, 6);
            let eps = randn(&mut rng, 6);
            let z = forward_interpolate(&x0, &eps, t, s).unwrap();
            let v = velocity_target(&x0, &eps, t, s).unwrap();
            worst_rt = worst_rt.max(eps_from_v(&v, &z, t, s).unwrap().max_abs_diff(&eps));
            worst_u = worst_u.max(velocity_from_eps(&z, &eps, t, s).unwrap().max_abs_diff(&v));
        }
        for t in [0.1, 0.5, 0.9] {
            let x0 = randn(&mut rng, 4);
            let eps = randn(&mut rng, 4);
            let z = forward_interpolate(&x0, &eps, t, s).unwrap();
            let v = velocity_target(&x0, &eps, t, s).unwrap();
            worst_rt = worst_rt.max(eps_from_v(&v, &z, t, s).unwrap().max_abs_diff(&eps));
        }
    }
    assert!(worst_rt < 1e-10, "round trip {worst_rt}");
    assert!(worst_u < 1e-10, "u_t forms {worst_u}");
}

#[test]
fn noiseless_case_recovers_zero_noise() {
    let x0 = Tensor::from_vec(vec![0.3, -1.2]);
    let zero = Tensor::zeros(&[2]);
    for s in SCHEDULES {
        let z = forward_interpolate(&x0, &zero, 0.4, s).unwrap();
        let v = velocity_target(&x0, &zero, 0.4, s).unwrap();
        assert!(eps_from_v(&v, &z, 0.4, s).unwrap().max_abs_diff(&zero) < 1e-14);
    }
}

#[test]
fn gvp_preserves_variance_on_dense_grid() {
    let n = 10_000;
    let worst = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let e = schedule_eval(Schedule::Gvp, t).unwrap();
            (e.a * e.a + e.b * e.b - 1.0).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn gvp_midpoint_log_snr_slope_and_weight() {
    let snr = Schedule::Gvp.snr(0.5).unwrap();
    assert!((snr.dlambda + 2.0 * PI).abs() < 1e-9);
    assert!((snr.w_fm - PI / 2.0).abs() < 1e-9);
    // independent check: central difference of λ(t) = log(cot²(πt/2))
    let lambda = |t: f64| ((PI * t / 2.0).cos().powi(2) / (PI * t / 2.0).sin().powi(2)).ln();
    let h = 1e-5;
    let fd = (lambda(0.5 + h) - lambda(0.5 - h)) / (2.0 * h);
    assert!((fd + 2.0 * PI).abs() < 1e-8, "fd {fd}");
    assert!((fd - snr.dlambda).abs() < 1e-8);
    // and across the interior against −2π / sin(πt)
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let d = Schedule::Gvp.snr(t).unwrap().dlambda;
        assert!((d + 2.0 * PI / (PI * t).sin()).abs() < 1e-9 * d.abs().max(1.0));
    }
}

#[test]
fn loss_weight_sign_table() {
    for s in SCHEDULES {
        for i in 1..1000 {
            let t = i as f64 / 1000.0;
            let w = fm_weight(t, s).unwrap();
            assert!(w >= 0.0 && w.is_finite(), "{s:?} t={t} weight {w}");
            let e = schedule_eval(s, t).unwrap();
            // −½ w_fm λ' with w_fm = −½ λ' b² is (b λ' / 2)²
            let expect = (e.b * e.dlambda / 2.0).powi(2);
            assert!((w - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }
}

#[test]
fn velocity_target_matches_time_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = randn(&mut rng, 5);
    let eps = randn(&mut rng, 5);
    let h = 1e-6;
    for s in SCHEDULES {
        for t in [0.05, 0.3, 0.7, 0.95] {
            let zp = forward_interpolate(&x0, &eps, t + h, s).unwrap();
            let zm = forward_interpolate(&x0, &eps, t - h, s).unwrap();
            let fd: Vec<f64> = zp
                .data()
                .iter()
                .zip(zm.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            let v = velocity_target(&x0, &eps, t, s).unwrap();
            assert!(v.max_abs_diff(&Tensor::from_vec(fd)) < 1e-6);
        }
    }
    let v = velocity_target(&x0, &eps, 0.0, Schedule::Gvp).unwrap();
    assert!(v.max_abs_diff(&eps.map(|e| e * PI / 2.0)) < 1e-15);
    let v = velocity_target(&x0, &eps, 0.37, Schedule::Linear).unwrap();
    let diff: Vec<f64> = eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect();
    assert_eq!(v, Tensor::from_vec(diff));
}

#[test]
fn endpoints_interpolate_exactly() {
    let x0 = Tensor::from_vec(vec![1.5, -2.0]);
    let eps = Tensor::from_vec(vec![0.25, 3.0]);
    for s in SCHEDULES {
        assert_eq!(forward_interpolate(&x0, &eps, 0.0, s).unwrap(), x0);
    }
    assert_eq!(forward_interpolate(&x0, &eps, 1.0, Schedule::Linear).unwrap(), eps);
    assert!(
        forward_interpolate(&x0, &eps, 1.0, Schedule::Gvp)
            .unwrap()
            .max_abs_diff(&eps)
            < 1e-15
    );
    assert!(forward_interpolate(&x0, &Tensor::zeros(&[3]), 0.5, Schedule::Gvp).is_err());
}

#[test]
fn fm_loss_forms_agree_and_scale_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in SCHEDULES {
        for _ in 0..50 {
            let t = rng.random_range(0.01..0.99);
            let x0 = randn(&mut rng, 8);
            let eps = randn(&mut rng, 8);
            let v = velocity_target(&x0, &eps, t, s).unwrap();
            assert!(fm_loss(&v, &x0, &eps, t, s).unwrap().abs() < 1e-20);
            let dv = randn(&mut rng, 8);
            let pred = |k: f64| Tensor::from_vec(v.data().iter().zip(dv.data()).map(|(a, b)| a + k * b).collect());
            let l1 = fm_loss(&pred(1.0), &x0, &eps, t, s).unwrap();
            let l2 = fm_loss(&pred(2.0), &x0, &eps, t, s).unwrap();
            let lv = fm_loss_v(&pred(1.0), &x0, &eps, t, s).unwrap();
            assert!(l1 >= 0.0);
            assert!((l2 - 4.0 * l1).abs() < 1e-9 * l2.max(1.0));
            assert!((l1 - lv).abs() < 1e-9 * lv.max(1.0), "{s:?} t={t}: {l1} vs {lv}");
            let tape = Tape::new();
            let lvar = fm_loss_var(tape.param(pred(1.0)), &x0, &eps, t, s).unwrap();
            assert!((lvar.item() - l1).abs() < 1e-9 * l1.max(1.0));
        }
    }
    let nan = Tensor::from_vec(vec![f64::NAN]);
    let one = Tensor::from_vec(vec![1.0]);
    assert!(matches!(
        fm_loss(&nan, &one, &one, 0.5, Schedule::Gvp),
        Err(FlowError::NonFinite(_))
    ));
}

#[test]
fn fm_loss_var_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = randn(&mut rng, 4);
    let eps = randn(&mut rng, 4);
    let pred = randn(&mut rng, 4);
    for s in SCHEDULES {
        let err = surfelflow::autodiff::grad_check(
            |_, v| {
                fm_loss_var(v, &x0, &eps, 0.3, s).map_err(|e| match e {
                    FlowError::Shape(a) => a,
                    other => panic!("{other}"),
                })
            },
            &pred,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

/// Exact marginal velocity when the data is `N(μ, σ²)` per coordinate and the
/// path is linear: `m_t = (1−t)μ`, `s_t² = (1−t)²σ² + t²`, and the flow maps
/// `z ↦ m_t + s_t ẑ` for fixed standardized `ẑ`, so `v = m' + (s'/s)(z − m)`.
fn gaussian_velocity(mu: f64, sigma: f64, z: f64, t: f64) -> f64 {
    let m = (1.0 - t) * mu;
    let s2 = (1.0 - t).powi(2) * sigma * sigma + t * t;
    let ds = (-(1.0 - t) * sigma * sigma + t) / s2.sqrt();
    -mu + ds / s2.sqrt() * (z - m)
}

#[test]
fn euler_converges_at_first_order() {
    let (mu, sigma) = (0.7, 0.3);
    let shape = [16];
    let seed = 3;
    let z1 = gaussian_noise(&shape, seed);
    // the ODE maps noise ε at t = 1 to μ + σ ε at t = 0, but the sampler
    // only ever sees clamped times; the model clamps nothing itself
    let exact = z1.map(|e| mu + sigma * e);
    let steps = [8usize, 16, 32, 64, 128];
    let errors: Vec<f64> = steps
        .iter()
        .map(|&n| {
            let out = ode_sample(
                |z: &Tensor, t, _| Ok(z.map(|zi| gaussian_velocity(mu, sigma, zi, t))),
                n,
                None,
                seed,
                &shape,
            )
            .unwrap();
            out.max_abs_diff(&exact)
        })
        .collect();
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() <= 0.1, "slope {slope}, errors {errors:?}");
}

#[test]
fn point_mass_straight_path_is_exact() {
    let x0 = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    for steps in [1, 7, 64] {
        let out = ode_sample(
            |z: &Tensor, t, _| {
                // x̂0 = (z − t ε) / (1 − t) is unknown to the model; on a
                // point mass the marginal velocity is (z − x0) / t
                Ok(Tensor::from_vec(
                    z.data().iter().zip(x0.data()).map(|(zi, xi)| (zi - xi) / t).collect(),
                ))
            },
            steps,
            None,
            4,
            &[3],
        )
        .unwrap();
        // with clamped times the first step uses t = 1 − 1e-3, so a single
        // step stops within 1e-3 relative of x0
        assert!(out.max_abs_diff(&x0) < 1e-2, "steps {steps}: {out:?}");
    }
}

#[test]
fn single_step_lands_on_the_read_off_endpoint() {
    // at t = 1 the state is pure noise, so the model can read ε = z and
    // return v = ε − x̂0 exactly; one Euler step of size 1 gives z − v = x̂0
    let x_hat = Tensor::from_vec(vec![0.25, -0.5, 1.5, 3.0]);
    let out = ode_sample(
        |z: &Tensor, _, _| {
            Ok(Tensor::from_vec(
                z.data().iter().zip(x_hat.data()).map(|(e, x)| e - x).collect(),
            ))
        },
        1,
        None,
        17,
        &[4],
    )
    .unwrap();
    assert!(out.max_abs_diff(&x_hat) < 1e-14, "{out:?}");
}

#[test]
fn sampler_is_deterministic_and_guided() {
    let model = |z: &Tensor, t: f64, b: Branch| {
        let k = if b == Branch::Conditional { 1.0 } else { 0.2 };
        Ok(z.map(|x| k * x * t + 0.1))
    };
    let a = ode_sample(model, 32, Some(4.0), 99, &[5, 2]).unwrap();
    let b = ode_sample(model, 32, Some(4.0), 99, &[5, 2]).unwrap();
    let c = ode_sample(model, 32, Some(1.0), 99, &[5, 2]).unwrap();
    let d = ode_sample(model, 32, None, 99, &[5, 2]).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(c.data(), d.data());
    assert_ne!(a.data(), c.data());
    assert!(ode_sample(model, 0, None, 1, &[1]).is_err());
    let nan = ode_sample(|z: &Tensor, _, _| Ok(z.map(|_| f64::NAN)), 4, None, 1, &[2]);
    assert!(matches!(nan, Err(FlowError::NonFinite(_))));
}
