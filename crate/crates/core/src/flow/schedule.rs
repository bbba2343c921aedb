use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::autodiff::{AutodiffError, Tensor, Var};

/// Training and integration times are kept inside `[T_MIN, 1 − T_MIN]`.
pub const T_MIN: f64 = 1e-3;

/// Interpolation path `z_t = a(t) x0 + b(t) ε`, data at t = 0 and noise at t = 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `a = cos(πt/2)`, `b = sin(πt/2)`
    Gvp,
    /// `a = 1 − t`, `b = t`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEval {
    pub a: f64,
    pub b: f64,
    pub da: f64,
    pub db: f64,
    /// `log(a² / b²)`
    pub lambda: f64,
    /// `2(a'/a − b'/b)`
    pub dlambda: f64,
}

/// Log-SNR, its derivative and the flow-matching weight `−½ λ' b²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrTerms {
    pub lambda: f64,
    pub dlambda: f64,
    pub w_fm: f64,
}

impl Schedule {
    pub fn a(self, t: f64) -> f64 {
        match self {
            Schedule::Gvp => (FRAC_PI_2 * t).cos(),
            Schedule::Linear => 1.0 - t,
        }
    }

    pub fn b(self, t: f64) -> f64 {
        match self {
            Schedule::Gvp => (FRAC_PI_2 * t).sin(),
            Schedule::Linear => t,
        }
    }

    pub fn da(self, t: f64) -> f64 {
        match self {
            Schedule::Gvp => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            Schedule::Linear => -1.0,
        }
    }

    pub fn db(self, t: f64) -> f64 {
        match self {
            Schedule::Gvp => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
            Schedule::Linear => 1.0,
        }
    }

    pub fn snr(self, t: f64) -> Result<SnrTerms, FlowError> {
        let e = schedule_eval(self, t)?;
        Ok(SnrTerms {
            lambda: e.lambda,
            dlambda: e.dlambda,
            w_fm: -0.5 * e.dlambda * e.b * e.b,
        })
    }
}

/// `(a, b, a', b', λ, λ')` at `t ∈ [0, 1]`. At the endpoints λ is ±∞ and λ'
/// is −∞ (both schedules), never NaN.
pub fn schedule_eval(s: Schedule, t: f64) -> Result<ScheduleEval, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeRange(t));
    }
    let (a, b, da, db) = (s.a(t), s.b(t), s.da(t), s.db(t));
    let (lambda, dlambda) = if t == 0.0 {
        (f64::INFINITY, f64::NEG_INFINITY)
    } else if t == 1.0 {
        (f64::NEG_INFINITY, f64::NEG_INFINITY)
    } else {
        ((a * a / (b * b)).ln(), 2.0 * (da / a - db / b))
    };
    Ok(ScheduleEval {
        a,
        b,
        da,
        db,
        lambda,
        dlambda,
    })
}

fn interior(t: f64) -> Result<(), FlowError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(FlowError::Endpoint(t))
    }
}

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<(), FlowError> {
    if x.shape() == y.shape() {
        Ok(())
    } else {
        Err(FlowError::Shape(AutodiffError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }))
    }
}

fn affine(x: &Tensor, y: &Tensor, p: f64, q: f64) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(a, b)| p * a + q * b).collect();
    Tensor::new(x.shape(), data).expect("shapes checked")
}

/// `a(t) x0 + b(t) ε`
pub fn forward_interpolate(x0: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<Tensor, FlowError> {
    same_shape("forward_interpolate", x0, eps)?;
    let e = schedule_eval(s, t)?;
    Ok(affine(x0, eps, e.a, e.b))
}

/// `a'(t) x0 + b'(t) ε`
pub fn velocity_target(x0: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<Tensor, FlowError> {
    same_shape("velocity_target", x0, eps)?;
    let e = schedule_eval(s, t)?;
    Ok(affine(x0, eps, e.da, e.db))
}

/// `(−2 / (λ' b)) (v − (a'/a) z)`, interior t only.
pub fn eps_from_v(v: &Tensor, z: &Tensor, t: f64, s: Schedule) -> Result<Tensor, FlowError> {
    same_shape("eps_from_v", v, z)?;
    interior(t)?;
    let e = schedule_eval(s, t)?;
    let k = -2.0 / (e.dlambda * e.b);
    Ok(affine(v, z, k, -k * e.da / e.a))
}

/// `(a'/a) z − (b/2) λ' ε`, the second form of the conditional velocity.
pub fn velocity_from_eps(z: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<Tensor, FlowError> {
    same_shape("velocity_from_eps", z, eps)?;
    interior(t)?;
    let e = schedule_eval(s, t)?;
    Ok(affine(z, eps, e.da / e.a, -0.5 * e.b * e.dlambda))
}

/// Multiplier of `mean‖ε̂ − ε‖²` in the flow-matching loss, `−½ w_fm λ'`.
pub fn fm_weight(t: f64, s: Schedule) -> Result<f64, FlowError> {
    interior(t)?;
    let snr = s.snr(t)?;
    Ok(-0.5 * snr.w_fm * snr.dlambda)
}

/// `−½ w_fm λ' · mean‖ε̂ − ε‖²` with `ε̂ = eps_from_v(model_v, z_t)`.
pub fn fm_loss(model_v: &Tensor, x0: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<f64, FlowError> {
    same_shape("fm_loss", model_v, x0)?;
    if !model_v.is_finite() {
        return Err(FlowError::NonFinite("model velocity".into()));
    }
    let z = forward_interpolate(x0, eps, t, s)?;
    let eps_hat = eps_from_v(model_v, &z, t, s)?;
    let mse = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / eps.len() as f64;
    Ok(fm_weight(t, s)? * mse)
}

/// The same loss in velocity form, `mean‖v̂ − v‖²`, which it equals exactly
/// after substituting the weight.
pub fn fm_loss_v(model_v: &Tensor, x0: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<f64, FlowError> {
    let v = velocity_target(x0, eps, t, s)?;
    same_shape("fm_loss_v", model_v, &v)?;
    Ok(model_v
        .data()
        .iter()
        .zip(v.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / v.len() as f64)
}

/// Differentiable [`fm_loss`]: `ε̂ − ε` is affine in the predicted velocity,
/// so the loss is built in the ε-domain directly on the tape.
pub fn fm_loss_var<'t>(model_v: Var<'t>, x0: &Tensor, eps: &Tensor, t: f64, s: Schedule) -> Result<Var<'t>, FlowError> {
    same_shape("fm_loss_var", &model_v.value(), x0)?;
    let z = forward_interpolate(x0, eps, t, s)?;
    let e = schedule_eval(s, t)?;
    interior(t)?;
    let k = -2.0 / (e.dlambda * e.b);
    // ε̂ − ε = k v̂ + c
    let c = affine(&z, eps, -k * e.da / e.a, -1.0);
    let tape = model_v.tape();
    let diff = model_v.scale(k).add(tape.constant(c))?;
    Ok(diff.square()?.mean_all().scale(fm_weight(t, s)?))
}

/// `v_uncond + scale · (v_cond − v_uncond)`
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor, FlowError> {
    same_shape("cfg_combine", v_cond, v_uncond)?;
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    Ok(Tensor::new(v_cond.shape(), data).expect("shapes checked"))
}

/// Clamps a time into `[T_MIN, 1 − T_MIN]`.
pub fn clamp_time(t: f64) -> f64 {
    t.clamp(T_MIN, 1.0 - T_MIN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_sentinels() {
        for s in [Schedule::Gvp, Schedule::Linear] {
            let e0 = schedule_eval(s, 0.0).unwrap();
            let e1 = schedule_eval(s, 1.0).unwrap();
            assert_eq!((e0.a, e0.b, e1.a, e1.b), (1.0, 0.0, s.a(1.0), 1.0));
            assert!(e1.a.abs() < 1e-16);
            assert_eq!(e0.lambda, f64::INFINITY);
            assert_eq!(e1.lambda, f64::NEG_INFINITY);
            assert_eq!(e0.dlambda, f64::NEG_INFINITY);
            assert_eq!(e1.dlambda, f64::NEG_INFINITY);
            assert!(schedule_eval(s, 1.5).is_err());
            assert!(eps_from_v(&Tensor::zeros(&[2]), &Tensor::zeros(&[2]), 0.0, s).is_err());
        }
    }

    #[test]
    fn linear_midpoint_and_interpolation() {
        let e = schedule_eval(Schedule::Linear, 0.5).unwrap();
        assert_eq!((e.a, e.b, e.lambda), (0.5, 0.5, 0.0));
        let z = forward_interpolate(
            &Tensor::from_vec(vec![4.0]),
            &Tensor::from_vec(vec![0.0]),
            0.25,
            Schedule::Linear,
        )
        .unwrap();
        assert_eq!(z.data(), &[3.0]);
    }

    #[test]
    fn cfg_endpoints() {
        let c = Tensor::from_vec(vec![1.0, -2.0]);
        let u = Tensor::from_vec(vec![0.5, 3.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 4.0).unwrap(), c);
    }
}
