use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{cfg_combine, clamp_time};
use super::FlowError;
use crate::autodiff::Tensor;

/// Seeded standard-normal tensor.
pub fn gaussian_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// Which branch of a conditional model to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Explicit Euler from t = 1 to t = 0 on a uniform grid, starting from
/// seeded noise. The model sees times clamped into `[T_MIN, 1 − T_MIN]`.
///
/// With `cfg_scale = Some(s)` the model is queried on both branches and the
/// results combined as `v_u + s (v_c − v_u)`; with `None` only the
/// conditional branch is used.
pub fn ode_sample<F>(
    mut model: F,
    steps: usize,
    cfg_scale: Option<f64>,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor, FlowError>
where
    F: FnMut(&Tensor, f64, Branch) -> Result<Tensor, FlowError>,
{
    ode_integrate(&mut model, gaussian_noise(shape, seed), steps, cfg_scale)
}

/// [`ode_sample`] from a caller-supplied starting point at t = 1.
pub fn ode_integrate<F>(model: &mut F, z1: Tensor, steps: usize, cfg_scale: Option<f64>) -> Result<Tensor, FlowError>
where
    F: FnMut(&Tensor, f64, Branch) -> Result<Tensor, FlowError>,
{
    if steps == 0 {
        return Err(FlowError::Steps);
    }
    let mut z = z1;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let tc = clamp_time(t);
        let v_cond = model(&z, tc, Branch::Conditional)?;
        let v = match cfg_scale {
            Some(s) => cfg_combine(&v_cond, &model(&z, tc, Branch::Unconditional)?, s)?,
            None => v_cond,
        };
        if v.shape() != z.shape() {
            return Err(FlowError::Shape(crate::autodiff::AutodiffError::ShapeMismatch {
                op: "ode_sample",
                lhs: z.shape().to_vec(),
                rhs: v.shape().to_vec(),
            }));
        }
        if !v.is_finite() {
            return Err(FlowError::NonFinite(format!("model velocity at step {k} (t = {tc})")));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    Ok(z)
}
