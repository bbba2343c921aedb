use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(AutodiffError::Count(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        for other in [g.shape(), state.m[i].shape(), state.v[i].shape()] {
            if other != p.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: other.to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_without_momentum_is_sign_like() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let g = [0.5, -3.0, 1e-3];
        let mut params = vec![Tensor::from_vec(vec![0.0; 3])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::from_vec(g.to_vec())], &mut state, &cfg).unwrap();
        for (p, gv) in params[0].data().iter().zip(g) {
            let expected = -cfg.lr * gv / (gv.abs() + cfg.eps);
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut params = vec![Tensor::from_vec(vec![0.0])];
        let mut state = AdamState::new(&params);
        let grads = [Tensor::from_vec(vec![0.7])];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = params[0].data()[0];
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            last = before - params[0].data()[0];
        }
        assert!((last - cfg.lr).abs() < 1e-9, "update {last}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state, &AdamConfig::default());
        assert!(matches!(err, Err(AutodiffError::ShapeMismatch { .. })));
    }
}
