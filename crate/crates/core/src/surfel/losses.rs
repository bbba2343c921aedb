use super::backward::{HitGrad, HitGrads};
use super::raster::RenderOutput;
use super::SurfelError;
use crate::autodiff::Tensor;

fn foreground_count(render: &RenderOutput) -> usize {
    render.alpha.data().iter().filter(|&&a| a > 0.0).count()
}

/// Per-pixel `Σ_{i,j} ωᵢωⱼ|dᵢ − dⱼ|` over ordered pairs, averaged over
/// foreground pixels. Hits are depth-sorted, so the double sum collapses to
/// prefix sums.
pub fn distortion_loss(render: &RenderOutput) -> Result<f64, SurfelError> {
    let hits = render.hits.as_ref().ok_or(SurfelError::MissingForwardRecord)?;
    let fg = foreground_count(render);
    if fg == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for px in hits {
        let (mut w_lo, mut wd_lo) = (0.0, 0.0);
        for h in px {
            total += 2.0 * h.weight * (h.depth * w_lo - wd_lo);
            w_lo += h.weight;
            wd_lo += h.weight * h.depth;
        }
    }
    Ok(total / fg as f64)
}

/// Gradient of `scale · distortion_loss` with respect to hit weights and depths.
pub fn distortion_loss_grad(render: &RenderOutput, scale: f64) -> Result<HitGrads, SurfelError> {
    let mut out = HitGrads::zeros_like(render)?;
    let fg = foreground_count(render);
    if fg == 0 {
        return Ok(out);
    }
    let c = 2.0 * scale / fg as f64;
    let hits = render.hits.as_ref().expect("checked above");
    for (px, g) in hits.iter().zip(out.per_pixel.iter_mut()) {
        let w_all: f64 = px.iter().map(|h| h.weight).sum();
        let wd_all: f64 = px.iter().map(|h| h.weight * h.depth).sum();
        let (mut w_lo, mut wd_lo) = (0.0, 0.0);
        for (h, gk) in px.iter().zip(g.iter_mut()) {
            let w_hi = w_all - w_lo - h.weight;
            let wd_hi = wd_all - wd_lo - h.weight * h.depth;
            gk.weight = c * (h.depth * w_lo - wd_lo + wd_hi - h.depth * w_hi);
            gk.depth = c * h.weight * (w_lo - w_hi);
            w_lo += h.weight;
            wd_lo += h.weight * h.depth;
        }
    }
    Ok(out)
}

fn check_target(render: &RenderOutput, target: &Tensor) -> Result<(), SurfelError> {
    let expected = vec![render.height(), render.width(), 3];
    if target.shape() != expected.as_slice() {
        return Err(SurfelError::TargetShape {
            expected,
            got: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-pixel `Σᵢ ωᵢ(1 − nᵢ·N)` with camera-facing splat normals, averaged over
/// foreground pixels.
pub fn normal_loss(render: &RenderOutput, target: &Tensor) -> Result<f64, SurfelError> {
    check_target(render, target)?;
    let hits = render.hits.as_ref().ok_or(SurfelError::MissingForwardRecord)?;
    let fg = foreground_count(render);
    if fg == 0 {
        return Ok(0.0);
    }
    let t = target.data();
    let mut total = 0.0;
    for (i, px) in hits.iter().enumerate() {
        let n = nalgebra::Vector3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]);
        total += px.iter().map(|h| h.weight * (1.0 - h.normal.dot(&n))).sum::<f64>();
    }
    Ok(total / fg as f64)
}

/// Gradient of `scale · normal_loss` with respect to hit weights and normals.
pub fn normal_loss_grad(render: &RenderOutput, target: &Tensor, scale: f64) -> Result<HitGrads, SurfelError> {
    check_target(render, target)?;
    let mut out = HitGrads::zeros_like(render)?;
    let fg = foreground_count(render);
    if fg == 0 {
        return Ok(out);
    }
    let c = scale / fg as f64;
    let t = target.data();
    let hits = render.hits.as_ref().expect("checked above");
    for (i, (px, g)) in hits.iter().zip(out.per_pixel.iter_mut()).enumerate() {
        let n = nalgebra::Vector3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]);
        for (h, gk) in px.iter().zip(g.iter_mut()) {
            *gk = HitGrad {
                weight: c * (1.0 - h.normal.dot(&n)),
                depth: 0.0,
                normal: -n * (c * h.weight),
            };
        }
    }
    Ok(out)
}

/// Residuals this small take the zero subgradient, so a render that matches
/// its target up to rounding is a stationary point.
const L1_DEAD_ZONE: f64 = 1e-12;

/// Mean absolute colour error and its gradient with respect to the render's colour.
pub fn l1_color_loss(render: &RenderOutput, target: &Tensor) -> Result<(f64, Vec<f64>), SurfelError> {
    check_target(render, target)?;
    let n = target.len() as f64;
    let mut loss = 0.0;
    let grad = render
        .color
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let diff = a - b;
            loss += diff.abs();
            if diff > L1_DEAD_ZONE {
                1.0 / n
            } else if diff < -L1_DEAD_ZONE {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// `10 log10(1 / MSE)` for images in [0, 1]; infinite for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len().max(1) as f64;
    -10.0 * mse.log10()
}
