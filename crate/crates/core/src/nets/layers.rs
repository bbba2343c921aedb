use crate::autodiff::{concat, Tensor, Var};

use super::params::{Bound, Init, ParamStore};
use super::NetError;

const LN_EPS: f64 = 1e-6;
const QK_EPS: f64 = 1e-12;

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn with std `1/sqrt(in)`, or all zero when `zero` is set.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero: bool,
    ) -> Result<Self, NetError> {
        let w = if zero {
            Tensor::zeros(&[in_dim, out_dim])
        } else {
            init.normal(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt())
        };
        store.add(&format!("{name}.w"), w)?;
        store.add(&format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>, NetError> {
        let width = *x.shape().last().unwrap_or(&0);
        if width != self.in_dim {
            return Err(NetError::Width {
                expected: self.in_dim,
                got: width,
            });
        }
        Ok(x.matmul(p.get(&self.w)?)?.add(p.get(&self.b)?)?)
    }
}

fn last_axis(x: &Var<'_>) -> usize {
    x.shape().len() - 1
}

/// Multi-head scaled dot-product attention over the second-to-last axis.
/// With a temperature, queries and keys are L2-normalized per head and the
/// logits are `τ q̂·k̂`, so `|logit| ≤ τ`; otherwise logits are `q·k/√d`.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    temperature: Option<Var<'t>>,
) -> Result<Var<'t>, NetError> {
    let c = *q.shape().last().unwrap_or(&0);
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(NetError::Config(format!("width {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let ax = last_axis(&q);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let mut qh = q.slice(ax, lo, hi)?;
        let mut kh = k.slice(ax, lo, hi)?;
        let vh = v.slice(ax, lo, hi)?;
        let logits = match temperature {
            Some(tau) => {
                qh = qh.l2_normalize(QK_EPS)?;
                kh = kh.l2_normalize(QK_EPS)?;
                qh.matmul(kh.transpose()?)?.mul(tau)?
            }
            None => qh.matmul(kh.transpose()?)?.scale(1.0 / (d as f64).sqrt()),
        };
        outs.push(logits.softmax()?.matmul(vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        Ok(concat(&outs, ax)?)
    }
}

/// Pre-attention logits of the first head, for inspecting the QK-norm bound.
pub fn attention_logits<'t>(
    q: Var<'t>,
    k: Var<'t>,
    heads: usize,
    temperature: Option<Var<'t>>,
) -> Result<Var<'t>, NetError> {
    let c = *q.shape().last().unwrap_or(&0);
    let d = c / heads.max(1);
    let ax = last_axis(&q);
    let qh = q.slice(ax, 0, d)?;
    let kh = k.slice(ax, 0, d)?;
    Ok(match temperature {
        Some(tau) => qh
            .l2_normalize(QK_EPS)?
            .matmul(kh.l2_normalize(QK_EPS)?.transpose()?)?
            .mul(tau)?,
        None => qh.matmul(kh.transpose()?)?.scale(1.0 / (d as f64).sqrt()),
    })
}

/// Time-derived modulation of one block: shift/scale/gate for attention and MLP.
#[derive(Clone, Copy)]
pub struct Modulation<'t> {
    pub shift1: Var<'t>,
    pub scale1: Var<'t>,
    pub gate1: Var<'t>,
    pub shift2: Var<'t>,
    pub scale2: Var<'t>,
    pub gate2: Var<'t>,
}

impl<'t> Modulation<'t> {
    /// Splits a `[6C]` vector into its six `[C]` chunks.
    pub fn split(m: Var<'t>, width: usize) -> Result<Self, NetError> {
        let part = |i: usize| m.slice(0, i * width, (i + 1) * width);
        Ok(Self {
            shift1: part(0)?,
            scale1: part(1)?,
            gate1: part(2)?,
            shift2: part(3)?,
            scale2: part(4)?,
            gate2: part(5)?,
        })
    }
}

fn modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>, NetError> {
    Ok(x.mul(scale.add_scalar(1.0))?.add(shift)?)
}

/// Pre-norm transformer block: attention then MLP, each residual. With a
/// modulation the normalized inputs are shifted/scaled and the branch
/// outputs gated; the block's own learned offset is added to the shared
/// modulation vector first.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    qkv: Linear,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    temperature: Option<String>,
    offset: Option<String>,
    pub width: usize,
    pub heads: usize,
}

impl SelfAttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        width: usize,
        heads: usize,
        qk_norm: bool,
        modulated: bool,
        zero_out: bool,
    ) -> Result<Self, NetError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NetError::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(store, init, &format!("{name}.qkv"), width, 3 * width, false)?;
        let out = Linear::new(store, init, &format!("{name}.attn_out"), width, width, zero_out)?;
        let mlp_in = Linear::new(store, init, &format!("{name}.mlp_in"), width, 4 * width, false)?;
        let mlp_out = Linear::new(store, init, &format!("{name}.mlp_out"), 4 * width, width, zero_out)?;
        let temperature = if qk_norm {
            let n = format!("{name}.temperature");
            store.add(&n, Tensor::scalar(((width / heads) as f64).sqrt()))?;
            Some(n)
        } else {
            None
        };
        let offset = if modulated {
            let n = format!("{name}.mod_offset");
            // gates start open, shifts and scales at zero
            let mut t = Tensor::zeros(&[6 * width]);
            for g in [2, 5] {
                t.data_mut()[g * width..(g + 1) * width].fill(1.0);
            }
            store.add(&n, t)?;
            Some(n)
        } else {
            None
        };
        Ok(Self {
            qkv,
            out,
            mlp_in,
            mlp_out,
            temperature,
            offset,
            width,
            heads,
        })
    }

    pub fn temperature<'t>(&self, p: &Bound<'_, 't>) -> Result<Option<Var<'t>>, NetError> {
        self.temperature.as_ref().map(|n| p.get(n)).transpose()
    }

    /// Projects normalized tokens to queries and keys (used by tests of the logit bound).
    pub fn queries_keys<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), NetError> {
        let qkv = self.qkv.forward(p, x.layer_norm(LN_EPS)?)?;
        let ax = last_axis(&qkv);
        Ok((
            qkv.slice(ax, 0, self.width)?,
            qkv.slice(ax, self.width, 2 * self.width)?,
        ))
    }

    /// `shared` is the `[6C]` modulation vector common to all blocks.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>, shared: Option<Var<'t>>) -> Result<Var<'t>, NetError> {
        let width = *x.shape().last().unwrap_or(&0);
        if width != self.width {
            return Err(NetError::Width {
                expected: self.width,
                got: width,
            });
        }
        let m = match (shared, &self.offset) {
            (Some(s), Some(off)) => Some(Modulation::split(s.add(p.get(off)?)?, self.width)?),
            (None, None) => None,
            _ => {
                return Err(NetError::Config(
                    "modulation supplied to an unmodulated block or vice versa".into(),
                ))
            }
        };
        let mut h = x.layer_norm(LN_EPS)?;
        if let Some(m) = &m {
            h = modulate(h, m.shift1, m.scale1)?;
        }
        let qkv = self.qkv.forward(p, h)?;
        let ax = last_axis(&qkv);
        let c = self.width;
        let a = attention(
            qkv.slice(ax, 0, c)?,
            qkv.slice(ax, c, 2 * c)?,
            qkv.slice(ax, 2 * c, 3 * c)?,
            self.heads,
            self.temperature(p)?,
        )?;
        let mut a = self.out.forward(p, a)?;
        if let Some(m) = &m {
            a = a.mul(m.gate1)?;
        }
        let x = x.add(a)?;
        let mut h = x.layer_norm(LN_EPS)?;
        if let Some(m) = &m {
            h = modulate(h, m.shift2, m.scale2)?;
        }
        let mut f = self.mlp_out.forward(p, self.mlp_in.forward(p, h)?.silu())?;
        if let Some(m) = &m {
            f = f.mul(m.gate2)?;
        }
        Ok(x.add(f)?)
    }
}

/// `x + out(Attn(q(LN x), k(ctx), v(ctx)))`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    q: Linear,
    kv: Linear,
    out: Linear,
    pub width: usize,
    pub heads: usize,
}

impl CrossAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        width: usize,
        context_width: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self, NetError> {
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), width, width, false)?,
            kv: Linear::new(store, init, &format!("{name}.kv"), context_width, 2 * width, false)?,
            out: Linear::new(store, init, &format!("{name}.out"), width, width, zero_out)?,
            width,
            heads,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>, context: Var<'t>) -> Result<Var<'t>, NetError> {
        let q = self.q.forward(p, x.layer_norm(LN_EPS)?)?;
        let kv = self.kv.forward(p, context)?;
        let c = self.width;
        let ax = last_axis(&kv);
        let a = attention(q, kv.slice(ax, 0, c)?, kv.slice(ax, c, 2 * c)?, self.heads, None)?;
        Ok(x.add(self.out.forward(p, a)?)?)
    }
}

/// Sinusoidal embedding of `1000 t`: `[sin(1000 t ωᵢ), cos(1000 t ωᵢ)]`
/// with `ωᵢ = 10000^(−i/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (1000.0 * t * w).sin();
        out[half + i] = (1000.0 * t * w).cos();
    }
    Tensor::new(&[dim], out).expect("shape matches buffer")
}
