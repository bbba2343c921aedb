use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{concat, Tensor, Var};
use crate::geometry::{fourier_pe, fourier_pe_width, Aabb, VIEW_CHANNELS};
use crate::surfel::{decode_attributes, GaussianAttributes13, SplatScene, SurfelError};

use super::layers::{attention, Linear, SelfAttentionBlock};
use super::params::{Bound, Init, ParamStore};
use super::{GaussianHeadConfig, NetError, VaeConfig};

/// Splits each `H×W×15` view into non-overlapping `p×p` patches, one row per
/// patch, views concatenated in order: `[V·(H/p)·(W/p), 15p²]`.
pub fn patchify(views: &[Tensor], patch: usize) -> Result<Tensor, NetError> {
    let first = views.first().ok_or(NetError::EmptyContext)?;
    let (h, w) = match first.shape() {
        [h, w, c] if *c == VIEW_CHANNELS => (*h, *w),
        s => {
            return Err(NetError::Width {
                expected: VIEW_CHANNELS,
                got: s.last().copied().unwrap_or(0),
            })
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(NetError::Patch {
            height: h,
            width: w,
            patch,
        });
    }
    let row = VIEW_CHANNELS * patch * patch;
    let mut data = Vec::with_capacity(views.len() * h * w * VIEW_CHANNELS);
    for v in views {
        if v.shape() != first.shape() {
            return Err(NetError::Config(format!(
                "views differ in shape: {:?} vs {:?}",
                v.shape(),
                first.shape()
            )));
        }
        for py in (0..h).step_by(patch) {
            for px in (0..w).step_by(patch) {
                for y in py..py + patch {
                    let start = (y * w + px) * VIEW_CHANNELS;
                    data.extend_from_slice(&v.data()[start..start + patch * VIEW_CHANNELS]);
                }
            }
        }
    }
    let m = data.len() / row;
    Ok(Tensor::new(&[m, row], data).expect("shape matches buffer"))
}

/// `CrossAttn(PE(z_x), z_z, z_z)` followed by a projection to `out_width`.
/// There is no residual path: the queries only select what to read.
#[derive(Clone, Debug)]
pub struct ReadCrossAttention {
    query: Linear,
    kv: Linear,
    out: Linear,
    heads: usize,
    width: usize,
    pe_bands: usize,
}

impl ReadCrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        pe_bands: usize,
        context_width: usize,
        width: usize,
        heads: usize,
        out_width: usize,
    ) -> Result<Self, NetError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NetError::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(
                store,
                init,
                &format!("{name}.query"),
                fourier_pe_width(pe_bands),
                width,
                false,
            )?,
            kv: Linear::new(store, init, &format!("{name}.kv"), context_width, 2 * width, false)?,
            out: Linear::new(store, init, &format!("{name}.out"), width, out_width, false)?,
            heads,
            width,
            pe_bands,
        })
    }

    /// `anchors` are `[N, 3]` normalized positions, `context` is `[M, C]`.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, anchors: &Tensor, context: Var<'t>) -> Result<Var<'t>, NetError> {
        if context.shape().first().copied().unwrap_or(0) == 0 {
            return Err(NetError::EmptyContext);
        }
        let pe = anchor_pe(anchors, self.pe_bands)?;
        let q = self.query.forward(p, context.tape().constant(pe))?;
        let kv = self.kv.forward(p, context)?;
        let c = self.width;
        let a = attention(q, kv.slice(1, 0, c)?, kv.slice(1, c, 2 * c)?, self.heads, None)?;
        self.out.forward(p, a)
    }
}

fn anchor_pe(anchors: &Tensor, bands: usize) -> Result<Tensor, NetError> {
    if anchors.rank() != 2 || anchors.shape()[1] != 3 {
        return Err(NetError::Width {
            expected: 3,
            got: anchors.shape().last().copied().unwrap_or(0),
        });
    }
    fourier_pe(&crate::geometry::tensor_to_points(anchors), bands).map_err(|e| NetError::Config(e.to_string()))
}

/// Reparameterized latent sample and its KL term.
pub struct VaeLatent<'t> {
    pub sample: Var<'t>,
    pub mu: Var<'t>,
    pub logvar: Var<'t>,
    pub kl: Var<'t>,
}

/// `½ mean(μ² + σ² − 1 − log σ²)`
pub fn kl_divergence<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>, NetError> {
    Ok(mu
        .square()?
        .add(logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0)
        .mean_all()
        .scale(0.5))
}

/// Splits `[N, 2C_h]` into `μ` and `log σ²` and draws `μ + σ η` with seeded `η`.
pub fn vae_latent<'t>(raw: Var<'t>, seed: u64) -> Result<VaeLatent<'t>, NetError> {
    let shape = raw.shape();
    if shape.len() != 2 || !shape[1].is_multiple_of(2) || shape[1] == 0 {
        return Err(NetError::Config(format!(
            "latent projection shape {shape:?} is not [N, 2C_h]"
        )));
    }
    let ch = shape[1] / 2;
    let mu = raw.slice(1, 0, ch)?;
    let logvar = raw.slice(1, ch, 2 * ch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta: Vec<f64> = (0..shape[0] * ch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eta = raw
        .tape()
        .constant(Tensor::new(&[shape[0], ch], eta).expect("shape matches buffer"));
    let sample = mu.add(logvar.scale(0.5).exp().mul(eta)?)?;
    Ok(VaeLatent {
        sample,
        mu,
        logvar,
        kl: kl_divergence(mu, logvar)?,
    })
}

/// Cascaded group-local upsampling. Each level prepends its shared learnable
/// `[f_u, C]` embedding to every input token, runs one transformer block over
/// each `(f_u + 1)`-token group independently and keeps the `f_u` embedding slots.
#[derive(Clone, Debug)]
pub struct TokenUpsampler {
    embeds: Vec<String>,
    blocks: Vec<SelfAttentionBlock>,
    ratios: Vec<usize>,
    width: usize,
}

impl TokenUpsampler {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        head: &GaussianHeadConfig,
        width: usize,
        heads: usize,
    ) -> Result<Self, NetError> {
        head.validate()?;
        let mut embeds = Vec::new();
        let mut blocks = Vec::new();
        for (k, &f) in head.ratios.iter().enumerate() {
            let e = format!("{name}.level{k}.embed");
            store.add(&e, init.normal(&[f, width], 1.0))?;
            embeds.push(e);
            blocks.push(SelfAttentionBlock::new(
                store,
                init,
                &format!("{name}.level{k}"),
                width,
                heads,
                true,
                false,
                false,
            )?);
        }
        Ok(Self {
            embeds,
            blocks,
            ratios: head.ratios.clone(),
            width,
        })
    }

    pub fn levels(&self) -> usize {
        self.ratios.len()
    }

    /// One level: `[M, C] → [M·f_u, C]`, children of token `i` at rows `i·f_u ..`.
    pub fn level<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>, level: usize) -> Result<Var<'t>, NetError> {
        if level >= self.ratios.len() {
            return Err(NetError::Level {
                level,
                levels: self.ratios.len(),
            });
        }
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(NetError::Width {
                expected: self.width,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let (m, f, c) = (shape[0], self.ratios[level], self.width);
        let tape = x.tape();
        let slots = tape
            .constant(Tensor::zeros(&[m, f, c]))
            .add(p.get(&self.embeds[level])?)?;
        let groups = concat(&[slots, x.reshape(&[m, 1, c])?], 1)?;
        let y = self.blocks[level].forward(p, groups, None)?;
        Ok(y.slice(1, 0, f)?.reshape(&[m * f, c])?)
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, mut x: Var<'t>) -> Result<Var<'t>, NetError> {
        for k in 0..self.levels() {
            x = self.level(p, x, k)?;
        }
        Ok(x)
    }
}

/// Rows produced from anchor `i` after upsampling by `expansion` share anchor `i`.
pub fn inherited_anchor(row: usize, expansion: usize) -> usize {
    row / expansion.max(1)
}

/// Encoder output and decoded raw attributes.
pub struct VaeOutput<'t> {
    pub latent: VaeLatent<'t>,
    /// `[N · Π f_u, 13]`
    pub raw: Var<'t>,
}

/// Toy multi-view VAE: patchify + joint self-attention over all views, read
/// cross-attention onto FPS anchors, KL-regularized per-anchor features, then
/// a transformer over `[PE(z_x) ⊕ z_h]`, the upsampler and a 13-wide head.
#[derive(Clone, Debug)]
pub struct SurfelVae {
    pub config: VaeConfig,
    patch_embed: Linear,
    encoder: Vec<SelfAttentionBlock>,
    read: ReadCrossAttention,
    decoder_in: Linear,
    decoder: Vec<SelfAttentionBlock>,
    upsampler: TokenUpsampler,
    head: Linear,
}

impl SurfelVae {
    pub fn new(store: &mut ParamStore, config: &VaeConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut init = Init::new(seed);
        let c = config.width;
        let patch_embed = Linear::new(
            store,
            &mut init,
            "vae.patch",
            VIEW_CHANNELS * config.patch * config.patch,
            c,
            false,
        )?;
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                SelfAttentionBlock::new(
                    store,
                    &mut init,
                    &format!("vae.enc{l}"),
                    c,
                    config.heads,
                    true,
                    false,
                    false,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let read = ReadCrossAttention::new(
            store,
            &mut init,
            "vae.read",
            config.pe_bands,
            c,
            c,
            config.heads,
            2 * config.latent_width,
        )?;
        let decoder_in = Linear::new(
            store,
            &mut init,
            "vae.dec_in",
            fourier_pe_width(config.pe_bands) + config.latent_width,
            c,
            false,
        )?;
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                SelfAttentionBlock::new(
                    store,
                    &mut init,
                    &format!("vae.dec{l}"),
                    c,
                    config.heads,
                    true,
                    false,
                    false,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let upsampler = TokenUpsampler::new(store, &mut init, "vae.up", &config.head, c, config.heads)?;
        let head = Linear::new(store, &mut init, "vae.head", c, 13, false)?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            encoder,
            read,
            decoder_in,
            decoder,
            upsampler,
            head,
        })
    }

    /// Set latent `z_z` of `V·(H/p)·(W/p)` tokens from assembled 15-channel views.
    pub fn encode_views<'t>(
        &self,
        p: &Bound<'_, 't>,
        tape: &'t crate::autodiff::Tape,
        views: &[Tensor],
    ) -> Result<Var<'t>, NetError> {
        let patches = patchify(views, self.config.patch)?;
        let mut x = self.patch_embed.forward(p, tape.constant(patches))?;
        for b in &self.encoder {
            x = b.forward(p, x, None)?;
        }
        Ok(x)
    }

    /// Raw `[N, 2C_h]` read from the set latent at the anchors.
    pub fn read<'t>(&self, p: &Bound<'_, 't>, anchors: &Tensor, zz: Var<'t>) -> Result<Var<'t>, NetError> {
        self.read.forward(p, anchors, zz)
    }

    /// `[N, C_h]` features at normalized anchors to `[N·Πf, 13]` raw attributes.
    pub fn decode<'t>(&self, p: &Bound<'_, 't>, anchors: &Tensor, zh: Var<'t>) -> Result<Var<'t>, NetError> {
        let pe = zh.tape().constant(anchor_pe(anchors, self.config.pe_bands)?);
        let mut x = self.decoder_in.forward(p, concat(&[pe, zh], 1)?)?;
        for b in &self.decoder {
            x = b.forward(p, x, None)?;
        }
        let x = self.upsampler.forward(p, x)?;
        self.head.forward(p, x)
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'_, 't>,
        tape: &'t crate::autodiff::Tape,
        views: &[Tensor],
        anchors: &Tensor,
        seed: u64,
    ) -> Result<VaeOutput<'t>, NetError> {
        let zz = self.encode_views(p, tape, views)?;
        let latent = vae_latent(self.read(p, anchors, zz)?, seed)?;
        let raw = self.decode(p, anchors, latent.sample)?;
        Ok(VaeOutput { latent, raw })
    }

    /// Turns raw head output into splats around world-space anchors; children
    /// inherit their ancestor's anchor.
    pub fn splats(&self, raw: &Tensor, bounds: &Aabb, anchors: &Tensor) -> Result<SplatScene, SurfelError> {
        let expansion = self.config.head.expansion();
        let scale = bounds.half_extent();
        let splats = (0..raw.shape()[0])
            .map(|row| {
                let a = anchors.row(inherited_anchor(row, expansion));
                let anchor = bounds.denormalize(&Vector3::new(a[0], a[1], a[2]));
                decode_attributes(&GaussianAttributes13::from_slice(raw.row(row))?, &anchor, scale)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SplatScene::new(splats))
    }
}
