use crate::autodiff::{Tensor, Var};
use crate::geometry::{fourier_pe, fourier_pe_width, tensor_to_points, PE_DOMAIN};

use super::layers::{timestep_embedding, CrossAttentionBlock, Linear, SelfAttentionBlock};
use super::params::{Bound, Init, ParamStore};
use super::{DenoiserConfig, NetError};

const LN_EPS: f64 = 1e-6;

/// Velocity network over an unordered token set. No positional encoding is
/// used anywhere, so it is equivariant to token permutations.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    input: Linear,
    anchor_proj: Option<Linear>,
    time_in: Linear,
    time_out: Linear,
    label_table: String,
    blocks: Vec<SelfAttentionBlock>,
    cross: Vec<CrossAttentionBlock>,
    output: Linear,
}

impl Denoiser {
    /// Registers all parameters under `prefix` in `store`.
    pub fn new(store: &mut ParamStore, config: &DenoiserConfig, prefix: &str, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut init = Init::new(seed);
        let c = config.width;
        let input = Linear::new(store, &mut init, &format!("{prefix}.input"), config.in_width, c, false)?;
        let anchor_proj = match config.anchor_bands {
            Some(bands) => Some(Linear::new(
                store,
                &mut init,
                &format!("{prefix}.anchor_proj"),
                fourier_pe_width(bands),
                c,
                false,
            )?),
            None => None,
        };
        let time_in = Linear::new(store, &mut init, &format!("{prefix}.time_in"), c, c, false)?;
        let time_out = Linear::new(
            store,
            &mut init,
            &format!("{prefix}.time_out"),
            c,
            6 * c,
            config.zero_init,
        )?;
        let label_table = format!("{prefix}.labels");
        store.add(
            &label_table,
            init.normal(&[config.num_classes + 1, config.cond_width], 1.0),
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        let mut cross = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(SelfAttentionBlock::new(
                store,
                &mut init,
                &format!("{prefix}.block{l}"),
                c,
                config.heads,
                config.qk_norm,
                true,
                config.zero_init,
            )?);
            cross.push(CrossAttentionBlock::new(
                store,
                &mut init,
                &format!("{prefix}.cross{l}"),
                c,
                config.cond_width,
                config.heads,
                config.zero_init,
            )?);
        }
        let output = Linear::new(store, &mut init, &format!("{prefix}.output"), c, config.in_width, true)?;
        Ok(Self {
            config: config.clone(),
            input,
            anchor_proj,
            time_in,
            time_out,
            label_table,
            blocks,
            cross,
            output,
        })
    }

    /// Index of the null-condition row.
    pub fn null_label(&self) -> usize {
        self.config.num_classes
    }

    /// Predicted velocity for tokens `z` (`[N, in_width]`) at time `t`.
    /// `label = None` selects the learned null condition. Stage-2 models
    /// require `anchors` (`[N, 3]`, inside the unit cube).
    pub fn forward<'t>(
        &self,
        p: &Bound<'_, 't>,
        z: Var<'t>,
        t: f64,
        label: Option<usize>,
        anchors: Option<&Tensor>,
    ) -> Result<Var<'t>, NetError> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.config.in_width {
            return Err(NetError::Width {
                expected: self.config.in_width,
                got: *shape.last().unwrap_or(&0),
            });
        }
        let tape = z.tape();
        let mut h = self.input.forward(p, z)?;

        if let Some(proj) = &self.anchor_proj {
            let anchors = anchors.ok_or_else(|| NetError::Config("stage-2 denoiser needs anchors".into()))?;
            if anchors.shape() != [shape[0], 3] {
                return Err(NetError::Count {
                    expected: shape[0],
                    got: anchors.shape().first().copied().unwrap_or(0),
                });
            }
            // sampled anchors can stray slightly outside the encoding's domain
            let clamped = anchors.map(|x| x.clamp(-PE_DOMAIN, PE_DOMAIN));
            let pe = fourier_pe(&tensor_to_points(&clamped), self.config.anchor_bands.unwrap_or(0))
                .map_err(|e| NetError::Config(e.to_string()))?;
            let inj = proj.forward(p, tape.constant(pe))?;
            let inj = if self.config.anchor_injection {
                inj
            } else {
                inj.scale(0.0)
            };
            h = h.add(inj)?;
        }

        let c = self.config.width;
        let temb = tape.constant(timestep_embedding(t, c).reshaped(&[1, c])?);
        let shared = self
            .time_out
            .forward(p, self.time_in.forward(p, temb)?.silu())?
            .reshape(&[6 * c])?;

        let row = match label {
            Some(l) if l < self.config.num_classes => l,
            Some(l) => {
                return Err(NetError::Label {
                    label: l,
                    classes: self.config.num_classes,
                })
            }
            None => self.null_label(),
        };
        let context = p.get(&self.label_table)?.slice(0, row, row + 1)?;

        for (block, cross) in self.blocks.iter().zip(&self.cross) {
            h = block.forward(p, h, Some(shared))?;
            h = cross.forward(p, h, context)?;
        }
        self.output.forward(p, h.layer_norm(LN_EPS)?)
    }
}
