use rand::Rng;

use super::config::{Conditioning, ModelConfig};
use super::params::{Init, ParamBuilder, ParamGroup, TrunkParameters};
use crate::compute::{AttentionSpec, Tape, Tensor, Var};
use crate::ddpm::NoisePredictor;
use crate::error::{contract_err, dim_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct TwoLayer {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
}

#[derive(Clone, Copy, Debug)]
struct CrossAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Block {
    AdaLn { modulation: Linear, attn: SelfAttention, mlp: TwoLayer },
    Decoder { norm1: Norm, attn: SelfAttention, norm2: Norm, cross: CrossAttention, norm3: Norm, mlp: TwoLayer },
}

#[derive(Clone, Copy, Debug)]
enum Head {
    AdaLn { modulation: Linear, out: Linear },
    Plain { norm: Norm, out: Linear },
}

#[derive(Clone, Debug)]
struct Layout {
    action_in: Linear,
    time: TwoLayer,
    obs: TwoLayer,
    blocks: Vec<Block>,
    head: Head,
}

struct Builder<'r, R: Rng + ?Sized> {
    inner: ParamBuilder<'r, R>,
    zero_init: bool,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let init = if zero { Init::Zeros } else { Init::Normal };
        Linear {
            weight: self.inner.add(format!("{name}.weight"), group, &[fan_in, fan_out], init),
            bias: self.inner.add(format!("{name}.bias"), group, &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, width: usize) -> Norm {
        Norm {
            gamma: self.inner.add(format!("{name}.gamma"), group, &[width], Init::Ones),
            beta: self.inner.add(format!("{name}.beta"), group, &[width], Init::Zeros),
        }
    }

    fn two_layer(&mut self, name: &str, group: ParamGroup, fan_in: usize, hidden: usize, fan_out: usize) -> TwoLayer {
        TwoLayer {
            fc1: self.linear(&format!("{name}.fc1"), group, fan_in, hidden, false),
            fc2: self.linear(&format!("{name}.fc2"), group, hidden, fan_out, false),
        }
    }

    fn self_attention(&mut self, name: &str, group: ParamGroup, d: usize) -> SelfAttention {
        SelfAttention {
            qkv: self.linear(&format!("{name}.qkv"), group, d, 3 * d, false),
            proj: self.linear(&format!("{name}.proj"), group, d, d, false),
        }
    }
}

fn build_layout<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<(TrunkParameters, Layout)> {
    let d = config.hidden;
    let mut b = Builder { inner: ParamBuilder::new(rng), zero_init: config.adaln_zero_init };
    let emb = ParamGroup::Embeddings;
    let action_in = b.linear("embed.action", emb, config.action_dim, d, false);
    let time = b.two_layer("embed.time", emb, d, d, d);
    let obs_in = match config.conditioning {
        Conditioning::AdaLn => config.obs_input_dim(),
        Conditioning::CrossAttention => config.obs_dim + config.proprio_dim,
    };
    let obs = b.two_layer("embed.obs", emb, obs_in, d, d);
    let mut blocks = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let g = ParamGroup::Block(i);
        let p = format!("blocks.{i}");
        let block = match config.conditioning {
            Conditioning::AdaLn => {
                let zero = b.zero_init;
                Block::AdaLn {
                    modulation: b.linear(&format!("{p}.adaln"), g, d, config.modulation_width(), zero),
                    attn: b.self_attention(&format!("{p}.attn"), g, d),
                    mlp: b.two_layer(&format!("{p}.mlp"), g, d, config.mlp_hidden(), d),
                }
            }
            Conditioning::CrossAttention => Block::Decoder {
                norm1: b.norm(&format!("{p}.norm1"), g, d),
                attn: b.self_attention(&format!("{p}.attn"), g, d),
                norm2: b.norm(&format!("{p}.norm2"), g, d),
                cross: CrossAttention {
                    q: b.linear(&format!("{p}.cross.q"), g, d, d, false),
                    kv: b.linear(&format!("{p}.cross.kv"), g, d, 2 * d, false),
                    proj: b.linear(&format!("{p}.cross.proj"), g, d, d, false),
                },
                norm3: b.norm(&format!("{p}.norm3"), g, d),
                mlp: b.two_layer(&format!("{p}.mlp"), g, d, config.mlp_hidden(), d),
            },
        };
        blocks.push(block);
    }
    let fin = ParamGroup::Final;
    let head = match config.conditioning {
        Conditioning::AdaLn => {
            let zero = b.zero_init;
            Head::AdaLn {
                modulation: b.linear("final.adaln", fin, d, 2 * d, zero),
                out: b.linear("final.linear", fin, d, config.action_dim, zero),
            }
        }
        Conditioning::CrossAttention => Head::Plain {
            norm: b.norm("final.norm", fin, d),
            out: b.linear("final.linear", fin, d, config.action_dim, false),
        },
    };
    let params = b.inner.finish()?;
    Ok((params, Layout { action_in, time, obs, blocks, head }))
}

/// Sinusoidal features of a scalar position: `sin(p·f_i)` then `cos(p·f_i)`
/// with geometrically spaced frequencies `f_i = 10000^(−i/half)`.
pub fn sinusoidal_features(position: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

fn sinusoidal_table(positions: usize, width: usize) -> Vec<f64> {
    (0..positions).flat_map(|p| sinusoidal_features(p as f64, width)).collect()
}

/// Observation windows for a batch: `obs` is `[B, T_o·obs_dim]` and
/// `proprio` is `[B, T_o·proprio_dim]`, both oldest step first.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub obs: Tensor,
    pub proprio: Tensor,
}

impl ObsBatch {
    pub fn new(obs: Tensor, proprio: Tensor) -> Result<Self> {
        if obs.shape().len() != 2 || proprio.shape().len() != 2 || obs.shape()[0] != proprio.shape()[0] {
            return dim_err(format!("observation batch {:?} vs proprio batch {:?}", obs.shape(), proprio.shape()));
        }
        Ok(Self { obs, proprio })
    }

    /// A batch of one from `[T_o × obs_dim]` and `[T_o × proprio_dim]`
    /// windows.
    pub fn single(obs_window: &Tensor, proprio_window: &Tensor) -> Result<Self> {
        Self::new(
            obs_window.reshape(&[1, obs_window.numel()])?,
            proprio_window.reshape(&[1, proprio_window.numel()])?,
        )
    }

    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(γ + 1) ⊙ x + β` with per-sequence `shift = β` and `scale = γ`
/// (`[B, d]`) broadcast over the `tokens` rows of each sequence in `x`.
pub fn adaln_modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var, tokens: usize) -> Result<Var> {
    let d = tape.value(x).cols();
    if tape.value(shift).cols() != d || tape.value(scale).cols() != d {
        return dim_err(format!(
            "modulation widths {} / {} against token width {d}",
            tape.value(shift).cols(),
            tape.value(scale).cols()
        ));
    }
    let one_plus = tape.add_scalar(scale, 1.0)?;
    let scale = tape.repeat_rows(one_plus, tokens)?;
    let shift = tape.repeat_rows(shift, tokens)?;
    let scaled = tape.mul(x, scale)?;
    tape.add(scaled, shift)
}

/// Noise-prediction trunk: action-token embedding, `N` transformer blocks
/// conditioned on the diffusion step and observation, and an output head.
#[derive(Clone, Debug)]
pub struct Trunk {
    config: ModelConfig,
    params: TrunkParameters,
    layout: Layout,
}

impl Trunk {
    /// Freshly initialized trunk.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build_layout(&config, rng)?;
        Ok(Self { config, params, layout })
    }

    /// Trunk for `config` carrying the given parameter values. Names and
    /// shapes must match the registry exactly.
    pub fn with_parameters(config: ModelConfig, values: std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Self::new(config, &mut crate::rng::seeded(0))?;
        let params = TrunkParameters::conform(&template.params, values)?;
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &TrunkParameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TrunkParameters {
        &mut self.params
    }

    pub fn set_params(&mut self, params: TrunkParameters) -> Result<()> {
        let values = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        self.params = TrunkParameters::conform(&self.params, values)?;
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, p: &[Var], x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, p[l.weight])?;
        tape.add_row(y, p[l.bias])
    }

    fn norm(&self, tape: &mut Tape, p: &[Var], x: Var, n: Norm) -> Result<Var> {
        let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let y = tape.mul_row(y, p[n.gamma])?;
        tape.add_row(y, p[n.beta])
    }

    fn two_layer(&self, tape: &mut Tape, p: &[Var], x: Var, m: TwoLayer, gelu: bool) -> Result<Var> {
        let h = self.linear(tape, p, x, m.fc1)?;
        let h = if gelu { tape.gelu(h)? } else { tape.silu(h)? };
        self.linear(tape, p, h, m.fc2)
    }

    /// Sinusoidal encoding of each step followed by a 2-layer MLP: `[B, d]`.
    pub fn timestep_embedding(&self, tape: &mut Tape, p: &[Var], steps: &[usize]) -> Result<Var> {
        if let Some(&k) = steps.iter().find(|&&k| k == 0) {
            return contract_err(format!("diffusion step {k} must be at least 1"));
        }
        let d = self.config.hidden;
        let features = steps.iter().flat_map(|&k| sinusoidal_features(k as f64, d)).collect();
        let x = tape.constant(Tensor::new(&[steps.len(), d], features)?);
        self.two_layer(tape, p, x, self.layout.time, false)
    }

    fn check_windows(&self, cond: &ObsBatch) -> Result<()> {
        let c = &self.config;
        let (obs_w, prop_w) = (cond.obs.cols(), cond.proprio.cols());
        if obs_w != c.obs_horizon * c.obs_dim || prop_w != c.obs_horizon * c.proprio_dim {
            return contract_err(format!(
                "observation window widths {obs_w}/{prop_w}, expected {} steps of {}/{}",
                c.obs_horizon, c.obs_dim, c.proprio_dim
            ));
        }
        Ok(())
    }

    /// Encodes each observation window. AdaLN trunks flatten the window
    /// and proprioception into one vector (`[B, d]`); cross-attention
    /// trunks embed every step as its own token (`[B·T_o, d]`).
    pub fn encode_observation(&self, tape: &mut Tape, p: &[Var], cond: &ObsBatch) -> Result<Var> {
        self.check_windows(cond)?;
        let c = &self.config;
        let batch = cond.len();
        let input = match c.conditioning {
            Conditioning::AdaLn => {
                let mut rows = Vec::with_capacity(batch * c.obs_input_dim());
                for b in 0..batch {
                    rows.extend_from_slice(cond.obs.row(b));
                    rows.extend_from_slice(cond.proprio.row(b));
                }
                Tensor::new(&[batch, c.obs_input_dim()], rows)?
            }
            Conditioning::CrossAttention => {
                let width = c.obs_dim + c.proprio_dim;
                let mut rows = Vec::with_capacity(batch * c.obs_horizon * width);
                for b in 0..batch {
                    for t in 0..c.obs_horizon {
                        rows.extend_from_slice(&cond.obs.row(b)[t * c.obs_dim..(t + 1) * c.obs_dim]);
                        rows.extend_from_slice(&cond.proprio.row(b)[t * c.proprio_dim..(t + 1) * c.proprio_dim]);
                    }
                }
                Tensor::new(&[batch * c.obs_horizon, width], rows)?
            }
        };
        let x = tape.constant(input);
        self.two_layer(tape, p, x, self.layout.obs, false)
    }

    fn self_attention(&self, tape: &mut Tape, p: &[Var], x: Var, a: SelfAttention, groups: usize, causal: bool) -> Result<Var> {
        let d = self.config.hidden;
        let qkv = self.linear(tape, p, x, a.qkv)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, 2 * d)?;
        let v = tape.slice_cols(qkv, 2 * d, 3 * d)?;
        let spec = AttentionSpec { groups, heads: self.config.heads, causal };
        let o = tape.attention(q, k, v, spec)?;
        self.linear(tape, p, o, a.proj)
    }

    /// Multi-head self-attention of block `block` over `[groups·C, d]`
    /// action tokens, masked when `causal`.
    pub fn attention(&self, tape: &mut Tape, p: &[Var], block: usize, x: Var, groups: usize, causal: bool) -> Result<Var> {
        let attn = match self.block_layout(block)? {
            Block::AdaLn { attn, .. } | Block::Decoder { attn, .. } => attn,
        };
        self.self_attention(tape, p, x, attn, groups, causal)
    }

    fn block_layout(&self, i: usize) -> Result<Block> {
        self.layout
            .blocks
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("block {i} of {}", self.config.layers)))
    }

    /// One AdaLN block. `cond` is the activated condition `[B, d]`.
    pub fn scaledp_block(&self, tape: &mut Tape, p: &[Var], i: usize, x: Var, cond: Var) -> Result<Var> {
        let Block::AdaLn { modulation, attn, mlp } = self.block_layout(i)? else {
            return contract_err("scaledp_block on a cross-attention trunk");
        };
        let d = self.config.hidden;
        let c = self.config.chunk;
        let groups = tape.value(cond).rows();
        let m = self.linear(tape, p, cond, modulation)?;
        let chunk = |tape: &mut Tape, j: usize| tape.slice_cols(m, j * d, (j + 1) * d);
        let gated = self.config.adaln_zero_init;
        // [shift, scale, gate] per branch; no gates without zero-init.
        let per_branch = if gated { 3 } else { 2 };

        let mut x = x;
        for branch in 0..2 {
            let base = branch * per_branch;
            let shift = chunk(tape, base)?;
            let scale = chunk(tape, base + 1)?;
            let h = tape.layer_norm(x, LAYER_NORM_EPS)?;
            let h = adaln_modulate(tape, h, shift, scale, c)?;
            let h = if branch == 0 {
                self.self_attention(tape, p, h, attn, groups, self.config.causal_mask)?
            } else {
                self.two_layer(tape, p, h, mlp, true)?
            };
            let h = if gated {
                let gate = chunk(tape, base + 2)?;
                let gate = tape.repeat_rows(gate, c)?;
                tape.mul(h, gate)?
            } else {
                h
            };
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// One decoder block: (masked) self-attention, cross-attention to the
    /// condition tokens `cond_seq` (`[B·(1+T_o), d]`), MLP; pre-norm
    /// residuals with affine layer norms.
    pub fn dpt_block(&self, tape: &mut Tape, p: &[Var], i: usize, x: Var, cond_seq: Var) -> Result<Var> {
        let Block::Decoder { norm1, attn, norm2, cross, norm3, mlp } = self.block_layout(i)? else {
            return contract_err("dpt_block on an AdaLN trunk");
        };
        let d = self.config.hidden;
        let groups = tape.value(x).rows() / self.config.chunk;

        let h = self.norm(tape, p, x, norm1)?;
        let h = self.self_attention(tape, p, h, attn, groups, self.config.causal_mask)?;
        let x = tape.add(x, h)?;

        let h = self.norm(tape, p, x, norm2)?;
        let q = self.linear(tape, p, h, cross.q)?;
        let kv = self.linear(tape, p, cond_seq, cross.kv)?;
        let k = tape.slice_cols(kv, 0, d)?;
        let v = tape.slice_cols(kv, d, 2 * d)?;
        let o = tape.attention(q, k, v, AttentionSpec { groups, heads: self.config.heads, causal: false })?;
        let h = self.linear(tape, p, o, cross.proj)?;
        let x = tape.add(x, h)?;

        let h = self.norm(tape, p, x, norm3)?;
        let h = self.two_layer(tape, p, h, mlp, true)?;
        tape.add(x, h)
    }

    /// Output head: adaptive (AdaLN) or affine layer norm, then a linear
    /// map to `action_dim`.
    pub fn final_layer(&self, tape: &mut Tape, p: &[Var], x: Var, cond: Option<Var>) -> Result<Var> {
        match self.layout.head {
            Head::AdaLn { modulation, out } => {
                let cond = cond.ok_or_else(|| Error::Contract("adaptive head needs a condition".into()))?;
                let d = self.config.hidden;
                let m = self.linear(tape, p, cond, modulation)?;
                let shift = tape.slice_cols(m, 0, d)?;
                let scale = tape.slice_cols(m, d, 2 * d)?;
                let h = tape.layer_norm(x, LAYER_NORM_EPS)?;
                let h = adaln_modulate(tape, h, shift, scale, self.config.chunk)?;
                self.linear(tape, p, h, out)
            }
            Head::Plain { norm, out } => {
                let h = self.norm(tape, p, x, norm)?;
                self.linear(tape, p, h, out)
            }
        }
    }

    /// Embeds the noised action chunks as tokens with fixed sinusoidal
    /// positions: `[B·C, d]`.
    pub fn embed_actions(&self, tape: &mut Tape, p: &[Var], noised: Var) -> Result<Var> {
        let c = &self.config;
        let shape = tape.value(noised).shape().to_vec();
        if shape.len() != 2 || shape[1] != c.action_dim || shape[0] % c.chunk != 0 {
            return dim_err(format!("noised actions {shape:?}, expected [B·{}, {}]", c.chunk, c.action_dim));
        }
        let groups = shape[0] / c.chunk;
        let tokens = self.linear(tape, p, noised, self.layout.action_in)?;
        let table = sinusoidal_table(c.chunk, c.hidden);
        let pos: Vec<f64> = (0..groups).flat_map(|_| table.iter().copied()).collect();
        let pos = tape.constant(Tensor::new(&[shape[0], c.hidden], pos)?);
        tape.add(tokens, pos)
    }

    /// Summed step and observation embedding `[B, d]` (AdaLN trunks).
    pub fn condition_embedding(&self, tape: &mut Tape, p: &[Var], steps: &[usize], cond: &ObsBatch) -> Result<Var> {
        let t = self.timestep_embedding(tape, p, steps)?;
        let o = self.encode_observation(tape, p, cond)?;
        tape.add(t, o)
    }

    /// Condition token sequence `[B·(1+T_o), d]`: the step embedding
    /// followed by one token per observation step, with sinusoidal
    /// positions (cross-attention trunks).
    pub fn condition_sequence(&self, tape: &mut Tape, p: &[Var], steps: &[usize], cond: &ObsBatch) -> Result<Var> {
        let c = &self.config;
        let t = self.timestep_embedding(tape, p, steps)?;
        let o = self.encode_observation(tape, p, cond)?;
        let seq = tape.concat_groups(t, o, steps.len())?;
        let table = sinusoidal_table(1 + c.obs_horizon, c.hidden);
        let pos: Vec<f64> = (0..steps.len()).flat_map(|_| table.iter().copied()).collect();
        let pos = tape.constant(Tensor::new(&[steps.len() * (1 + c.obs_horizon), c.hidden], pos)?);
        tape.add(seq, pos)
    }

    /// Full forward pass on `tape`: predicted noise `[B·C, action_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], noised: Var, steps: &[usize], cond: &ObsBatch) -> Result<Var> {
        if p.len() != self.params.len() {
            return contract_err(format!("{} bound parameters for a trunk with {}", p.len(), self.params.len()));
        }
        if steps.len() != cond.len() {
            return dim_err(format!("{} diffusion steps for {} observations", steps.len(), cond.len()));
        }
        let mut x = self.embed_actions(tape, p, noised)?;
        if tape.value(x).rows() != steps.len() * self.config.chunk {
            return dim_err(format!(
                "{} action rows for {} chunks of {}",
                tape.value(x).rows(),
                steps.len(),
                self.config.chunk
            ));
        }
        match self.config.conditioning {
            Conditioning::AdaLn => {
                let cond = self.condition_embedding(tape, p, steps, cond)?;
                let cond = tape.silu(cond)?;
                for i in 0..self.config.layers {
                    x = self.scaledp_block(tape, p, i, x, cond)?;
                }
                self.final_layer(tape, p, x, Some(cond))
            }
            Conditioning::CrossAttention => {
                let seq = self.condition_sequence(tape, p, steps, cond)?;
                for i in 0..self.config.layers {
                    x = self.dpt_block(tape, p, i, x, seq)?;
                }
                self.final_layer(tape, p, x, None)
            }
        }
    }

    /// Gradient-free prediction, surfacing NaN/Inf as divergence.
    pub fn predict_noise(&self, noised: &Tensor, steps: &[usize], cond: &ObsBatch) -> Result<Tensor> {
        NoisePredictor::predict(self, noised, steps, cond).map_err(|e| match e {
            Error::NonFinite(what) => Error::Divergence { step: steps.first().copied().unwrap_or(0), detail: what },
            other => other,
        })
    }
}

impl NoisePredictor for Trunk {
    type Condition = ObsBatch;

    fn chunk_shape(&self) -> (usize, usize) {
        (self.config.chunk, self.config.action_dim)
    }

    fn batch_size(&self, cond: &ObsBatch) -> usize {
        cond.len()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(&p.tensor) } else { tape.constant(p.tensor.clone()) })
            .collect()
    }

    fn predict_on_tape(&self, tape: &mut Tape, params: &[Var], noised: Var, steps: &[usize], cond: &ObsBatch) -> Result<Var> {
        self.forward(tape, params, noised, steps, cond)
    }
}
