//! Diffusion transformer over latent tokens, with mask-driven self-attention.
//!
//! Every latent site `(row, col, frame)` is one token (patch size 1 on the
//! already-compressed latent grid). Tokens are ordered frame-major, then
//! row-major: `index = frame·h·w + row·w + col`.
//!
//! Mask-driven attention scales each key row by `1 + γ·F_s(m)` before the
//! `QKᵀ/√d_k` product, where `F_s` maps the token's latent-mask value to
//! `[-1, 1]`.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::diffusion::Guidance;
use crate::math;
use crate::nn::{layer_norm, modulate, sinusoidal, Bound, Init, Linear, ParamGroup, ParamId, Params};
use crate::rng::Rng;
use crate::{invalid, Error, Result, Tensor};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// γ in the key multiplier `1 + γ·F_s(m)`.
    pub gamma: f64,
    pub mlp_ratio: usize,
    /// Channels per latent site (`3p²`).
    pub latent_channels: usize,
    pub time_embed_dim: usize,
    pub scaler_hidden: usize,
    pub position_encoding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            d_model: 64,
            n_heads: 4,
            gamma: 0.5,
            mlp_ratio: 4,
            latent_channels: 48,
            time_embed_dim: 128,
            scaler_hidden: 16,
            position_encoding: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid!(
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.n_blocks < 2 {
            return Err(invalid!("need at least 2 blocks, got {}", self.n_blocks));
        }
        if self.mlp_ratio == 0 || self.latent_channels == 0 || self.time_embed_dim < 2 {
            return Err(invalid!("degenerate backbone config {self:?}"));
        }
        Ok(())
    }
}

/// Position map between token indices and latent coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl TokenGrid {
    pub fn of(latent_shape: &[usize]) -> Self {
        Self {
            rows: latent_shape[0],
            cols: latent_shape[1],
            frames: latent_shape[2],
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, row: usize, col: usize, frame: usize) -> usize {
        (frame * self.rows + row) * self.cols + col
    }

    /// `(row, col, frame)` of a token.
    pub fn coord(&self, token: usize) -> (usize, usize, usize) {
        let per_frame = self.rows * self.cols;
        let rc = token % per_frame;
        (rc / self.cols, rc % self.cols, token / per_frame)
    }

    /// For each `(token, channel)` of a `[L, d]` token matrix, the flat index
    /// into the `(h, w, s, d)` latent.
    fn latent_index(&self, d: usize) -> Vec<usize> {
        let mut index = Vec::with_capacity(self.len() * d);
        for token in 0..self.len() {
            let (r, c, f) = self.coord(token);
            let base = ((r * self.cols + c) * self.frames + f) * d;
            index.extend(base..base + d);
        }
        index
    }
}

/// `(h, w, s, d)` latent → `[L, d]` tokens.
pub fn patchify(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(invalid!("patchify expects a rank-4 latent, got {shape:?}"));
    }
    let grid = TokenGrid::of(&shape);
    let d = shape[3];
    tape.gather(z, grid.latent_index(d), &[grid.len(), d])
}

/// `[L, d]` tokens → `(h, w, s, d)` latent.
pub fn unpatchify(tape: &mut Tape, tokens: Var, grid: TokenGrid) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != grid.len() {
        return Err(invalid!("unpatchify: {shape:?} does not match {} tokens", grid.len()));
    }
    let d = shape[1];
    let forward = grid.latent_index(d);
    let mut inverse = alloc::vec![0; forward.len()];
    for (i, &j) in forward.iter().enumerate() {
        inverse[j] = i;
    }
    tape.gather(tokens, inverse, &[grid.rows, grid.cols, grid.frames, d])
}

/// Fixed sinusoidal encoding of `(row, col, frame)`; the channels are split
/// into three groups, one per axis.
pub fn position_encoding(grid: TokenGrid, d_model: usize) -> Tensor {
    let group = d_model / 3;
    let sizes = [group, group, d_model - 2 * group];
    let mut out = Tensor::zeros(&[grid.len(), d_model]);
    for token in 0..grid.len() {
        let (r, c, f) = grid.coord(token);
        let mut offset = 0;
        for (pos, &size) in [r, c, f].iter().zip(&sizes) {
            for j in 0..size {
                let freq = math::pow(10_000.0, -((2 * (j / 2)) as f64) / size as f64);
                let angle = *pos as f64 * freq;
                out.data_mut()[token * d_model + offset + j] =
                    if j % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
            }
            offset += size;
        }
    }
    out
}

/// `F_s`: affine(1→H) → tanh → affine(H→1) → tanh, one scalar per token.
#[derive(Clone, Debug)]
pub struct MaskScaler {
    pub hidden: Linear,
    pub out: Linear,
}

impl MaskScaler {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(params, rng, &alloc::format!("{name}.0"), 1, hidden, ParamGroup::Attention, Init::Fan),
            out: Linear::new(params, rng, &alloc::format!("{name}.1"), hidden, 1, ParamGroup::Attention, Init::Fan),
        }
    }

    /// `[L, 1]` mask values → `[L, 1]` values in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, m_tokens: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, m_tokens)?;
        let h = tape.tanh(h);
        let o = self.out.forward(tape, p, h)?;
        Ok(tape.tanh(o))
    }
}

/// `1 + γ·F_s(m)` per token.
pub fn mask_scale(tape: &mut Tape, fs: Var, gamma: f64) -> Var {
    let scaled = tape.mul_scalar(fs, gamma);
    tape.add_scalar(scaled, 1.0)
}

/// Multi-head attention with per-token key scaling.
///
/// `q`, `k`, `v` are `[L, D]`; `multipliers`, when present, is `[L, 1]` and
/// scales whole key rows. Heads split `D` into `n_heads` contiguous chunks.
pub fn masked_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    multipliers: Option<Var>,
    n_heads: usize,
) -> Result<Var> {
    let shape = tape.shape(k).to_vec();
    if shape.len() != 2 || tape.shape(q) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: shape,
        });
    }
    let (len, width) = (shape[0], shape[1]);
    if n_heads == 0 || width % n_heads != 0 {
        return Err(invalid!("width {width} not divisible into {n_heads} heads"));
    }
    let k = match multipliers {
        Some(m) => {
            if tape.shape(m) != [len, 1] {
                return Err(Error::ShapeMismatch {
                    op: "key multipliers",
                    lhs: tape.shape(m).to_vec(),
                    rhs: alloc::vec![len, 1],
                });
            }
            tape.mul(k, m)?
        }
        None => k,
    };
    let dk = width / n_heads;
    let scale = 1.0 / math::sqrt(dk as f64);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.select_cols(q, h * dk, dk)?;
        let kh = tape.select_cols(k, h * dk, dk)?;
        let vh = tape.select_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.mul_scalar(logits, scale);
        let weights = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat(&heads, 1)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub scaler: MaskScaler,
    pub n_heads: usize,
}

impl SelfAttention {
    fn new(params: &mut Params, rng: &mut Rng, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        Self {
            qkv: Linear::new(params, rng, &alloc::format!("{name}.qkv"), d, 3 * d, ParamGroup::Attention, Init::Fan),
            out: Linear::new(params, rng, &alloc::format!("{name}.out"), d, d, ParamGroup::Attention, Init::Fan),
            scaler: MaskScaler::new(params, rng, &alloc::format!("{name}.mask_scaler"), cfg.scaler_hidden),
            n_heads: cfg.n_heads,
        }
    }

    /// Key multipliers for this layer.
    pub fn multipliers(&self, tape: &mut Tape, p: &Bound, m_tokens: Var, gamma: f64) -> Result<Var> {
        let fs = self.scaler.forward(tape, p, m_tokens)?;
        Ok(mask_scale(tape, fs, gamma))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, multipliers: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let qkv = self.qkv.forward(tape, p, x)?;
        let q = tape.select_cols(qkv, 0, d)?;
        let k = tape.select_cols(qkv, d, d)?;
        let v = tape.select_cols(qkv, 2 * d, d)?;
        let attn = masked_attention(tape, q, k, v, Some(multipliers), self.n_heads)?;
        self.out.forward(tape, p, attn)
    }
}

/// Pre-norm transformer block with adaptive scale/shift on both norms.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: SelfAttention,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl DitBlock {
    fn new(params: &mut Params, rng: &mut Rng, name: &str, cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        Self {
            modulation: Linear::new(params, rng, &alloc::format!("{name}.modulation"), d, 4 * d, ParamGroup::Norm, Init::Zero),
            attn: SelfAttention::new(params, rng, &alloc::format!("{name}.attn"), cfg),
            mlp_in: Linear::new(params, rng, &alloc::format!("{name}.mlp.0"), d, d * cfg.mlp_ratio, ParamGroup::Other, Init::Fan),
            mlp_out: Linear::new(params, rng, &alloc::format!("{name}.mlp.1"), d * cfg.mlp_ratio, d, ParamGroup::Other, Init::Fan),
        }
    }

    /// `cond` is the `[1, D]` conditioning vector (timestep + text), already
    /// passed through SiLU.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, cond: Var, multipliers: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let mods = self.modulation.forward(tape, p, cond)?;
        let shift1 = tape.select_cols(mods, 0, d)?;
        let scale1 = tape.select_cols(mods, d, d)?;
        let shift2 = tape.select_cols(mods, 2 * d, d)?;
        let scale2 = tape.select_cols(mods, 3 * d, d)?;

        let h = layer_norm(tape, x, LN_EPS)?;
        let h = modulate(tape, h, shift1, scale1)?;
        let h = self.attn.forward(tape, p, h, multipliers)?;
        let x = tape.add(x, h)?;

        let h = layer_norm(tape, x, LN_EPS)?;
        let h = modulate(tape, h, shift2, scale2)?;
        let h = self.mlp_in.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub text_embed: ParamId,
    pub null_embed: ParamId,
    pub blocks: Vec<DitBlock>,
    pub final_modulation: Linear,
    pub head: Linear,
}

/// Inputs of one backbone evaluation, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneInput {
    /// Noisy latent `(h, w, s, d)`.
    pub z_t: Var,
    pub t: usize,
    /// `[L, 1]` latent-mask value per token.
    pub m_tokens: Var,
    pub guidance: Guidance,
}

impl Backbone {
    pub fn new(params: &mut Params, rng: &mut Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let patch_embed = Linear::new(params, rng, "patch_embed", config.latent_channels, d, ParamGroup::Other, Init::Fan);
        let time_in = Linear::new(params, rng, "time.0", config.time_embed_dim, d, ParamGroup::Other, Init::Fan);
        let time_out = Linear::new(params, rng, "time.1", d, d, ParamGroup::Other, Init::Fan);
        let text_embed = params.add("text_embed", rng.normal_tensor(&[1, d]).map(|v| 0.02 * v), ParamGroup::Other);
        let null_embed = params.add("null_embed", rng.normal_tensor(&[1, d]).map(|v| 0.02 * v), ParamGroup::Other);
        let blocks = (0..config.n_blocks)
            .map(|i| DitBlock::new(params, rng, &alloc::format!("blocks.{i}"), &config))
            .collect();
        let final_modulation = Linear::new(params, rng, "final.modulation", d, 2 * d, ParamGroup::Norm, Init::Zero);
        let head = Linear::new(params, rng, "final.head", d, config.latent_channels, ParamGroup::Other, Init::Zero);
        Ok(Self {
            config,
            patch_embed,
            time_in,
            time_out,
            text_embed,
            null_embed,
            blocks,
            final_modulation,
            head,
        })
    }

    /// Timestep MLP output plus the text (or null) embedding, `[1, D]`.
    pub fn conditioning(&self, tape: &mut Tape, p: &Bound, t: usize, guidance: Guidance) -> Result<Var> {
        let dim = self.config.time_embed_dim;
        let emb = tape.constant(Tensor::new(&[1, dim], sinusoidal(t as f64, dim))?);
        let h = self.time_in.forward(tape, p, emb)?;
        let h = tape.silu(h);
        let h = self.time_out.forward(tape, p, h)?;
        let text = match guidance {
            Guidance::Conditional => p[self.text_embed],
            Guidance::Unconditional => p[self.null_embed],
        };
        tape.add(h, text)
    }

    /// Full forward pass. `after_first` receives the block-1 output and
    /// returns what the remaining blocks consume; this is the single point
    /// where conditions enter.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: BackboneInput,
        after_first: &mut dyn FnMut(&mut Tape, Var) -> Result<Var>,
    ) -> Result<Var> {
        let shape = tape.shape(input.z_t).to_vec();
        if shape.len() != 4 || shape[3] != self.config.latent_channels {
            return Err(invalid!(
                "backbone expects (h, w, s, {}), got {shape:?}",
                self.config.latent_channels
            ));
        }
        let grid = TokenGrid::of(&shape);
        if tape.shape(input.m_tokens) != [grid.len(), 1] {
            return Err(Error::ShapeMismatch {
                op: "mask tokens",
                lhs: tape.shape(input.m_tokens).to_vec(),
                rhs: alloc::vec![grid.len(), 1],
            });
        }
        let tokens = patchify(tape, input.z_t)?;
        let mut x = self.patch_embed.forward(tape, p, tokens)?;
        if self.config.position_encoding {
            let pos = tape.constant(position_encoding(grid, self.config.d_model));
            x = tape.add(x, pos)?;
        }
        let c = self.conditioning(tape, p, input.t, input.guidance)?;
        let c = tape.silu(c);

        for (i, block) in self.blocks.iter().enumerate() {
            let mult = block.attn.multipliers(tape, p, input.m_tokens, self.config.gamma)?;
            x = block.forward(tape, p, x, c, mult)?;
            if i == 0 {
                x = after_first(tape, x)?;
            }
        }

        let d = self.config.d_model;
        let mods = self.final_modulation.forward(tape, p, c)?;
        let shift = tape.select_cols(mods, 0, d)?;
        let scale = tape.select_cols(mods, d, d)?;
        let h = layer_norm(tape, x, LN_EPS)?;
        let h = modulate(tape, h, shift, scale)?;
        let out = self.head.forward(tape, p, h)?;
        unpatchify(tape, out, grid)
    }

    /// Forward pass with optional additive injection after block 1.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: BackboneInput, injected: Option<Var>) -> Result<Var> {
        self.forward_with(tape, p, input, &mut |tape, y| match injected {
            Some(extra) => {
                if tape.shape(extra) != tape.shape(y) {
                    return Err(Error::ShapeMismatch {
                        op: "injection",
                        lhs: tape.shape(y).to_vec(),
                        rhs: tape.shape(extra).to_vec(),
                    });
                }
                tape.add(y, extra)
            }
            None => Ok(y),
        })
    }
}
