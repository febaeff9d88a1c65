//! Lightweight control branch: per-frame 3×3 convolutions over the masked
//! latent and its mask, followed by mean/variance alignment to the backbone's
//! block-1 features and additive injection.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var, ZERO_FILL};
use crate::diffusion::Conditioning;
use crate::dit::TokenGrid;
use crate::nn::{Bound, Init, Linear, ParamGroup, ParamId, Params};
use crate::rng::Rng;
use crate::{invalid, math, Error, Result, Tensor};

pub const EPS_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ControlConfig {
    /// Channel width of the convolution stack.
    pub hidden: usize,
    pub layers: usize,
    /// Let gradients flow into the alignment targets `μ_m`, `σ_m` (and
    /// through them into the backbone). Off by default.
    pub stats_gradient: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: 3,
            stats_gradient: false,
        }
    }
}

/// 3×3, stride 1, zero "same" padding, applied to each frame independently.
/// Weights are stored im2col-style as `[9·c_in, c_out]` with rows ordered
/// `(dy, dx, channel)`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let std = 1.0 / math::sqrt((9 * c_in) as f64);
        let weight = rng.normal_tensor(&[9 * c_in, c_out]).map(|v| v * std);
        Self {
            weight: params.add(alloc::format!("{name}.weight"), weight, ParamGroup::Control),
            bias: params.add(alloc::format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamGroup::Control),
            c_in,
            c_out,
        }
    }

    /// `x` is `[L, c_in]` in backbone token order; returns `[L, c_out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, grid: TokenGrid) -> Result<Var> {
        let cols = tape.gather(x, im2col_index(grid, self.c_in), &[grid.len(), 9 * self.c_in])?;
        let y = tape.matmul(cols, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

/// Gather map from `[L, c]` tokens to `[L, 9c]` neighbourhood rows.
fn im2col_index(grid: TokenGrid, channels: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(grid.len() * 9 * channels);
    for token in 0..grid.len() {
        let (r, c, f) = grid.coord(token);
        for dy in 0..3 {
            for dx in 0..3 {
                let (rr, cc) = ((r + dy).wrapping_sub(1), (c + dx).wrapping_sub(1));
                if rr < grid.rows && cc < grid.cols {
                    let base = grid.token(rr, cc, f) * channels;
                    index.extend(base..base + channels);
                } else {
                    index.extend(core::iter::repeat(ZERO_FILL).take(channels));
                }
            }
        }
    }
    index
}

#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub convs: Vec<Conv3x3>,
    pub proj: Linear,
    pub config: ControlConfig,
}

impl ControlBranch {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        latent_channels: usize,
        d_model: usize,
        config: ControlConfig,
    ) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(invalid!("control branch needs at least one layer and channel"));
        }
        let mut convs = Vec::with_capacity(config.layers);
        let mut c_in = latent_channels + 1;
        for i in 0..config.layers {
            convs.push(Conv3x3::new(params, rng, &alloc::format!("control.conv{i}"), c_in, config.hidden));
            c_in = config.hidden;
        }
        let proj = Linear::new(params, rng, "control.proj", config.hidden, d_model, ParamGroup::Control, Init::Fan);
        Ok(Self { convs, proj, config })
    }

    /// `[L, d+1]` token matrix: latent channels followed by the mask value.
    pub fn input_tokens(cond: &Conditioning) -> Result<Tensor> {
        let (z, m) = (&cond.z_masked, &cond.mask);
        if z.shape()[..3] != m.shape()[..3] {
            return Err(Error::ShapeMismatch {
                op: "control input",
                lhs: z.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let grid = TokenGrid::of(z.shape());
        let d = z.channels();
        let mut out = Vec::with_capacity(grid.len() * (d + 1));
        for token in 0..grid.len() {
            let (r, c, f) = grid.coord(token);
            let base = z.index(r, c, f, 0);
            out.extend_from_slice(&z.data()[base..base + d]);
            out.push(m.at(r, c, f, 0));
        }
        Tensor::new(&[grid.len(), d + 1], out)
    }

    /// Control features `[L, d_model]` in backbone token order.
    pub fn extract(&self, tape: &mut Tape, p: &Bound, cond: &Conditioning) -> Result<Var> {
        let grid = TokenGrid::of(cond.z_masked.shape());
        let input = Self::input_tokens(cond)?;
        if input.shape()[1] != self.convs[0].c_in {
            return Err(invalid!(
                "control branch expects {} input channels, got {}",
                self.convs[0].c_in,
                input.shape()[1]
            ));
        }
        let mut x = tape.constant(input);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, p, x, grid)?;
            if i + 1 < self.convs.len() {
                x = tape.tanh(x);
            }
        }
        self.proj.forward(tape, p, x)
    }

    /// Same computation as [`extract`](Self::extract) for inputs whose first
    /// `k` frames are fully known condition frames.
    pub fn extract_advanced(&self, tape: &mut Tape, p: &Bound, cond: &Conditioning, k: usize) -> Result<Var> {
        let m = &cond.mask;
        if k > m.frames() {
            return Err(invalid!("{k} condition frames requested for a {}-frame clip", m.frames()));
        }
        for f in 0..k {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if m.at(r, c, f, 0) != 1.0 {
                        return Err(invalid!("condition frame {f} has mask {} at ({r}, {c})", m.at(r, c, f, 0)));
                    }
                }
            }
        }
        self.extract(tape, p, cond)
    }
}

/// Per-channel targets for alignment, each `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentStats {
    pub mu: Var,
    pub sigma: Var,
}

impl AlignmentStats {
    /// Mean and population standard deviation over tokens of `features`
    /// (`[L, D]`). With `detach`, the stats act as constants for gradients.
    pub fn of(tape: &mut Tape, features: Var, detach: bool) -> Result<Self> {
        let (mu, var) = tape.reduce_stats(features, &[0])?;
        let sigma = tape.sqrt(var);
        if detach {
            Ok(Self {
                mu: tape.detach(mu),
                sigma: tape.detach(sigma),
            })
        } else {
            Ok(Self { mu, sigma })
        }
    }
}

/// Normalise each channel of `features` to zero mean and unit std, then map
/// to the target stats. Channels with std below `eps_std` are divided by
/// `eps_std` instead.
pub fn align(tape: &mut Tape, features: Var, stats: AlignmentStats, eps_std: f64) -> Result<Var> {
    let (mean, var) = tape.reduce_stats(features, &[0])?;
    let std = tape.sqrt(var);
    let std = tape.clamp(std, eps_std, f64::INFINITY);
    let centered = tape.sub(features, mean)?;
    let normed = tape.div(centered, std)?;
    let scaled = tape.mul(normed, stats.sigma)?;
    tape.add(scaled, stats.mu)
}

/// Elementwise sum of the block-1 output and the aligned control features.
pub fn inject(tape: &mut Tape, block_out: Var, aligned: Var) -> Result<Var> {
    if tape.shape(block_out) != tape.shape(aligned) {
        return Err(Error::ShapeMismatch {
            op: "inject",
            lhs: tape.shape(block_out).to_vec(),
            rhs: tape.shape(aligned).to_vec(),
        });
    }
    tape.add(block_out, aligned)
}
