//! Named parameter storage and the small layers the models are built from.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::math;
use crate::rng::Rng;
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Which part of the model a parameter belongs to. Used to restrict training
/// to attention, normalisation and control-branch weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Attention,
    Norm,
    Control,
    Other,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<Param>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over parameters accepted by `filter`.
    pub fn count(&self, filter: impl Fn(&Param) -> bool) -> usize {
        self.entries.iter().filter(|p| filter(p)).map(|p| p.value.numel()).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: impl Fn(&Param) -> bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad(p)))
                .collect(),
        )
    }
}

/// Tape handles for a [`Params`] set, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    Fan,
    Zero,
}

/// Affine map over the last axis: `x[L,in] · W[in,out] + b[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        init: Init,
    ) -> Self {
        let weight = match init {
            Init::Fan => {
                let std = 1.0 / math::sqrt(d_in as f64);
                rng.normal_tensor(&[d_in, d_out]).map(|v| v * std)
            }
            Init::Zero => Tensor::zeros(&[d_in, d_out]),
        };
        let weight = params.add(alloc::format!("{name}.weight"), weight, group);
        let bias = params.add(alloc::format!("{name}.bias"), Tensor::zeros(&[d_out]), group);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.weight])?;
        tape.add(h, p[self.bias])
    }
}

/// LayerNorm over the last axis of a `[L,D]` tensor, without affine terms.
pub fn layer_norm(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let (mean, var) = tape.reduce_stats(x, &[1])?;
    let centered = tape.sub(x, mean)?;
    let var = tape.add_scalar(var, eps);
    let std = tape.sqrt(var);
    tape.div(centered, std)
}

/// `x · (1 + scale) + shift` with `[1,D]` modulation rows.
pub fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = tape.add_scalar(scale, 1.0);
    let scaled = tape.mul(x, one_plus)?;
    tape.add(scaled, shift)
}

/// Sinusoidal embedding of a scalar position into `dim` channels:
/// `[cos(p·f₀) … cos(p·f_{h−1}), sin(p·f₀) … sin(p·f_{h−1})]` with
/// `f_i = 10000^(−i/h)`, `h = dim/2`.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for i in 0..half {
        let freq = math::exp(-math::ln(10_000.0) * i as f64 / half as f64);
        out[i] = math::cos(position * freq);
        out[half + i] = math::sin(position * freq);
    }
    out
}
