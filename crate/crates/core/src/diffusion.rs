//! Noise schedule, forward noising, clean-latent estimation and the guided
//! ancestral sampler.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `alpha_bar(t) = ∏_{i≤t} (1 − β_i)`.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::codec::{LatentMask, LatentVideo, FILL};
use crate::math;
use crate::rng::Rng;
use crate::{invalid, Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!(
                "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            ));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    /// Constant β schedule.
    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::linear(steps, beta, beta)
    }

    /// The default schedule: `T = 1000`, β linear in `[1e-4, 0.02]`.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        q_sample_with(self.alpha_bar(t), z0, eps)
    }

    /// `ẑ₀ = (z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predict_z0(&self, z_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (s, n) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        z_t.zip_map(eps_hat, |z, e| (z - n * e) / s)
    }

    /// [`predict_z0`](Self::predict_z0) on the tape, differentiable in `eps_hat`.
    pub fn predict_z0_var(&self, tape: &mut Tape, z_t: Var, t: usize, eps_hat: Var) -> Result<Var> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let noise = tape.mul_scalar(eps_hat, math::sqrt(1.0 - ab));
        let diff = tape.sub(z_t, noise)?;
        Ok(tape.mul_scalar(diff, 1.0 / math::sqrt(ab)))
    }

    /// `steps` timesteps, uniformly strided over `[1, T]`, largest first.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(invalid!("sampling steps {steps} outside [1, {total}]"));
        }
        Ok((0..steps).map(|i| total - i * total / steps).collect())
    }
}

/// Closed-form forward noising with an explicit `ᾱ`.
pub fn q_sample_with(alpha_bar: f64, z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let (s, n) = (math::sqrt(alpha_bar), math::sqrt(1.0 - alpha_bar));
    z0.zip_map(eps, |z, e| s * z + n * e)
}

/// Affine map from codec latents to the space the diffusion runs in:
/// `z ↦ (z − shift)·scale`. Lets pixel-range latents be centred and brought
/// to roughly unit spread before noise is mixed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentNorm {
    pub shift: f64,
    pub scale: f64,
}

impl LatentNorm {
    pub const IDENTITY: Self = Self { shift: 0.0, scale: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0 && self.shift.is_finite()) {
            return Err(invalid!("latent norm needs a finite positive scale, got {self:?}"));
        }
        Ok(())
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.shift) * self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v / self.scale + self.shift
    }

    pub fn normalize(&self, z: &LatentVideo) -> Result<LatentVideo> {
        LatentVideo::new(z.tensor().map(|v| self.forward(v)))
    }

    pub fn denormalize(&self, z: &LatentVideo) -> Result<LatentVideo> {
        LatentVideo::new(z.tensor().map(|v| self.inverse(v)))
    }
}

impl Default for LatentNorm {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Structural conditions for one denoising call. Both stay in codec units
/// whatever [`LatentNorm`] the denoiser uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub z_masked: LatentVideo,
    pub mask: LatentMask,
}

impl Conditioning {
    /// Nothing given: fill-valued latents and an all-zero mask.
    pub fn empty_like(&self) -> Self {
        let z = Tensor::full(self.z_masked.shape(), FILL);
        let m = Tensor::zeros(self.mask.shape());
        Self {
            z_masked: LatentVideo::new(z).expect("rank 4"),
            mask: LatentMask::new(m).expect("rank 4"),
        }
    }
}

/// Which text embedding the denoiser should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    Conditional,
    Unconditional,
}

/// A noise predictor `ε_θ(z_t, t, conditions)`.
pub trait Denoiser {
    /// Space of `z_t` relative to codec latents.
    fn latent_norm(&self) -> LatentNorm {
        LatentNorm::IDENTITY
    }

    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: &Conditioning,
        guidance: Guidance,
    ) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn latent_norm(&self) -> LatentNorm {
        (**self).latent_norm()
    }

    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: &Conditioning,
        guidance: Guidance,
    ) -> Result<Tensor> {
        (**self).predict_noise(z_t, t, cond, guidance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    /// Also replace `Z_masked` and `m` with empty conditions in the
    /// unconditional pass. Off by default: guidance acts on text only.
    pub drop_structure_in_uncond: bool,
    /// Clamp each `ẑ₀` estimate into this range (codec units) before the
    /// posterior step.
    pub clip_z0: Option<(f64, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            cfg_scale: 3.0,
            seed: 0,
            drop_structure_in_uncond: false,
            clip_z0: None,
        }
    }
}

/// `ε_u + s (ε_c − ε_u)`; exact at `s = 0` and `s = 1`.
pub fn guide(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_cond.zip_map(eps_uncond, |c, u| u + scale * (c - u))
}

/// Ancestral sampling with classifier-free guidance.
///
/// Runs over [`NoiseSchedule::sampling_timesteps`]; between consecutive
/// timesteps `t > t'` the posterior uses `β' = 1 − ᾱ_t/ᾱ_{t'}` as a fixed
/// variance. Returns the `ẑ₀` estimate at the last (smallest) timestep,
/// mapped back to codec units through the denoiser's [`LatentNorm`].
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    config: &SamplerConfig,
) -> Result<LatentVideo> {
    if config.cfg_scale < 0.0 {
        return Err(invalid!("cfg scale must be >= 0, got {}", config.cfg_scale));
    }
    let timesteps = schedule.sampling_timesteps(config.steps)?;
    let mut rng = Rng::seed(config.seed);
    let shape = cond.z_masked.shape().to_vec();
    let mut z = LatentVideo::new(rng.normal_tensor(&shape))?;
    let uncond_cond = config.drop_structure_in_uncond.then(|| cond.empty_like());
    let norm = denoiser.latent_norm();
    norm.validate()?;
    let clip = config.clip_z0.map(|(lo, hi)| (norm.forward(lo), norm.forward(hi)));

    for (i, &t) in timesteps.iter().enumerate() {
        let eps = guided_noise(denoiser, &z, t, cond, uncond_cond.as_ref(), config.cfg_scale)?;
        if eps.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "denoiser output",
                lhs: shape.clone(),
                rhs: eps.shape().to_vec(),
            });
        }
        let mut z0 = schedule.predict_z0(z.tensor(), t, &eps)?;
        if let Some((lo, hi)) = clip {
            z0 = z0.map(|v| v.clamp(lo, hi));
        }
        let Some(&t_prev) = timesteps.get(i + 1) else {
            return norm.denormalize(&LatentVideo::new(z0)?);
        };
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let alpha_step = ab / ab_prev;
        let beta_step = 1.0 - alpha_step;
        let c0 = math::sqrt(ab_prev) * beta_step / (1.0 - ab);
        let ct = math::sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = math::sqrt(beta_step);
        let noise = rng.normal_tensor(&shape);
        let next = Tensor::from_fn(&shape, |k| {
            c0 * z0.data()[k] + ct * z.data()[k] + sigma * noise.data()[k]
        });
        z = LatentVideo::new(next)?;
    }
    unreachable!("sampling_timesteps is never empty")
}

fn guided_noise<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &LatentVideo,
    t: usize,
    cond: &Conditioning,
    uncond_cond: Option<&Conditioning>,
    scale: f64,
) -> Result<Tensor> {
    let uncond_inputs = uncond_cond.unwrap_or(cond);
    if scale == 0.0 {
        return denoiser.predict_noise(z, t, uncond_inputs, Guidance::Unconditional);
    }
    let eps_c = denoiser.predict_noise(z, t, cond, Guidance::Conditional)?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = denoiser.predict_noise(z, t, uncond_inputs, Guidance::Unconditional)?;
    if eps_u.shape() != eps_c.shape() {
        return Err(Error::ShapeMismatch {
            op: "denoiser output",
            lhs: eps_c.shape().to_vec(),
            rhs: eps_u.shape().to_vec(),
        });
    }
    guide(&eps_c, &eps_u, scale)
}
