//! The full denoiser: backbone plus control branch, sharing one parameter set.

use crate::autodiff::{Tape, Var};
use crate::codec::{LatentMask, LatentVideo, PATCH};
use crate::control::{align, inject, AlignmentStats, ControlBranch, ControlConfig, EPS_STD};
use crate::diffusion::{Conditioning, Denoiser, Guidance, LatentNorm};
use crate::dit::{patchify, Backbone, BackboneConfig, BackboneInput};
use crate::nn::{Bound, Param, ParamGroup, Params};
use crate::rng::Rng;
use crate::{invalid, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub control: ControlConfig,
    /// Diffusion-space latents are `(z − 0.5)·4` by default: the synthetic
    /// videos then have roughly unit spread instead of sitting far below
    /// the noise level for most timesteps.
    pub latent_norm: LatentNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            control: ControlConfig::default(),
            latent_norm: LatentNorm { shift: 0.5, scale: 4.0 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.latent_norm.validate()?;
        if self.backbone.latent_channels != 3 * PATCH * PATCH {
            return Err(invalid!(
                "latent channels {} do not match patch size {PATCH}",
                self.backbone.latent_channels
            ));
        }
        Ok(())
    }
}

/// Which parameters an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Trainable {
    /// Every parameter; the toy model is trained from scratch.
    #[default]
    All,
    /// Attention, normalisation-modulation and control-branch weights only.
    AttentionNormControl,
}

impl Trainable {
    pub fn includes(self, param: &Param) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AttentionNormControl => param.group != ParamGroup::Other,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutDreamer {
    pub config: ModelConfig,
    pub params: Params,
    pub backbone: Backbone,
    pub control: ControlBranch,
}

impl OutDreamer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::seed(seed);
        let backbone = Backbone::new(&mut params, &mut rng, config.backbone.clone())?;
        let control = ControlBranch::new(
            &mut params,
            &mut rng,
            config.backbone.latent_channels,
            config.backbone.d_model,
            config.control.clone(),
        )?;
        Ok(Self {
            config,
            params,
            backbone,
            control,
        })
    }

    pub fn control_param_count(&self) -> usize {
        self.params.count(|p| p.group == ParamGroup::Control)
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.count(|p| p.group != ParamGroup::Control)
    }

    /// Latent mask as a `[L, 1]` token column in backbone order.
    pub fn mask_tokens(tape: &mut Tape, mask: &LatentMask) -> Result<Var> {
        let m = tape.constant(mask.tensor().clone());
        patchify(tape, m)
    }

    /// `ε̂ = ε_θ(z_t, t, Z_masked, m, text)` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z_t: Var,
        t: usize,
        cond: &Conditioning,
        guidance: Guidance,
    ) -> Result<Var> {
        if tape.shape(z_t) != cond.z_masked.shape() {
            return Err(invalid!(
                "noisy latent {:?} does not match condition {:?}",
                tape.shape(z_t),
                cond.z_masked.shape()
            ));
        }
        let m_tokens = Self::mask_tokens(tape, &cond.mask)?;
        let features = self.control.extract(tape, p, cond)?;
        let detach = !self.config.control.stats_gradient;
        let input = BackboneInput {
            z_t,
            t,
            m_tokens,
            guidance,
        };
        self.backbone.forward_with(tape, p, input, &mut |tape, y| {
            let stats = AlignmentStats::of(tape, y, detach)?;
            let aligned = align(tape, features, stats, EPS_STD)?;
            inject(tape, y, aligned)
        })
    }
}

impl Denoiser for OutDreamer {
    fn latent_norm(&self) -> LatentNorm {
        self.config.latent_norm
    }

    fn predict_noise(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: &Conditioning,
        guidance: Guidance,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let z = tape.constant(z_t.tensor().clone());
        let eps = self.forward(&mut tape, &p, z, t, cond, guidance)?;
        Ok(tape.value(eps).clone())
    }
}
