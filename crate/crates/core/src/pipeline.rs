//! End-to-end outpainting: evaluation masks, sampling, decoding, blending,
//! and the clip-by-clip long-video loop.

use alloc::vec::Vec;

use crate::codec::{decode, encode, mask_video, MaskVolume, PixelMask, PixelVideo, PATCH};
use crate::diffusion::{sample, Conditioning, Denoiser, NoiseSchedule, SamplerConfig};
use crate::long_video::{assemble, build_condition, plan_clips};
use crate::refiner::{refine_clip, ByteVideo, RefinerOptions, RefinerPair};
use crate::training::MaskDirection;
use crate::{invalid, math, Error, Result, Tensor};

/// Symmetric evaluation mask: `round(ratio·extent)` generated lines,
/// `⌊·/2⌋` of them before the given region and the rest after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMaskSpec {
    pub ratio: f64,
    pub direction: MaskDirection,
}

pub fn make_eval_mask(spec: EvalMaskSpec, rows: usize, cols: usize, frames: usize) -> Result<MaskVolume> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(invalid!("mask ratio must be in (0, 1), got {}", spec.ratio));
    }
    let extent = match spec.direction {
        MaskDirection::Horizontal => cols,
        MaskDirection::Vertical => rows,
    };
    let total = math::round(spec.ratio * extent as f64) as usize;
    let lead = total / 2;
    let trail = total - lead;
    if lead == 0 || trail == 0 || total >= extent {
        return Err(invalid!(
            "mask ratio {} on {extent} lines leaves no generated line on one side or no given line",
            spec.ratio
        ));
    }
    let given = lead..extent - trail;
    let pixel = PixelMask::from_frame_fn(rows, cols, frames, |r, c| match spec.direction {
        MaskDirection::Horizontal => given.contains(&c),
        MaskDirection::Vertical => given.contains(&r),
    });
    MaskVolume::from_pixel(pixel, PATCH)
}

/// `M·input + (1 − M)·generated`, selecting exactly on a binary mask.
pub fn blend(input: &PixelVideo, generated: &PixelVideo, mask: &PixelMask) -> Result<PixelVideo> {
    if input.shape() != generated.shape() || input.shape()[..3] != mask.shape()[..3] {
        return Err(Error::ShapeMismatch {
            op: "blend",
            lhs: input.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    let t = Tensor::from_fn(input.shape(), |i| {
        if mask.data()[i / 3] == 1.0 {
            input.data()[i]
        } else {
            generated.data()[i]
        }
    });
    PixelVideo::new(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outpainted {
    /// Decoded model output, clamped into `[0, 1]`.
    pub generated: PixelVideo,
    /// `generated` with the given region replaced by the input.
    pub blended: PixelVideo,
}

/// Sample a clip conditioned on `cond_video` / `cond_mask`, decode it and
/// blend `input` back over the region marked by `blend_mask`.
fn outpaint_with<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond_video: &PixelVideo,
    cond_mask: &PixelMask,
    input: &PixelVideo,
    blend_mask: &PixelMask,
) -> Result<Outpainted> {
    let volume = MaskVolume::from_pixel(cond_mask.clone(), PATCH)?;
    let cond = Conditioning {
        z_masked: encode(&mask_video(cond_video, cond_mask)?, PATCH)?,
        mask: volume.latent,
    };
    let z = sample(model, schedule, &cond, sampler)?;
    let generated = PixelVideo::from_clamped(decode(&z, PATCH)?.into_tensor())?;
    let blended = blend(input, &generated, blend_mask)?;
    Ok(Outpainted { generated, blended })
}

/// Outpaint one clip. `input` is full-size; only its given region (by
/// `mask`) is visible to the model.
pub fn outpaint<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    input: &PixelVideo,
    mask: &PixelMask,
) -> Result<Outpainted> {
    outpaint_with(model, schedule, sampler, input, mask, input, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LongVideoConfig {
    pub clip_len: usize,
    pub overlap: usize,
    pub refiner: RefinerOptions,
}

impl Default for LongVideoConfig {
    fn default() -> Self {
        Self {
            clip_len: 29,
            overlap: 3,
            refiner: RefinerOptions::default(),
        }
    }
}

/// Outpaint a long video clip by clip.
///
/// Each follow-up clip is conditioned on the frames it shares with the
/// previous output (with all-ones masks). After sampling, the clip is
/// blended with its own input masks, colour-refined against the shared
/// frames of the previous clip, and blended once more so the given region
/// stays exact. Clip `i` samples with seed `sampler.seed + i`.
pub fn outpaint_long<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    input: &PixelVideo,
    mask: &PixelMask,
    config: &LongVideoConfig,
) -> Result<PixelVideo> {
    let plan = plan_clips(input.frames(), config.clip_len, config.overlap)?;
    let refine = config.refiner.mean_variance || config.refiner.histogram;
    let mut clips: Vec<PixelVideo> = Vec::with_capacity(plan.len());
    for (i, &(start, end)) in plan.ranges.iter().enumerate() {
        let clip_input = input.frame_range(start, end)?;
        let clip_mask = mask.frame_range(start, end)?;
        let clip_sampler = SamplerConfig {
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        let Some(previous) = clips.last() else {
            let out = outpaint(model, schedule, &clip_sampler, &clip_input, &clip_mask)?;
            clips.push(out.blended);
            continue;
        };
        let shared = plan.shared_frames(i);
        let (prev_start, _) = plan.ranges[i - 1];
        let prev_tail = previous.frame_range(start - prev_start, config.clip_len)?;
        let (cond_video, cond_mask) = build_condition(&prev_tail, &clip_input, &clip_mask, shared)?;
        let out = outpaint_with(model, schedule, &clip_sampler, &cond_video, &cond_mask, &clip_input, &clip_mask)?;
        let clip = if refine {
            let pair = RefinerPair::from_overlap(ByteVideo::from_pixels(&prev_tail), ByteVideo::from_pixels(&out.blended))?;
            let refined = refine_clip(&pair, config.refiner)?.to_pixels();
            blend(&clip_input, &refined, &clip_mask)?
        } else {
            out.blended
        };
        clips.push(clip);
    }
    assemble(&clips, &plan)
}
