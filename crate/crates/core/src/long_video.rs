//! Splitting long videos into overlapping clips and stitching them back.

use alloc::vec::Vec;

use crate::codec::{PixelMask, PixelVideo};
use crate::{invalid, Result};

/// Overlapping `[start, end)` frame windows covering a long video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub ranges: Vec<(usize, usize)>,
    pub clip_len: usize,
    pub overlap: usize,
    pub total: usize,
}

impl ClipPlan {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Number of leading frames clip `i` shares with clip `i − 1`. Equals
    /// the nominal overlap except on a pulled-back final clip.
    pub fn shared_frames(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.ranges[i - 1].1 - self.ranges[i].0
        }
    }
}

/// Clips of `clip_len` frames with stride `clip_len − overlap`. A final clip
/// that would run past the end is moved back to end exactly at `total`.
pub fn plan_clips(total: usize, clip_len: usize, overlap: usize) -> Result<ClipPlan> {
    if overlap == 0 || overlap >= clip_len {
        return Err(invalid!("overlap {overlap} must be in 1..{clip_len}"));
    }
    if total < clip_len {
        return Err(invalid!("video of {total} frames is shorter than one clip of {clip_len}"));
    }
    let stride = clip_len - overlap;
    let mut ranges = Vec::new();
    let mut start = 0;
    loop {
        ranges.push((start, start + clip_len));
        if start + clip_len >= total {
            break;
        }
        start = (start + stride).min(total - clip_len);
    }
    Ok(ClipPlan {
        ranges,
        clip_len,
        overlap,
        total,
    })
}

/// Condition input for a follow-up clip.
///
/// The first `k` frames are the last `k` frames of `previous` with all-ones
/// masks; the remaining frames are taken from `masked` / `masks` starting at
/// local frame `k`. `masked` and `masks` cover the whole clip.
pub fn build_condition(
    previous: &PixelVideo,
    masked: &PixelVideo,
    masks: &PixelMask,
    k: usize,
) -> Result<(PixelVideo, PixelMask)> {
    let s = masked.frames();
    if k == 0 || k >= s {
        return Err(invalid!("condition frame count {k} must be in 1..{s}"));
    }
    if previous.frames() < k {
        return Err(invalid!("previous clip has {} frames, need {k}", previous.frames()));
    }
    if previous.shape()[..2] != masked.shape()[..2] || masks.shape()[..3] != masked.shape()[..3] {
        return Err(invalid!(
            "clip shapes disagree: previous {:?}, masked {:?}, masks {:?}",
            previous.shape(),
            masked.shape(),
            masks.shape()
        ));
    }
    let head = previous.frame_range(previous.frames() - k, previous.frames())?;
    let tail = masked.frame_range(k, s)?;
    let x = PixelVideo::concat_frames(&[&head, &tail])?;
    let m = masks.with_leading_frames_given(k);
    Ok((x, m))
}

/// Join generated clips, keeping the earlier clip wherever two overlap.
pub fn assemble(clips: &[PixelVideo], plan: &ClipPlan) -> Result<PixelVideo> {
    if clips.len() != plan.len() {
        return Err(invalid!("{} clips for a plan of {}", clips.len(), plan.len()));
    }
    let mut parts = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        if clip.frames() != plan.clip_len {
            return Err(invalid!("clip {i} has {} frames, expected {}", clip.frames(), plan.clip_len));
        }
        parts.push(clip.frame_range(plan.shared_frames(i), plan.clip_len)?);
    }
    let refs: Vec<&PixelVideo> = parts.iter().collect();
    let out = PixelVideo::concat_frames(&refs)?;
    debug_assert_eq!(out.frames(), plan.total);
    Ok(out)
}
