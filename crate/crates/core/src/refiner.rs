//! Cross-clip colour refinement in 8-bit space: per-channel mean/std
//! alignment followed by histogram matching, both driven by the overlap
//! frames shared with the previous clip.

use alloc::vec::Vec;

use crate::codec::PixelVideo;
use crate::{invalid, math, Error, Result, Tensor};

/// Video sampled on the 0–255 grid, `(H, W, S, 3)` row-major like
/// [`PixelVideo`].
#[derive(Clone, Debug, PartialEq)]
pub struct Levels<T> {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    pub data: Vec<T>,
}

pub type ByteVideo = Levels<u8>;

impl<T: Copy> Levels<T> {
    pub fn new(rows: usize, cols: usize, frames: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols * frames * 3 {
            return Err(Error::ElementCount {
                shape: alloc::vec![rows, cols, frames, 3],
                expected: rows * cols * frames * 3,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, frames, data })
    }

    pub fn index(&self, r: usize, c: usize, f: usize, ch: usize) -> usize {
        ((r * self.cols + c) * self.frames + f) * 3 + ch
    }

    pub fn at(&self, r: usize, c: usize, f: usize, ch: usize) -> T {
        self.data[self.index(r, c, f, ch)]
    }

    /// Frames `start..end`.
    pub fn frame_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames {
            return Err(invalid!("frame range {start}..{end} outside 0..{}", self.frames));
        }
        let n = end - start;
        let mut data = Vec::with_capacity(self.rows * self.cols * n * 3);
        for site in 0..self.rows * self.cols {
            let base = (site * self.frames + start) * 3;
            data.extend_from_slice(&self.data[base..base + n * 3]);
        }
        Self::new(self.rows, self.cols, n, data)
    }

    /// All values of one colour channel.
    pub fn channel(&self, ch: usize) -> impl Iterator<Item = T> + '_ {
        self.data.iter().skip(ch).step_by(3).copied()
    }

    pub fn map<U>(&self, f: impl Fn(usize, T) -> U) -> Levels<U> {
        Levels {
            rows: self.rows,
            cols: self.cols,
            frames: self.frames,
            data: self.data.iter().enumerate().map(|(i, &v)| f(i % 3, v)).collect(),
        }
    }
}

/// Nearest 8-bit level, halves rounded away from zero.
pub fn quantize(v: f64) -> u8 {
    math::round(v.clamp(0.0, 255.0)) as u8
}

impl ByteVideo {
    /// `[0, 1]` floats → 0–255.
    pub fn from_pixels(x: &PixelVideo) -> Self {
        let s = x.shape();
        Self {
            rows: s[0],
            cols: s[1],
            frames: s[2],
            data: x.data().iter().map(|&v| quantize(v * 255.0)).collect(),
        }
    }

    pub fn to_pixels(&self) -> PixelVideo {
        let t = Tensor::new(
            &[self.rows, self.cols, self.frames, 3],
            self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("length checked on construction");
        PixelVideo::new(t).expect("levels map into [0, 1]")
    }
}

impl Levels<f64> {
    pub fn quantized(&self) -> ByteVideo {
        self.map(|_, v| quantize(v))
    }
}

/// Overlap frames of the current clip, overlap frames of the previous clip,
/// and the current clip.
#[derive(Clone, Debug)]
pub struct RefinerPair {
    pub source: ByteVideo,
    pub template: ByteVideo,
    pub target: ByteVideo,
}

impl RefinerPair {
    /// Pair whose source is the first `template.frames` frames of `target`.
    pub fn from_overlap(template: ByteVideo, target: ByteVideo) -> Result<Self> {
        let source = target.frame_range(0, template.frames)?;
        let pair = Self { source, template, target };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        let (s, t) = (&self.source, &self.template);
        if (s.rows, s.cols, s.frames) != (t.rows, t.cols, t.frames) || s.data.is_empty() {
            return Err(invalid!(
                "source {}x{}x{} and template {}x{}x{} must be equal and non-empty",
                s.rows,
                s.cols,
                s.frames,
                t.rows,
                t.cols,
                t.frames
            ));
        }
        if self.target.data.is_empty() {
            return Err(invalid!("empty target clip"));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of each colour channel.
pub fn channel_stats<T: Copy + Into<f64>>(video: &Levels<T>) -> [(f64, f64); 3] {
    core::array::from_fn(|ch| {
        let n = (video.data.len() / 3) as f64;
        let mean = video.channel(ch).map(Into::into).sum::<f64>() / n;
        let var = video.channel(ch).map(|v| (v.into() - mean) * (v.into() - mean)).sum::<f64>() / n;
        (mean, math::sqrt(var))
    })
}

/// Per-channel affine map `v ↦ (v − μ_src)·σ_tmpl/σ_src + μ_tmpl`; a channel
/// with zero source spread is only shifted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanVarianceMap {
    pub scale: [f64; 3],
    pub source_mean: [f64; 3],
    pub template_mean: [f64; 3],
}

impl MeanVarianceMap {
    pub fn fit(source: &ByteVideo, template: &ByteVideo) -> Self {
        let (s, t) = (channel_stats(source), channel_stats(template));
        Self {
            scale: core::array::from_fn(|ch| if s[ch].1 == 0.0 { 1.0 } else { t[ch].1 / s[ch].1 }),
            source_mean: core::array::from_fn(|ch| s[ch].0),
            template_mean: core::array::from_fn(|ch| t[ch].0),
        }
    }

    /// The map without clipping.
    pub fn apply(&self, ch: usize, v: f64) -> f64 {
        (v - self.source_mean[ch]) * self.scale[ch] + self.template_mean[ch]
    }

    pub fn apply_clipped<T: Copy + Into<f64>>(&self, video: &Levels<T>) -> Levels<f64> {
        video.map(|ch, v| self.apply(ch, v.into()).clamp(0.0, 255.0))
    }
}

pub fn mean_variance_alignment(pair: &RefinerPair) -> Result<Levels<f64>> {
    pair.check()?;
    Ok(MeanVarianceMap::fit(&pair.source, &pair.template).apply_clipped(&pair.target))
}

/// Normalised cumulative histogram: `q[v]` is the fraction of values `≤ v`.
fn quantiles(values: impl Iterator<Item = u8>) -> ([u64; 256], [f64; 256]) {
    let mut hist = [0u64; 256];
    for v in values {
        hist[v as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    let mut q = [0.0; 256];
    let mut acc = 0u64;
    for (v, &h) in hist.iter().enumerate() {
        acc += h;
        q[v] = acc as f64 / total as f64;
    }
    (hist, q)
}

/// 256-entry lookup taking source levels to template levels.
///
/// A source level `v` with quantile `x` is mapped by linear interpolation
/// through the points `(q_tmpl[u], u)` of the occupied template levels,
/// clamped at both ends, then rounded.
pub fn histogram_lookup(source: impl Iterator<Item = u8>, template: impl Iterator<Item = u8>) -> Result<[u8; 256]> {
    let (src_hist, sq) = quantiles(source);
    let (tmpl_hist, tq) = quantiles(template);
    if src_hist.iter().sum::<u64>() == 0 || tmpl_hist.iter().sum::<u64>() == 0 {
        return Err(invalid!("histogram matching on an empty frame set"));
    }
    let points: Vec<(f64, f64)> = (0..256)
        .filter(|&u| tmpl_hist[u] > 0)
        .map(|u| (tq[u], u as f64))
        .collect();
    let mut lookup = [0u8; 256];
    for (v, slot) in lookup.iter_mut().enumerate() {
        *slot = quantize(interp(sq[v], &points));
    }
    Ok(lookup)
}

/// Piecewise-linear interpolation through strictly increasing `x` points.
fn interp(x: f64, points: &[(f64, f64)]) -> f64 {
    let (first, last) = (points[0], points[points.len() - 1]);
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let i = points.partition_point(|p| p.0 <= x);
    let ((x0, y0), (x1, y1)) = (points[i - 1], points[i]);
    (y1 - y0) / (x1 - x0) * (x - x0) + y0
}

/// Per-channel lookups from the pair's source and template.
pub fn histogram_lookups(source: &ByteVideo, template: &ByteVideo) -> Result<[[u8; 256]; 3]> {
    let mut out = [[0u8; 256]; 3];
    for (ch, table) in out.iter_mut().enumerate() {
        *table = histogram_lookup(source.channel(ch), template.channel(ch))?;
    }
    Ok(out)
}

pub fn histogram_matching(pair: &RefinerPair) -> Result<ByteVideo> {
    pair.check()?;
    let tables = histogram_lookups(&pair.source, &pair.template)?;
    Ok(pair.target.map(|ch, v| tables[ch][v as usize]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinerOptions {
    pub mean_variance: bool,
    pub histogram: bool,
}

impl Default for RefinerOptions {
    fn default() -> Self {
        Self {
            mean_variance: true,
            histogram: true,
        }
    }
}

/// Mean/std alignment, 8-bit quantisation, then histogram matching with the
/// aligned source as the new source.
pub fn refine_clip(pair: &RefinerPair, options: RefinerOptions) -> Result<ByteVideo> {
    pair.check()?;
    let (mut source, mut target) = (pair.source.clone(), pair.target.clone());
    if options.mean_variance {
        let map = MeanVarianceMap::fit(&source, &pair.template);
        source = map.apply_clipped(&source).quantized();
        target = map.apply_clipped(&target).quantized();
    }
    if options.histogram {
        let tables = histogram_lookups(&source, &pair.template)?;
        target = target.map(|ch, v| tables[ch][v as usize]);
    }
    Ok(target)
}
