//! Exact latent codec and mask handling.
//!
//! The codec is space-to-depth with patch factor `p`: each `p×p×3` pixel block
//! becomes one latent vector of length `3p²`. There is no temporal
//! compression, so pixel frames and latent frames line up one to one.
//!
//! All videos are stored `(rows, cols, frames, channels)` row-major. Masks use
//! 1 for the given region and 0 for the region to generate.

use alloc::vec::Vec;

use crate::{invalid, Error, Result, Tensor};

/// Default patch factor (latent width `d = 48`).
pub const PATCH: usize = 4;

/// Value written into unknown pixels before encoding.
pub const FILL: f64 = 0.5;

macro_rules! video_newtype {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn rows(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn cols(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn frames(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn channels(&self) -> usize {
                self.0.shape()[3]
            }

            pub fn shape(&self) -> &[usize] {
                self.0.shape()
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            #[inline]
            pub fn index(&self, r: usize, c: usize, f: usize, ch: usize) -> usize {
                let s = self.0.shape();
                ((r * s[1] + c) * s[2] + f) * s[3] + ch
            }

            #[inline]
            pub fn at(&self, r: usize, c: usize, f: usize, ch: usize) -> f64 {
                self.0.data()[self.index(r, c, f, ch)]
            }

            /// Frames `start..end`, as a new video.
            pub fn frame_range(&self, start: usize, end: usize) -> Result<Self> {
                if start > end || end > self.frames() {
                    return Err(invalid!(
                        "frame range {start}..{end} outside {} frames",
                        self.frames()
                    ));
                }
                let (h, w, c) = (self.rows(), self.cols(), self.channels());
                let mut out = Vec::with_capacity(h * w * (end - start) * c);
                for r in 0..h {
                    for col in 0..w {
                        let base = self.index(r, col, start, 0);
                        out.extend_from_slice(&self.0.data()[base..base + (end - start) * c]);
                    }
                }
                Ok(Self(Tensor::new(&[h, w, end - start, c], out)?))
            }

            /// Concatenate along the frame axis.
            pub fn concat_frames(parts: &[&Self]) -> Result<Self> {
                let first = parts.first().ok_or(Error::EmptyReduction)?;
                let (h, w, c) = (first.rows(), first.cols(), first.channels());
                if let Some(bad) = parts
                    .iter()
                    .find(|p| p.rows() != h || p.cols() != w || p.channels() != c)
                {
                    return Err(Error::ShapeMismatch {
                        op: concat!($what, " frame concat"),
                        lhs: first.shape().to_vec(),
                        rhs: bad.shape().to_vec(),
                    });
                }
                let total: usize = parts.iter().map(|p| p.frames()).sum();
                let mut out = Vec::with_capacity(h * w * total * c);
                for r in 0..h {
                    for col in 0..w {
                        for p in parts {
                            let base = p.index(r, col, 0, 0);
                            out.extend_from_slice(&p.0.data()[base..base + p.frames() * c]);
                        }
                    }
                }
                Ok(Self(Tensor::new(&[h, w, total, c], out)?))
            }
        }
    };
}

video_newtype!(PixelVideo, "pixel video");
video_newtype!(LatentVideo, "latent video");
video_newtype!(PixelMask, "pixel mask");
video_newtype!(LatentMask, "latent mask");

fn check_rank4(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 4 {
        return Err(invalid!("{what} must be rank 4, got shape {:?}", t.shape()));
    }
    Ok(())
}

impl PixelVideo {
    /// `(H, W, S, 3)` values in `[0, 1]`, at least one frame.
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank4(&t, "pixel video")?;
        if t.shape()[3] != 3 || t.shape()[2] == 0 {
            return Err(invalid!("pixel video must be (H, W, S>=1, 3), got {:?}", t.shape()));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn filled(rows: usize, cols: usize, frames: usize, value: f64) -> Self {
        Self(Tensor::full(&[rows, cols, frames, 3], value))
    }

    /// Clamp an arbitrary `(H, W, S, 3)` tensor into the pixel range.
    pub fn from_clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(|v| v.clamp(0.0, 1.0)))
    }
}

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank4(&t, "latent video")?;
        Ok(Self(t))
    }
}

impl PixelMask {
    /// `(H, W, S, 1)` binary mask.
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank4(&t, "pixel mask")?;
        if t.shape()[3] != 1 {
            return Err(invalid!("pixel mask must have one channel, got {:?}", t.shape()));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(invalid!("pixel mask must be binary, found {v}"));
        }
        Ok(Self(t))
    }

    pub fn ones(rows: usize, cols: usize, frames: usize) -> Self {
        Self(Tensor::ones(&[rows, cols, frames, 1]))
    }

    /// Mask from a per-frame predicate `given(row, col)`, identical across frames.
    pub fn from_frame_fn(
        rows: usize,
        cols: usize,
        frames: usize,
        given: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let t = Tensor::from_fn(&[rows, cols, frames, 1], |i| {
            let rc = i / frames;
            if given(rc / cols, rc % cols) {
                1.0
            } else {
                0.0
            }
        });
        Self(t)
    }

    pub fn is_given(&self, r: usize, c: usize, f: usize) -> bool {
        self.at(r, c, f, 0) == 1.0
    }

    /// Swap given and generated regions.
    pub fn inverted(&self) -> Self {
        Self(self.0.map(|v| 1.0 - v))
    }

    /// Replace the masks of frames `0..k` with all-ones.
    pub fn with_leading_frames_given(&self, k: usize) -> Self {
        let frames = self.frames();
        let mut t = self.0.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % frames < k {
                *v = 1.0;
            }
        }
        Self(t)
    }

    /// Number of given pixels per frame, for each frame.
    pub fn given_per_frame(&self) -> Vec<usize> {
        let frames = self.frames();
        let mut counts = alloc::vec![0; frames];
        for (i, &v) in self.data().iter().enumerate() {
            if v == 1.0 {
                counts[i % frames] += 1;
            }
        }
        counts
    }
}

impl LatentMask {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank4(&t, "latent mask")?;
        if t.shape()[3] != 1 {
            return Err(invalid!("latent mask must have one channel, got {:?}", t.shape()));
        }
        Ok(Self(t))
    }
}

/// Pixel mask together with its latent downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub pixel: PixelMask,
    pub latent: LatentMask,
}

impl MaskVolume {
    pub fn from_pixel(pixel: PixelMask, patch: usize) -> Result<Self> {
        let latent = downsample_mask(&pixel, patch)?;
        Ok(Self { pixel, latent })
    }
}

fn check_divisible(rows: usize, cols: usize, patch: usize) -> Result<()> {
    if patch == 0 || rows % patch != 0 || cols % patch != 0 {
        return Err(invalid!("frame size {rows}x{cols} not divisible by patch {patch}"));
    }
    Ok(())
}

/// Space-to-depth: `(H, W, S, 3)` → `(H/p, W/p, S, 3p²)`.
pub fn encode(x: &PixelVideo, patch: usize) -> Result<LatentVideo> {
    blocks_to_depth(x.tensor(), patch).map(LatentVideo)
}

/// Exact inverse of [`encode`]. No clamping is applied.
pub fn decode(z: &LatentVideo, patch: usize) -> Result<PixelVideo> {
    let d = z.channels();
    if d != 3 * patch * patch {
        return Err(invalid!("latent has {d} channels, expected {}", 3 * patch * patch));
    }
    let (h, w, s) = (z.rows(), z.cols(), z.frames());
    let (rows, cols) = (h * patch, w * patch);
    let mut out = alloc::vec![0.0; rows * cols * s * 3];
    for i in 0..h {
        for j in 0..w {
            for f in 0..s {
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..3 {
                            let k = (dy * patch + dx) * 3 + ch;
                            let (r, c) = (i * patch + dy, j * patch + dx);
                            out[((r * cols + c) * s + f) * 3 + ch] = z.at(i, j, f, k);
                        }
                    }
                }
            }
        }
    }
    Ok(PixelVideo(Tensor::new(&[rows, cols, s, 3], out)?))
}

fn blocks_to_depth(t: &Tensor, patch: usize) -> Result<Tensor> {
    let s = t.shape();
    let (rows, cols, frames, ch) = (s[0], s[1], s[2], s[3]);
    check_divisible(rows, cols, patch)?;
    let (h, w) = (rows / patch, cols / patch);
    let d = ch * patch * patch;
    let src = t.data();
    let mut out = alloc::vec![0.0; h * w * frames * d];
    for r in 0..rows {
        for c in 0..cols {
            for f in 0..frames {
                for k in 0..ch {
                    let (i, j) = (r / patch, c / patch);
                    let depth = ((r % patch) * patch + c % patch) * ch + k;
                    out[((i * w + j) * frames + f) * d + depth] = src[((r * cols + c) * frames + f) * ch + k];
                }
            }
        }
    }
    Tensor::new(&[h, w, frames, d], out)
}

/// Average-pool the pixel mask over each `p×p` block, per frame.
pub fn downsample_mask(mask: &PixelMask, patch: usize) -> Result<LatentMask> {
    let (rows, cols, frames) = (mask.rows(), mask.cols(), mask.frames());
    check_divisible(rows, cols, patch)?;
    let (h, w) = (rows / patch, cols / patch);
    let area = (patch * patch) as f64;
    let t = Tensor::from_fn(&[h, w, frames, 1], |idx| {
        let f = idx % frames;
        let (i, j) = ((idx / frames) / w, (idx / frames) % w);
        let mut ones = 0usize;
        for dy in 0..patch {
            for dx in 0..patch {
                if mask.is_given(i * patch + dy, j * patch + dx, f) {
                    ones += 1;
                }
            }
        }
        ones as f64 / area
    });
    Ok(LatentMask(t))
}

/// Pad a narrow clip into the frame described by `mask`.
///
/// `mask` must mark exactly one `H'×W'` rectangle per frame (the same
/// rectangle in every frame), where `H'×W'` is the size of `x`. Outside the
/// rectangle the result holds [`FILL`].
pub fn make_masked_video(x: &PixelVideo, mask: &PixelMask) -> Result<PixelVideo> {
    let (rows, cols, frames) = (mask.rows(), mask.cols(), mask.frames());
    if x.rows() > rows || x.cols() > cols {
        return Err(invalid!(
            "input {}x{} does not fit target {rows}x{cols}",
            x.rows(),
            x.cols()
        ));
    }
    if x.frames() != frames {
        return Err(invalid!("input has {} frames, mask has {frames}", x.frames()));
    }
    let (top, left) = placement(mask, x.rows(), x.cols())?;
    let mut out = Tensor::full(&[rows, cols, frames, 3], FILL);
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            for f in 0..frames {
                for ch in 0..3 {
                    let dst = (((top + r) * cols + left + c) * frames + f) * 3 + ch;
                    out.data_mut()[dst] = x.at(r, c, f, ch);
                }
            }
        }
    }
    Ok(PixelVideo(out))
}

/// Top-left corner of the given rectangle, checked against the expected size.
fn placement(mask: &PixelMask, h: usize, w: usize) -> Result<(usize, usize)> {
    let (rows, cols, frames) = (mask.rows(), mask.cols(), mask.frames());
    let mut corner = None;
    'search: for r in 0..rows {
        for c in 0..cols {
            if mask.is_given(r, c, 0) {
                corner = Some((r, c));
                break 'search;
            }
        }
    }
    if h == 0 || w == 0 {
        return if corner.is_none() {
            Ok((0, 0))
        } else {
            Err(invalid!("mask marks pixels but the input is empty"))
        };
    }
    let (top, left) = corner.ok_or_else(|| invalid!("mask has no given region"))?;
    if top + h > rows || left + w > cols {
        return Err(invalid!("placement at ({top}, {left}) of {h}x{w} exceeds {rows}x{cols}"));
    }
    for r in 0..rows {
        for c in 0..cols {
            let inside = (top..top + h).contains(&r) && (left..left + w).contains(&c);
            for f in 0..frames {
                if mask.is_given(r, c, f) != inside {
                    return Err(invalid!(
                        "mask is not a {h}x{w} rectangle at ({top}, {left}) in frame {f}"
                    ));
                }
            }
        }
    }
    Ok((top, left))
}

/// Keep the given region of a full-size video and fill the rest with [`FILL`].
pub fn mask_video(x: &PixelVideo, mask: &PixelMask) -> Result<PixelVideo> {
    if x.shape()[..3] != mask.shape()[..3] {
        return Err(Error::ShapeMismatch {
            op: "mask_video",
            lhs: x.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let t = Tensor::from_fn(x.shape(), |i| {
        if mask.data()[i / 3] == 1.0 {
            x.data()[i]
        } else {
            FILL
        }
    });
    Ok(PixelVideo(t))
}
