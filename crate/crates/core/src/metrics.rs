//! PSNR and block SSIM on `[0, 1]` videos.

use crate::codec::{PixelMask, PixelVideo};
use crate::{invalid, math, Error, Result};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

fn check_shapes(a: &PixelVideo, b: &PixelVideo) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all pixels, or only where `region` is 1.
pub fn psnr(a: &PixelVideo, b: &PixelVideo, region: Option<&PixelMask>) -> Result<f64> {
    check_shapes(a, b)?;
    if let Some(m) = region {
        if m.shape()[..3] != a.shape()[..3] {
            return Err(Error::ShapeMismatch {
                op: "psnr region",
                lhs: a.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if region.is_some_and(|m| m.data()[i / 3] != 1.0) {
            continue;
        }
        sum += (x - y) * (x - y);
        count += 1;
    }
    if count == 0 {
        return Err(invalid!("psnr over an empty region"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * math::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Mean SSIM over non-overlapping 8×8 windows of every frame and channel,
/// with `C1 = 0.01²`, `C2 = 0.03²` and population statistics per window.
/// Partial windows at the right and bottom edges are skipped.
pub fn ssim(a: &PixelVideo, b: &PixelVideo) -> Result<f64> {
    check_shapes(a, b)?;
    let (rows, cols, frames) = (a.rows(), a.cols(), a.frames());
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(invalid!("frame {rows}x{cols} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut windows) = (0.0, 0usize);
    for f in 0..frames {
        for ch in 0..3 {
            for wr in 0..rows / SSIM_WINDOW {
                for wc in 0..cols / SSIM_WINDOW {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for r in wr * SSIM_WINDOW..(wr + 1) * SSIM_WINDOW {
                        for c in wc * SSIM_WINDOW..(wc + 1) * SSIM_WINDOW {
                            let (x, y) = (a.at(r, c, f, ch), b.at(r, c, f, ch));
                            sa += x;
                            sb += y;
                            saa += x * x;
                            sbb += y * y;
                            sab += x * y;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    windows += 1;
                }
            }
        }
    }
    Ok(total / windows as f64)
}
