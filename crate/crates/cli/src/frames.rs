//! Frame sequences on disk: `00000.ppm`, `00001.ppm`, … (binary P6, 8-bit
//! RGB) plus `manifest.txt` holding `frames=<n> width=<w> height=<h>`.

use std::fs;
use std::path::Path;

use outdreamer_core::codec::PixelVideo;
use outdreamer_core::refiner::ByteVideo;

use crate::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";

pub fn frame_name(index: usize) -> String {
    format!("{index:05}.ppm")
}

/// One P6 image: header `P6\n{w} {h}\n255\n` followed by `w·h·3` bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Parse a P6 image. Header fields may be separated by any whitespace and
/// interleaved with `#` comments; the maximum value must be 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("expected magic P6, found {:?}", fields[0]));
    }
    let number = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let (width, height) = (number(fields[1], "width")?, number(fields[2], "height")?);
    if number(fields[3], "maximum value")? != 255 {
        return Err(format!("maximum value must be 255, found {}", fields[3]));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = width * height * 3;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != expected {
        return Err(format!("expected {expected} raster bytes, found {}", raster.len()));
    }
    Ok((width, height, raster.to_vec()))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Write `video` as 8-bit frames (values rounded to the nearest level).
pub fn save_frames(dir: &Path, video: &PixelVideo) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let bytes = ByteVideo::from_pixels(video);
    let (h, w, s) = (bytes.rows, bytes.cols, bytes.frames);
    for f in 0..s {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let base = bytes.index(r, c, f, 0);
                rgb.extend_from_slice(&bytes.data[base..base + 3]);
            }
        }
        write(&dir.join(frame_name(f)), &encode_ppm(w, h, &rgb))?;
    }
    write(&dir.join(MANIFEST), format!("frames={s} width={w} height={h}\n").as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

pub fn parse_manifest(text: &str) -> Result<Manifest, String> {
    let (mut frames, mut width, mut height) = (None, None, None);
    for token in text.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| format!("expected key=value, found {token:?}"))?;
        let value: usize = value.parse().map_err(|_| format!("bad value for {key}: {value:?}"))?;
        let slot = match key {
            "frames" => &mut frames,
            "width" => &mut width,
            "height" => &mut height,
            _ => continue,
        };
        if slot.replace(value).is_some() {
            return Err(format!("duplicate key {key}"));
        }
    }
    match (frames, width, height) {
        (Some(frames), Some(width), Some(height)) => Ok(Manifest { frames, width, height }),
        _ => Err("manifest needs frames, width and height".into()),
    }
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    parse_manifest(&text).map_err(|m| CliError::format(&path, m))
}

/// Read a frame directory back into a `[0, 1]` video.
pub fn load_frames(dir: &Path) -> CliResult<PixelVideo> {
    let m = read_manifest(dir)?;
    if m.frames == 0 {
        return Err(CliError::format(&dir.join(MANIFEST), "sequence has no frames"));
    }
    let mut data = vec![0u8; m.height * m.width * m.frames * 3];
    for f in 0..m.frames {
        let path = dir.join(frame_name(f));
        if !path.exists() {
            return Err(CliError::format(dir, format!("missing frame {f} ({})", frame_name(f))));
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let (w, h, rgb) = decode_ppm(&bytes).map_err(|m| CliError::format(&path, m))?;
        if (w, h) != (m.width, m.height) {
            return Err(CliError::format(
                &path,
                format!("frame is {w}x{h}, manifest says {}x{}", m.width, m.height),
            ));
        }
        for r in 0..h {
            for c in 0..w {
                let dst = ((r * w + c) * m.frames + f) * 3;
                let src = (r * w + c) * 3;
                data[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
            }
        }
    }
    Ok(ByteVideo::new(m.height, m.width, m.frames, data)?.to_pixels())
}
