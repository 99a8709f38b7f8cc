//! Binary PGM/PPM (maxval up to 65535) and PFM.
//!
//! PNM files are assumed gamma-encoded: loading maps `v/maxval` through
//! `x^2.2` to linear intensity. Writers store linear values as given.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEGAMMA_EXPONENT: f64 = 2.2;

fn header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated image header"));
        }
        let tok =
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(path, "non-ASCII header"))?;
        tokens.push(tok);
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, pos + 1))
}

fn dim(tok: &str, what: &str, path: &Path) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::parse(path, format!("bad {what} {tok:?}")))
}

/// Binary PGM (1 channel) or PPM (3 channels), de-gamma'd to linear [0, 1].
pub fn read_pnm(bytes: &[u8], path: &Path) -> Result<Vec<Array2<f64>>> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        "P2" | "P3" => return Err(Error::Unsupported("ASCII PNM; only binary P5/P6 is read".into())),
        m => return Err(Error::parse(path, format!("bad PNM magic {m:?}"))),
    };
    let (w, h) = (dim(tokens[1], "width", path)?, dim(tokens[2], "height", path)?);
    let maxval = dim(tokens[3], "maxval", path)?;
    if maxval > 65535 {
        return Err(Error::parse(path, format!("maxval {maxval} exceeds 65535")));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let expected = w * h * channels * sample;
    let raster = bytes.get(offset..).unwrap_or(&[]);
    if raster.len() < expected {
        return Err(Error::parse(
            path,
            format!(
                "raster truncated: expected {expected} bytes, found {}",
                raster.len()
            ),
        ));
    }
    let mut out = vec![Array2::<f64>::zeros((h, w)); channels];
    for (i, px) in raster[..expected].chunks_exact(sample).enumerate() {
        let v = if sample == 1 {
            px[0] as f64
        } else {
            u16::from_be_bytes([px[0], px[1]]) as f64
        };
        let linear = (v / maxval as f64).min(1.0).powf(DEGAMMA_EXPONENT);
        let (pixel, c) = (i / channels, i % channels);
        out[c][[pixel / w, pixel % w]] = linear;
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Vec<Array2<f64>>> {
    let path = path.as_ref();
    read_pnm(&super::read_file(path)?, path)
}

fn to_level(v: f64, maxval: u32) -> u32 {
    (v.clamp(0.0, 1.0) * maxval as f64).round() as u32
}

fn encode_pnm(channels: &[&Array2<f64>], maxval: u32) -> Result<Vec<u8>> {
    let magic = match channels.len() {
        1 => "P5",
        3 => "P6",
        n => return Err(Error::Validation(format!("PNM needs 1 or 3 channels, got {n}"))),
    };
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Validation(format!(
            "maxval must be in 1..=65535, got {maxval}"
        )));
    }
    let (h, w) = channels[0].dim();
    for c in channels {
        crate::error::ensure_shape("image channel", &[h, w], c.shape())?;
    }
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    for r in 0..h {
        for col in 0..w {
            for c in channels {
                let level = to_level(c[[r, col]], maxval);
                if maxval < 256 {
                    out.push(level as u8);
                } else {
                    out.extend_from_slice(&(level as u16).to_be_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Writes values in [0, 1] (clamped) without gamma encoding.
pub fn save_pgm(path: impl AsRef<Path>, image: &Array2<f64>, maxval: u32) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_pnm(&[image], maxval)?)
}

pub fn save_ppm(path: impl AsRef<Path>, rgb: [&Array2<f64>; 3], maxval: u32) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_pnm(&rgb, maxval)?)
}

/// Linear 8-bit preview scaled so the maximum maps to white.
pub fn save_pgm_preview(path: impl AsRef<Path>, values: &Array2<f64>) -> Result<()> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scaled = if max > 0.0 { values / max } else { values.clone() };
    save_pgm(path, &scaled, 255)
}

/// Grayscale little-endian PFM (`Pf`, negative scale), rows stored bottom-up.
pub fn save_pfm(path: impl AsRef<Path>, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for r in (0..h).rev() {
        for c in 0..w {
            out.extend_from_slice(&(image[[r, c]] as f32).to_le_bytes());
        }
    }
    super::write_atomic(path.as_ref(), &out)
}

pub fn read_pfm(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    if tokens[0] != "Pf" {
        return Err(Error::Unsupported(format!(
            "PFM type {:?}; only grayscale Pf",
            tokens[0]
        )));
    }
    let (w, h) = (dim(tokens[1], "width", path)?, dim(tokens[2], "height", path)?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(path, format!("bad PFM scale {:?}", tokens[3])))?;
    let raster = bytes.get(offset..).unwrap_or(&[]);
    if raster.len() < w * h * 4 {
        return Err(Error::parse(
            path,
            format!(
                "raster truncated: expected {} bytes, found {}",
                w * h * 4,
                raster.len()
            ),
        ));
    }
    let mut out = Array2::zeros((h, w));
    for (i, px) in raster[..w * h * 4].chunks_exact(4).enumerate() {
        let bytes = [px[0], px[1], px[2], px[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        out[[h - 1 - i / w, i % w]] = v as f64;
    }
    Ok(out)
}
