//! PNG encode/decode and resampling for the [-1, 1] image convention.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Result, XganError};

/// Writes an RGB8 buffer as a PNG with fixed encoder settings, so repeated
/// writes of identical pixels are byte-identical files.
pub fn write_rgb8(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), (width * height * 3) as usize);
    let file = File::create(path).map_err(|e| XganError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let mut writer = enc.write_header().map_err(|e| XganError::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| XganError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads a PNG into an RGB8 buffer, expanding grayscale and dropping alpha.
pub fn read_rgb8(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| XganError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| XganError::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| XganError::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(XganError::Data(format!(
            "{}: only 8-bit images are supported",
            path.display()
        )));
    }
    let (w, h) = (info.width, info.height);
    let n = (w * h) as usize;
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..n * 3].to_vec(),
        png::ColorType::Rgba => {
            let mut out = Vec::with_capacity(n * 3);
            for px in buf[..n * 4].chunks_exact(4) {
                out.extend_from_slice(&px[..3]);
            }
            out
        }
        png::ColorType::Grayscale => {
            let mut out = Vec::with_capacity(n * 3);
            for &g in &buf[..n] {
                out.extend_from_slice(&[g, g, g]);
            }
            out
        }
        png::ColorType::GrayscaleAlpha => {
            let mut out = Vec::with_capacity(n * 3);
            for px in buf[..n * 2].chunks_exact(2) {
                out.extend_from_slice(&[px[0], px[0], px[0]]);
            }
            out
        }
        other => {
            return Err(XganError::Data(format!(
                "{}: unsupported png color type {other:?}",
                path.display()
            )))
        }
    };
    Ok((w, h, rgb))
}

/// u8 [0, 255] -> [-1, 1]
#[inline]
pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// [-1, 1] -> u8, clamped and rounded.
#[inline]
pub fn unit_to_u8(v: f32) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Resamples an RGB8 image. Integer downscales use exact box averaging;
/// everything else is bilinear. Deterministic.
pub fn resize_rgb8(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<u8> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    if sw % dw == 0 && sh % dh == 0 {
        let (fx, fy) = (sw / dw, sh / dh);
        let mut out = vec![0u8; dw * dh * 3];
        for y in 0..dh {
            for x in 0..dw {
                for c in 0..3 {
                    let mut acc = 0u32;
                    for oy in 0..fy {
                        for ox in 0..fx {
                            acc += src[((y * fy + oy) * sw + x * fx + ox) * 3 + c] as u32;
                        }
                    }
                    out[(y * dw + x) * 3 + c] = ((acc + (fx * fy) as u32 / 2) / (fx * fy) as u32) as u8;
                }
            }
        }
        return out;
    }
    let mut out = vec![0u8; dw * dh * 3];
    for y in 0..dh {
        let sy = (y as f32 + 0.5) * sh as f32 / dh as f32 - 0.5;
        let y0 = sy.floor().clamp(0.0, (sh - 1) as f32) as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = (sy - y0 as f32).clamp(0.0, 1.0);
        for x in 0..dw {
            let sx = (x as f32 + 0.5) * sw as f32 / dw as f32 - 0.5;
            let x0 = sx.floor().clamp(0.0, (sw - 1) as f32) as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = (sx - x0 as f32).clamp(0.0, 1.0);
            for c in 0..3 {
                let p00 = src[(y0 * sw + x0) * 3 + c] as f32;
                let p01 = src[(y0 * sw + x1) * 3 + c] as f32;
                let p10 = src[(y1 * sw + x0) * 3 + c] as f32;
                let p11 = src[(y1 * sw + x1) * 3 + c] as f32;
                let v = p00 * (1.0 - tx) * (1.0 - ty) + p01 * tx * (1.0 - ty) + p10 * (1.0 - tx) * ty + p11 * tx * ty;
                out[(y * dw + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}
