//! Map and image export: raw `PMAP` dumps, 8-bit PGM, PNG, and triptychs.
//!
//! `PMAP` layout: 16-byte header (`"PMAP"`, u32 height, u32 width, u32
//! channels, little-endian) followed by `height·width·channels` f64 values,
//! little-endian, row-major with channels innermost.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const PMAP_MAGIC: &[u8; 4] = b"PMAP";

/// Height, width, channels of an `[H, W]` or `[H, W, C]` tensor.
fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::contract("map export", format!("expected [H, W] or [H, W, C], got {s:?}"))),
    }
}

pub fn encode_pmap(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = hwc(t)?;
    let mut out = Vec::with_capacity(16 + t.numel() * 8);
    out.extend_from_slice(PMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a dump into `[H, W]` (one channel) or `[H, W, C]`.
pub fn decode_pmap(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != PMAP_MAGIC {
        return Err(Error::Format("not a PMAP dump".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (field(4), field(8), field(12));
    let n = h * w * c;
    if bytes.len() != 16 + n * 8 {
        return Err(Error::Format(format!(
            "PMAP {h}x{w}x{c} expects {} bytes, found {}",
            16 + n * 8,
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let shape = if c == 1 { vec![h, w] } else { vec![h, w, c] };
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_pmap(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pmap(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_pmap(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pmap(&bytes)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary (P5) PGM of a single-channel map with values in [0, 1].
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = hwc(t)?;
    if c != 1 {
        return Err(Error::contract("pgm export", format!("expected one channel, got {c}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(t)?).map_err(|e| Error::io(path, e))
}

/// 8-bit PNG; one channel is written as grayscale, three as RGB.
pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = hwc(t)?;
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::contract("png export", format!("unsupported channel count {c}"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Gray [0, 1] map → RGB with a simple blue-to-red ramp.
pub fn heat_rgb(map: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(map)?;
    if c != 1 {
        return Err(Error::contract("heat_rgb", "expected single-channel map"));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for &v in map.data() {
        let v = v.clamp(0.0, 1.0);
        data.extend_from_slice(&[v, (1.0 - (2.0 * v - 1.0).abs()) * 0.8, 1.0 - v]);
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Nearest-neighbour upscale of an `[H, W, C]` image to `[oh, ow, C]`.
fn upscale(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = y * h / oh;
        for x in 0..ow {
            let sx = x * w / ow;
            data.extend_from_slice(&t.data()[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(vec![oh, ow, c], data).expect("consistent shape")
}

/// Side-by-side panels (all converted to RGB at the first panel's size),
/// separated by a 2-pixel white gutter.
pub fn triptych(panels: &[Tensor]) -> Result<Tensor> {
    let first = panels.first().ok_or_else(|| Error::contract("triptych", "no panels"))?;
    let (h, w, _) = hwc(first)?;
    let rgb: Vec<Tensor> = panels
        .iter()
        .map(|p| {
            let p = match hwc(p)? {
                (_, _, 1) => heat_rgb(p)?,
                (_, _, 3) => p.clone(),
                (_, _, c) => return Err(Error::contract("triptych", format!("unsupported channel count {c}"))),
            };
            Ok(upscale(&p, h, w))
        })
        .collect::<Result<_>>()?;
    let gutter = 2;
    let total_w = w * rgb.len() + gutter * (rgb.len() - 1);
    let mut data = vec![1.0; h * total_w * 3];
    for (i, p) in rgb.iter().enumerate() {
        let x0 = i * (w + gutter);
        for y in 0..h {
            let dst = (y * total_w + x0) * 3;
            data[dst..dst + w * 3].copy_from_slice(&p.data()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Tensor::new(vec![h, total_w, 3], data)
}

/// Writes a map as both PGM and PNG plus a raw dump, using `stem` as the
/// common path prefix.
pub fn export_map(stem: &Path, map: &Tensor) -> Result<()> {
    write_pgm(&stem.with_extension("pgm"), map)?;
    write_png(&stem.with_extension("png"), map)?;
    write_pmap(&stem.with_extension("pmap"), map)
}
