//! Anomaly-map artifacts: raw arrays, grayscale heatmaps, and colour overlays.
//!
//! Raw layout (little endian): 8-byte magic `GTMAPRAW`, `u32` version, `u32`
//! height, `u32` width, then `height·width` row-major `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"GTMAPRAW";
pub const RAW_VERSION: u32 = 1;

pub fn write_raw(path: &Path, map: ArrayView2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |reason: &str| Error::CorruptSample { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
        return Err(corrupt("not a raw anomaly map"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(8) != RAW_VERSION {
        return Err(corrupt("unsupported raw map version"));
    }
    let (h, w) = (word(12) as usize, word(16) as usize);
    if bytes.len() != 20 + 4 * h * w {
        return Err(corrupt("payload size does not match the header"));
    }
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| corrupt(&e.to_string()))
}

/// Scales `v` from `[lo, hi]` into `[0, 1]`.
fn unit(v: f32, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Piecewise-linear jet colormap.
pub fn jet(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f32| ((1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// 8-bit grayscale heatmap with `[lo, hi]` mapped to `[0, 255]`.
pub fn heatmap(map: ArrayView2<f32>, lo: f32, hi: f32) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(unit(map[[y as usize, x as usize]], lo, hi) * 255.0).round() as u8])
    })
}

/// Jet-coloured map blended half-and-half over `rgb` (values in `[0, 1]`, `(H, W, 3)`).
pub fn overlay(map: ArrayView2<f32>, rgb: ArrayView3<f32>, lo: f32, hi: f32) -> Result<RgbImage> {
    let (h, w) = map.dim();
    let (ih, iw, c) = rgb.dim();
    if (ih, iw) != (h, w) || c != 3 {
        return Err(Error::shape(format!("overlay image {:?} vs map {:?}", rgb.dim(), map.dim())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let colour = jet(unit(map[[y, x]], lo, hi));
        let mut px = [0u8; 3];
        for k in 0..3 {
            let base = rgb[[y, x, k]].clamp(0.0, 1.0) * 255.0;
            px[k] = (0.5 * base + 0.5 * f32::from(colour[k])).round() as u8;
        }
        Rgb(px)
    }))
}
