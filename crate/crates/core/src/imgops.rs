//! Resampling and smoothing on dense arrays.
//!
//! Resizing follows half-pixel-centre conventions (`align_corners = false`):
//! output pixel `o` samples source coordinate `(o + 0.5)·in/out − 0.5`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = (src - i0 as f64) as f32;
            (i0, i1, if i0 == i1 { 0.0 } else { frac })
        })
        .collect()
}

/// Bilinear resize of an `(H, W, C)` array.
pub fn resize_bilinear3(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, c) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows = bilinear_taps(out_h, in_h);
    let cols = bilinear_taps(out_w, in_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
                let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel map.
pub fn resize_bilinear(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let expanded = src.insert_axis(Axis(2));
    resize_bilinear3(expanded, out_h, out_w).index_axis_move(Axis(2), 0)
}

/// Nearest-neighbour resize (source index `floor(o·in/out)`).
pub fn resize_nearest<T: Copy + Default>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y * in_h) / out_h).min(in_h - 1);
        let sx = ((x * in_w) / out_w).min(in_w - 1);
        src[[sy, sx]]
    })
}

/// Centre crop of the two leading axes.
pub fn center_crop3(src: ArrayView3<f32>, size: usize) -> Array3<f32> {
    let (h, w, _) = src.dim();
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    src.slice(ndarray::s![top..top + size, left..left + size, ..]).to_owned()
}

pub fn center_crop2<T: Clone>(src: ArrayView2<T>, size: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    src.slice(ndarray::s![top..top + size, left..left + size]).to_owned()
}

/// Normalized Gaussian kernel truncated at `4σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(0.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(index: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = index.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn convolve_axis(src: &Array2<f64>, kernel: &[f64], axis: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                acc += wk
                    * if axis == 0 {
                        src[[reflect(y as isize + off, h), x]]
                    } else {
                        src[[y, reflect(x as isize + off, w)]]
                    };
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Separable Gaussian smoothing with reflect padding. `sigma <= 0` is the identity.
pub fn gaussian_blur(src: ArrayView2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let wide = src.mapv(f64::from);
    let rows = convolve_axis(&wide, &kernel, 0);
    let both = convolve_axis(&rows, &kernel, 1);
    both.mapv(|v| v as f32)
}
