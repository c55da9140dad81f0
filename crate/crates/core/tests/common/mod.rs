//! Straight-line reference implementations on plain nested vectors.
//!
//! Nothing here calls into the library's math; each function restates one
//! formula with explicit loops so the tensor code can be checked against it.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use gtrans::nn::{ColumnLayerNorm, Linear};
use gtrans::tfm::BlockParams;

pub type Mat = Vec<Vec<f64>>;

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// A rank-2 tensor as rows.
pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    let v = to_vec(t);
    (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect()
}

/// Batch item `b` of a `(B, R, C)` tensor as rows.
pub fn item_mat(t: &Tensor, b: usize) -> Mat {
    to_mat(&t.get(b).unwrap())
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

pub fn affine(l: &Linear) -> Affine {
    let w = to_mat(&l.weight);
    let b = match &l.bias {
        Some(b) => to_vec(b),
        None => vec![0.0; w.len()],
    };
    Affine { w, b }
}

/// `W·X + b` with `X` holding one column per item.
pub fn apply_columns(a: &Affine, x: &Mat) -> Mat {
    let out = a.w.len();
    let n = x[0].len();
    let mut y = vec![vec![0.0; n]; out];
    for o in 0..out {
        for j in 0..n {
            let mut s = a.b[o];
            for (i, row) in x.iter().enumerate() {
                s += a.w[o][i] * row[j];
            }
            y[o][j] = s;
        }
    }
    y
}

pub struct Norm {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

pub fn norm(n: &ColumnLayerNorm) -> Norm {
    Norm { gain: to_vec(&n.gain), offset: to_vec(&n.offset) }
}

/// Layer norm of every column over the row axis, ε = 1e-5.
pub fn layer_norm_columns(x: &Mat, n: &Norm) -> Mat {
    let d = x.len();
    let cols = x[0].len();
    let mut y = vec![vec![0.0; cols]; d];
    for j in 0..cols {
        let mean = (0..d).map(|i| x[i][j]).sum::<f64>() / d as f64;
        let var = (0..d).map(|i| (x[i][j] - mean).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            y[i][j] = (x[i][j] - mean) / (var + 1e-5).sqrt() * n.gain[i] + n.offset[i];
        }
    }
    y
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub struct Block {
    pub wq: Affine,
    pub wk: Affine,
    pub wv: Affine,
    pub l1: Affine,
    pub l2: Affine,
    pub n1: Norm,
    pub n2: Norm,
}

pub fn block(p: &BlockParams) -> Block {
    Block {
        wq: affine(&p.w_q),
        wk: affine(&p.w_k),
        wv: affine(&p.w_v),
        l1: affine(&p.l1),
        l2: affine(&p.l2),
        n1: norm(&p.attn_norm),
        n2: norm(&p.out_norm),
    }
}

/// Attention weights `S[key][query]`, softmax over keys for each query column.
pub fn attention_weights(p: &Block, queries_from: &Mat, keys_from: &Mat) -> Mat {
    let q = apply_columns(&p.wq, queries_from);
    let k = apply_columns(&p.wk, keys_from);
    let d = q.len();
    let n = q[0].len();
    let mut s = vec![vec![0.0; n]; n];
    for j in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|r| k[r][i] * q[r][j]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        for (i, w) in softmax(&logits).into_iter().enumerate() {
            s[i][j] = w;
        }
    }
    s
}

fn block_forward(p: &Block, input: &Mat, memory: &Mat) -> Mat {
    let s = attention_weights(p, input, memory);
    let v = apply_columns(&p.wv, memory);
    let d = input.len();
    let n = input[0].len();
    let mut a = vec![vec![0.0; n]; d];
    for r in 0..d {
        for j in 0..n {
            a[r][j] = (0..n).map(|i| v[r][i] * s[i][j]).sum();
        }
    }
    let na = layer_norm_columns(&a, &p.n1);
    let ea: Mat = (0..d).map(|r| (0..n).map(|j| input[r][j] + na[r][j]).collect()).collect();
    let mut hidden = apply_columns(&p.l2, &ea);
    for row in hidden.iter_mut() {
        for v in row.iter_mut() {
            *v = v.max(0.0);
        }
    }
    let ff = apply_columns(&p.l1, &hidden);
    let sum: Mat = (0..d).map(|r| (0..n).map(|j| ea[r][j] + ff[r][j]).collect()).collect();
    layer_norm_columns(&sum, &p.n2)
}

pub fn encoder_block(p: &Block, input: &Mat) -> Mat {
    block_forward(p, input, input)
}

pub fn decoder_block(p: &Block, input: &Mat, memory: &Mat) -> Mat {
    block_forward(p, input, memory)
}

/// Feature map `(C, H·W)` rows → tokens `(d, g)`, plus the attention `S[pixel][group]`.
pub fn tokenize(group: &Affine, value: &Affine, fm: &Mat) -> (Mat, Mat) {
    let c = fm.len();
    let hw = fm[0].len();
    let logits = apply_columns(group, fm); // (g, HW)
    let g = logits.len();
    let mut s = vec![vec![0.0; g]; hw];
    for k in 0..g {
        let col: Vec<f64> = (0..hw).map(|p| logits[k][p] / (c as f64).sqrt()).collect();
        for (p, w) in softmax(&col).into_iter().enumerate() {
            s[p][k] = w;
        }
    }
    let values = apply_columns(value, fm); // (d, HW)
    let d = values.len();
    let mut tokens = vec![vec![0.0; g]; d];
    for r in 0..d {
        for k in 0..g {
            tokens[r][k] = (0..hw).map(|p| s[p][k] * values[r][p]).sum();
        }
    }
    (tokens, s)
}

/// Mapper for one layer: student/guide maps `(C, H·W)`, tokens `(d, g)`.
/// Returns the mapped map and the attention `S[pixel][token]`.
pub fn map_layer(query: &Affine, key: &Affine, value: &Affine, student: &Mat, guide: &Mat, tokens: &Mat) -> (Mat, Mat) {
    let c = student.len();
    let hw = student[0].len();
    let xq = apply_columns(query, guide); // (C, HW)
    let tk = apply_columns(key, tokens); // (C, g)
    let tv = apply_columns(value, tokens); // (C, g)
    let g = tokens[0].len();
    let mut s = vec![vec![0.0; g]; hw];
    let mut out = student.clone();
    for p in 0..hw {
        let logits: Vec<f64> = (0..g)
            .map(|t| (0..c).map(|ch| xq[ch][p] * tk[ch][t]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        s[p] = softmax(&logits);
        for ch in 0..c {
            out[ch][p] += (0..g).map(|t| s[p][t] * tv[ch][t]).sum::<f64>();
        }
    }
    (out, s)
}

/// Layer as `[c][y][x]`.
pub type Layer = Vec<Vec<Vec<f64>>>;

pub fn layer_of(t: &Tensor) -> Layer {
    let dims = t.dims().to_vec();
    let (c, h, w) = (dims[dims.len() - 3], dims[dims.len() - 2], dims[dims.len() - 1]);
    let v = to_vec(t);
    (0..c).map(|ch| (0..h).map(|y| (0..w).map(|x| v[(ch * h + y) * w + x]).collect()).collect()).collect()
}

pub fn pixel_loss(g: &Layer, m: &Layer) -> Mat {
    let (c, h, w) = (g.len(), g[0].len(), g[0][0].len());
    let mut p = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let d = g[ch][y][x] - m[ch][y][x];
                s += d * d;
            }
            p[y][x] = 0.5 * s;
        }
    }
    p
}

/// `Σ_l (1/(w·h)) Σ_ij p^l_ij` for one image.
pub fn total_loss(g: &[Layer], m: &[Layer]) -> f64 {
    g.iter()
        .zip(m)
        .map(|(a, b)| {
            let p = pixel_loss(a, b);
            let n = (p.len() * p[0].len()) as f64;
            p.iter().flatten().sum::<f64>() / n
        })
        .sum()
}

pub fn layer_loss_map(g: &Layer, m: &Layer) -> Mat {
    let p = pixel_loss(g, m);
    let n = (p.len() * p[0].len()) as f64;
    p.into_iter().map(|row| row.into_iter().map(|v| v / n).collect()).collect()
}

pub fn alpha_mse(g: &Layer, m: &Layer) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (a, b) in g.iter().flatten().flatten().zip(m.iter().flatten().flatten()) {
        s += (a - b) * (a - b);
        n += 1;
    }
    s / n as f64
}

pub fn alpha_cos(g: &Layer, m: &Layer) -> f64 {
    let a: Vec<f64> = g.iter().flatten().flatten().copied().collect();
    let b: Vec<f64> = m.iter().flatten().flatten().copied().collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    1.0 - dot / (na * nb)
}

/// Harmonic-mean weight, written as `1 / (½(1/a_mse + 1/(λ a_cos)))`, halved.
pub fn layer_weight(a_mse: f64, a_cos: f64, lambda: f64) -> f64 {
    if a_mse == 0.0 || a_cos == 0.0 {
        return 0.0;
    }
    0.5 * 2.0 / (1.0 / a_mse + 1.0 / (lambda * a_cos))
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

fn flood(mask: &Mat, seen: &mut Vec<Vec<bool>>, y: usize, x: usize, out: &mut Vec<(usize, usize)>) {
    if seen[y][x] || mask[y][x] == 0.0 {
        return;
    }
    seen[y][x] = true;
    out.push((y, x));
    let (h, w) = (mask.len() as i64, mask[0].len() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if (0..h).contains(&ny) && (0..w).contains(&nx) {
                flood(mask, seen, ny as usize, nx as usize, out);
            }
        }
    }
}

/// 8-connected components of every mask as pixel lists `(image, y, x)`.
pub fn components(masks: &[Mat]) -> Vec<Vec<(usize, usize, usize)>> {
    let mut all = Vec::new();
    for (k, mask) in masks.iter().enumerate() {
        let mut seen = vec![vec![false; mask[0].len()]; mask.len()];
        for y in 0..mask.len() {
            for x in 0..mask[0].len() {
                let mut comp = Vec::new();
                flood(mask, &mut seen, y, x, &mut comp);
                if !comp.is_empty() {
                    all.push(comp.into_iter().map(|(a, b)| (k, a, b)).collect());
                }
            }
        }
    }
    all
}

/// AUPRO by evaluating FPR and PRO afresh at every distinct threshold.
pub fn aupro_exhaustive(maps: &[Mat], masks: &[Mat], cap: f64) -> f64 {
    let comps = components(masks);
    let mut thresholds: Vec<f64> = maps.iter().flatten().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let negatives: usize = masks.iter().flatten().flatten().filter(|&&v| v == 0.0).count();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut fp = 0usize;
        for (map, mask) in maps.iter().zip(masks) {
            for y in 0..map.len() {
                for x in 0..map[0].len() {
                    if mask[y][x] == 0.0 && map[y][x] >= t {
                        fp += 1;
                    }
                }
            }
        }
        let pro = comps
            .iter()
            .map(|c| c.iter().filter(|&&(k, y, x)| maps[k][y][x] >= t).count() as f64 / c.len() as f64)
            .sum::<f64>()
            / comps.len() as f64;
        points.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= cap {
            break;
        }
        let (xe, ye) = if x1 > cap { (cap, y0 + (y1 - y0) * (cap - x0) / (x1 - x0)) } else { (x1, y1) };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / cap
}
