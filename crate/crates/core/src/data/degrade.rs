//! Stand-in for codec reconstruction: blockwise DCT, uniform quantization,
//! inverse DCT.

use std::sync::OnceLock;

use super::GrayImage;
use crate::error::{Error, Result};

pub const STANDARD_QPS: [u32; 4] = [22, 27, 32, 37];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeConfig {
    pub qp: u32,
    pub block: usize,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { qp: 32, block: 8 }
    }
}

/// Quantizer step on the 0-255 scale.
pub fn qstep(qp: u32) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

/// Orthonormal DCT-II basis, `m[k][i]`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

fn dct8() -> &'static [f64] {
    static M: OnceLock<Vec<f64>> = OnceLock::new();
    M.get_or_init(|| dct_matrix(8))
}

/// `out = a * x * b^T` style helper: `out[i][j] = sum_k sum_l l[i][k] x[k][l] r[j][l]`.
fn sandwich(l: &[f64], x: &[f64], r: &[f64], n: usize, lt: bool, rt: bool) -> Vec<f64> {
    let at = |m: &[f64], i: usize, j: usize, t: bool| if t { m[j * n + i] } else { m[i * n + j] };
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = (0..n).map(|k| at(l, i, k, lt) * x[k * n + j]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| tmp[i * n + k] * at(r, j, k, rt)).sum();
        }
    }
    out
}

pub fn degrade(img: &GrayImage, cfg: &DegradeConfig) -> Result<GrayImage> {
    let n = cfg.block;
    if n == 0 {
        return Err(Error::Config("transform block size must be positive".into()));
    }
    let owned;
    let m: &[f64] = if n == 8 {
        dct8()
    } else {
        owned = dct_matrix(n);
        &owned
    };
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.div_ceil(n) * n, h.div_ceil(n) * n);
    let q = qstep(cfg.qp);
    let mut out = vec![0.0f32; w * h];
    let mut block = vec![0.0f64; n * n];
    for by in (0..ph).step_by(n) {
        for bx in (0..pw).step_by(n) {
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = ((bx + j).min(w - 1), (by + i).min(h - 1));
                    block[i * n + j] = img.get(x, y) as f64 * 255.0;
                }
            }
            let mut coef = sandwich(m, &block, m, n, false, false);
            for c in &mut coef {
                *c = (*c / q).round() * q;
            }
            let rec = sandwich(m, &coef, m, n, true, true);
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (bx + j, by + i);
                    if x < w && y < h {
                        out[y * w + x] = (rec[i * n + j].round().clamp(0.0, 255.0) / 255.0) as f32;
                    }
                }
            }
        }
    }
    GrayImage::new(w, h, out)
}
