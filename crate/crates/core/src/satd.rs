//! Hadamard transform, SATD, and the smoothed SATD gradient used as a
//! training loss.
//!
//! For a residue tile `D` the transformed tile is `D' = H D H` (the Sylvester
//! matrix is symmetric, so `H^T = H`). SATD is `sum |D'_ij|` over every
//! non-overlapping `partition x partition` tile in raster order. The loss
//! gradient replaces `|x|` by `sqrt(x^2 + eps)` which gives, per tile,
//! `dS/dD = H G H` with `G_ij = D'_ij / sqrt(D'_ij^2 + eps)`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Unnormalised Sylvester Hadamard matrix with entries in {-1, +1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HadamardMatrix {
    order: usize,
    entries: Vec<i32>,
}

impl HadamardMatrix {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || !order.is_power_of_two() {
            return Err(Error::InvalidOrder(order));
        }
        let mut entries = vec![1i32];
        let mut n = 1;
        while n < order {
            let m = 2 * n;
            let mut next = vec![0i32; m * m];
            for i in 0..n {
                for j in 0..n {
                    let v = entries[i * n + j];
                    next[i * m + j] = v;
                    next[i * m + j + n] = v;
                    next[(i + n) * m + j] = v;
                    next[(i + n) * m + j + n] = -v;
                }
            }
            entries = next;
            n = m;
        }
        Ok(Self { order, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.entries[i * self.order + j]
    }

    fn as_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&v| v as f64).collect()
    }
}

/// Tile size and smoothing term for SATD and its gradient.
///
/// SATD is an unnormalised sum over the whole residue: it is not divided by
/// the pixel count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SatdConfig {
    pub partition: usize,
    pub epsilon: f64,
}

impl Default for SatdConfig {
    fn default() -> Self {
        Self {
            partition: 4,
            epsilon: 1e-8,
        }
    }
}

impl SatdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.partition == 0 || !self.partition.is_power_of_two() {
            return Err(Error::InvalidOrder(self.partition));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("satd epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Difference `prediction - target` in f64.
pub fn residue<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<f64>> {
    if prediction.shape() != target.shape() {
        return shape_err(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        ));
    }
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| p.to_f64() - t.to_f64())
        .collect();
    Tensor::new(prediction.shape(), data)
}

/// `H * X * H` for a square `n x n` f64 tile.
fn sandwich(h: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let hik = h[i * n + k];
            for j in 0..n {
                tmp[i * n + j] += hik * x[k * n + j];
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let t = tmp[i * n + k];
            for j in 0..n {
                out[i * n + j] += t * h[k * n + j];
            }
        }
    }
    out
}

/// `D' = H D H` for a single square tile whose side equals the matrix order.
pub fn hadamard_transform<T: Real>(d: &Tensor<T>, h: &HadamardMatrix) -> Result<Tensor<f64>> {
    let n = h.order();
    if d.shape() != [n, n] {
        return shape_err(format!("tile {:?} for Hadamard order {n}", d.shape()));
    }
    Tensor::new(&[n, n], sandwich(&h.as_f64(), &d.to_f64_vec(), n))
}

fn tile_dims<T: Real>(d: &Tensor<T>, cfg: &SatdConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (height, width) = match d.shape() {
        &[h, w] => (h, w),
        s => return shape_err(format!("residue must be rank 2, got {s:?}")),
    };
    let p = cfg.partition;
    if height % p != 0 || width % p != 0 {
        return Err(Error::Partition {
            height,
            width,
            partition: p,
        });
    }
    Ok((height, width))
}

/// Visits every transformed tile in raster order as `(tile_row, tile_col, D')`.
fn for_each_tile<T: Real>(
    d: &Tensor<T>,
    cfg: &SatdConfig,
    mut f: impl FnMut(usize, usize, &[f64], &[f64]),
) -> Result<()> {
    let (height, width) = tile_dims(d, cfg)?;
    let p = cfg.partition;
    let h = HadamardMatrix::new(p)?.as_f64();
    let src = d.data();
    let mut tile = vec![0.0; p * p];
    for ty in (0..height).step_by(p) {
        for tx in (0..width).step_by(p) {
            for y in 0..p {
                for x in 0..p {
                    tile[y * p + x] = src[(ty + y) * width + tx + x].to_f64();
                }
            }
            let transformed = sandwich(&h, &tile, p);
            f(ty, tx, &transformed, &h);
        }
    }
    Ok(())
}

/// Sum over tiles of `||H D H||_1`.
pub fn satd<T: Real>(d: &Tensor<T>, cfg: &SatdConfig) -> Result<f64> {
    let mut total = 0.0;
    for_each_tile(d, cfg, |_, _, t, _| total += t.iter().map(|v| v.abs()).sum::<f64>())?;
    Ok(total)
}

/// The smoothed objective `sum sqrt(D'^2 + eps)` whose exact gradient is
/// [`satd_loss_grad`].
pub fn smoothed_satd<T: Real>(d: &Tensor<T>, cfg: &SatdConfig) -> Result<f64> {
    let eps = cfg.epsilon;
    let mut total = 0.0;
    for_each_tile(d, cfg, |_, _, t, _| {
        total += t.iter().map(|v| (v * v + eps).sqrt()).sum::<f64>()
    })?;
    Ok(total)
}

/// Gradient of the smoothed SATD with respect to every residue entry.
pub fn satd_loss_grad<T: Real>(d: &Tensor<T>, cfg: &SatdConfig) -> Result<Tensor<f64>> {
    let eps = cfg.epsilon;
    let p = cfg.partition;
    let width = d.shape().get(1).copied().unwrap_or(0);
    let mut grad = vec![0.0; d.len()];
    for_each_tile(d, cfg, |ty, tx, t, h| {
        let g: Vec<f64> = t.iter().map(|v| v / (v * v + eps).sqrt()).collect();
        let back = sandwich(h, &g, p);
        for y in 0..p {
            for x in 0..p {
                grad[(ty + y) * width + tx + x] = back[y * p + x];
            }
        }
    })?;
    Tensor::new(d.shape(), grad)
}
