//! HEVC-style directional intra prediction on [0, 1] samples: reference
//! construction with substitution, optional [1 2 1] smoothing, Planar, DC and
//! the 33 angular modes, plus an exhaustive SATD + bits mode search.

use crate::data::{AvailabilityMode, GrayImage};
use crate::error::{Error, Result};
use crate::satd::{satd, SatdConfig};
use crate::tensor::Tensor;

pub const NUM_MODES: usize = 35;

const ANGLES: [i32; 33] = [
    32, 26, 21, 17, 13, 9, 5, 2, 0, -2, -5, -9, -13, -17, -21, -26, -32, -26, -21, -17, -13, -9,
    -5, -2, 0, 2, 5, 9, 13, 17, 21, 26, 32,
];

fn inv_angle(angle: i32) -> i32 {
    match angle {
        -2 => -4096,
        -5 => -1638,
        -9 => -910,
        -13 => -630,
        -17 => -482,
        -21 => -390,
        -26 => -315,
        -32 => -256,
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IntraMode(u8);

impl IntraMode {
    pub const PLANAR: Self = Self(0);
    pub const DC: Self = Self(1);
    pub const HORIZONTAL: Self = Self(10);
    pub const VERTICAL: Self = Self(26);

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_MODES {
            Ok(Self(index as u8))
        } else {
            Err(Error::Mode(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_MODES as u8).map(Self)
    }
}

/// Single-line references of an `N x N` block.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSamples {
    pub n: usize,
    /// Corner at index 0, then `2N` samples above the block and the block to its right.
    pub top: Vec<f64>,
    /// `2N` samples left of the block and the block below it.
    pub left: Vec<f64>,
    /// Segments fully available before substitution:
    /// below-left, left, corner, above, above-right.
    pub available: [bool; 5],
    pub fill_value: f64,
}

impl ReferenceSamples {
    /// Scan order used by substitution and smoothing: bottom-left upwards,
    /// through the corner, then left to right along the top.
    fn scan(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.left.iter().rev().copied().collect();
        v.extend(&self.top);
        v
    }

    fn from_scan(n: usize, s: &[f64], available: [bool; 5], fill_value: f64) -> Self {
        let left = s[..2 * n].iter().rev().copied().collect();
        let top = s[2 * n..].to_vec();
        Self {
            n,
            top,
            left,
            available,
            fill_value,
        }
    }

    /// Builds references from already-known sample values; `None` marks a
    /// missing sample. Both slices follow the field layout.
    pub fn from_samples(n: usize, top: &[Option<f64>], left: &[Option<f64>], fill_value: f64) -> Result<Self> {
        if n == 0 || top.len() != 2 * n + 1 || left.len() != 2 * n {
            return Err(Error::Shape(format!(
                "references for N={n} need {} top and {} left samples",
                2 * n + 1,
                2 * n
            )));
        }
        let scan: Vec<Option<f64>> = left.iter().rev().chain(top).copied().collect();
        let seg = |r: std::ops::Range<usize>| scan[r].iter().all(Option::is_some);
        let available = [
            seg(0..n),
            seg(n..2 * n),
            seg(2 * n..2 * n + 1),
            seg(2 * n + 1..3 * n + 1),
            seg(3 * n + 1..4 * n + 1),
        ];
        let filled = match scan.iter().position(Option::is_some) {
            None => vec![fill_value; scan.len()],
            Some(first) => {
                let mut prev = scan[first].expect("found");
                scan.iter()
                    .map(|s| {
                        if let Some(v) = s {
                            prev = *v;
                        }
                        prev
                    })
                    .collect()
            }
        };
        Ok(Self::from_scan(n, &filled, available, fill_value))
    }

    /// [1 2 1]/4 along the scan, endpoints kept.
    pub fn smoothed(&self) -> Self {
        let s = self.scan();
        let mut f = s.clone();
        for i in 1..s.len() - 1 {
            f[i] = (s[i - 1] + 2.0 * s[i] + s[i + 1]) / 4.0;
        }
        Self::from_scan(self.n, &f, self.available, self.fill_value)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.top
            .iter()
            .chain(&self.left)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// References for the block at `origin` from a reconstructed image. The
/// below-left segment is used only in four-block mode; anything outside the
/// image is substituted.
pub fn build_reference_samples(
    image: &GrayImage,
    origin: (usize, usize),
    n: usize,
    availability: AvailabilityMode,
) -> Result<ReferenceSamples> {
    let (x0, y0) = origin;
    let (w, h) = (image.width(), image.height());
    if n == 0 || x0 + n > w || y0 + n > h {
        return Err(Error::Bounds {
            x: x0,
            y: y0,
            size: n,
            width: w,
            height: h,
        });
    }
    let at = |x: isize, y: isize| -> Option<f64> {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| image.get(x as usize, y as usize) as f64)
    };
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top: Vec<Option<f64>> = (-1..2 * n as isize).map(|dx| at(x0 + dx, y0 - 1)).collect();
    let left: Vec<Option<f64>> = (0..2 * n as isize)
        .map(|dy| {
            if dy >= n as isize && availability == AvailabilityMode::ThreeBlock {
                None
            } else {
                at(x0 - 1, y0 + dy)
            }
        })
        .collect();
    ReferenceSamples::from_samples(n, &top, &left, 0.5)
}

/// Whether HEVC would smooth the references for this mode and size.
pub fn uses_smoothing(mode: IntraMode, n: usize) -> bool {
    let threshold = match n {
        8 => 7,
        16 => 1,
        32 => 0,
        _ => return false,
    };
    if mode == IntraMode::DC {
        return false;
    }
    let m = mode.index() as i32;
    (m - 26).abs().min((m - 10).abs()) > threshold
}

/// `N x N` prediction (row-major, `[y][x]`). With `smoothing`, references are
/// filtered whenever [`uses_smoothing`] says so.
pub fn predict_mode(refs: &ReferenceSamples, mode: IntraMode, smoothing: bool) -> Result<Tensor<f64>> {
    let n = refs.n;
    if refs.top.len() != 2 * n + 1 || refs.left.len() != 2 * n {
        return Err(Error::Shape("reference arrays do not match N".into()));
    }
    let filtered;
    let r = if smoothing && uses_smoothing(mode, n) {
        filtered = refs.smoothed();
        &filtered
    } else {
        refs
    };
    let mut out = vec![0.0f64; n * n];
    match mode.index() {
        0 => {
            let (tr, bl) = (r.top[n + 1], r.left[n]);
            for y in 0..n {
                for x in 0..n {
                    let v = (n - 1 - x) as f64 * r.left[y]
                        + (x + 1) as f64 * tr
                        + (n - 1 - y) as f64 * r.top[x + 1]
                        + (y + 1) as f64 * bl;
                    out[y * n + x] = v / (2 * n) as f64;
                }
            }
        }
        1 => {
            let dc = (r.top[1..=n].iter().sum::<f64>() + r.left[..n].iter().sum::<f64>()) / (2 * n) as f64;
            out.fill(dc);
        }
        m => {
            let angle = ANGLES[m - 2];
            let vertical = m >= 18;
            // Main reference along the prediction direction, side reference across it.
            let (main, side): (Vec<f64>, Vec<f64>) = if vertical {
                (r.top.clone(), std::iter::once(r.top[0]).chain(r.left.iter().copied()).collect())
            } else {
                (std::iter::once(r.top[0]).chain(r.left.iter().copied()).collect(), r.top.clone())
            };
            let ni = n as i32;
            // refs[k + n] holds ref[k] for k in -n..=2n.
            let mut ext = vec![0.0f64; 3 * n + 1];
            ext[n..].copy_from_slice(&main);
            if angle < 0 && (ni * angle) >> 5 < -1 {
                let inv = inv_angle(angle);
                for k in (ni * angle) >> 5..0 {
                    ext[(k + ni) as usize] = side[((k * inv + 128) >> 8) as usize];
                }
            }
            for i in 0..n {
                let pos = (i as i32 + 1) * angle;
                let (idx, fact) = (pos >> 5, (pos & 31) as f64);
                for j in 0..n {
                    let base = (j as i32 + idx + 1 + ni) as usize;
                    let v = if fact == 0.0 {
                        ext[base]
                    } else {
                        ((32.0 - fact) * ext[base] + fact * ext[base + 1]) / 32.0
                    };
                    // Vertical modes step rows by i; horizontal modes step columns.
                    let (y, x) = if vertical { (i, j) } else { (j, i) };
                    out[y * n + x] = v;
                }
            }
        }
    }
    Tensor::new(&[n, n], out)
}

/// HM-style intra lambda.
pub fn lambda(qp: u32) -> f64 {
    0.57 * 2f64.powf((qp as f64 - 12.0) / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraConfig {
    pub smoothing: bool,
    /// Flat signalling cost of any baseline mode.
    pub mode_bits: f64,
    /// Cost of the flag selecting the network.
    pub network_bits: f64,
    pub satd: SatdConfig,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            smoothing: true,
            mode_bits: 6.0,
            network_bits: 1.0,
            satd: SatdConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Mode(IntraMode),
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeCost {
    pub choice: Choice,
    /// On the 8-bit sample scale.
    pub satd: f64,
    pub bits: f64,
    pub lambda: f64,
    pub total: f64,
}

impl ModeCost {
    pub fn new(choice: Choice, satd: f64, bits: f64, lambda: f64) -> Self {
        Self {
            choice,
            satd,
            bits,
            lambda,
            total: satd + lambda * bits,
        }
    }
}

/// SATD of `prediction - target` on the 8-bit scale.
pub fn block_satd(prediction: &Tensor<f64>, target: &Tensor<f32>, cfg: &SatdConfig) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let d: Vec<f64> = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - *t as f64) * 255.0)
        .collect();
    satd(&Tensor::new(prediction.shape(), d)?, cfg)
}

/// Cheapest of the 35 modes; ties go to the lowest index.
pub fn best_mode_search(refs: &ReferenceSamples, target: &Tensor<f32>, lambda: f64, cfg: &IntraConfig) -> Result<ModeCost> {
    let mut best: Option<ModeCost> = None;
    for mode in IntraMode::all() {
        let pred = predict_mode(refs, mode, cfg.smoothing)?;
        let c = ModeCost::new(Choice::Mode(mode), block_satd(&pred, target, &cfg.satd)?, cfg.mode_bits, lambda);
        if best.is_none_or(|b| c.total < b.total) {
            best = Some(c);
        }
    }
    Ok(best.expect("35 modes"))
}
