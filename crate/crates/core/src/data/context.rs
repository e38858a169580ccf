use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which neighbors of the block are reconstructed when it is predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AvailabilityMode {
    /// Above-left, above, above-right and left-below are all known.
    FourBlock,
    /// The left-below block is not yet coded.
    ThreeBlock,
}

impl AvailabilityMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::FourBlock => "four-block",
            Self::ThreeBlock => "three-block",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "four-block" => Ok(Self::FourBlock),
            "three-block" => Ok(Self::ThreeBlock),
            _ => Err(Error::Config(format!("unknown availability mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBlock {
    /// `2N x 2N`; the bottom-right quadrant (and bottom-left in three-block mode) hold the fill value.
    pub context: Tensor<f32>,
    /// Clean `N x N` block.
    pub target: Tensor<f32>,
    pub mode: AvailabilityMode,
    /// Top-left corner of the block, not of the window.
    pub origin: (usize, usize),
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    /// Probability of drawing a four-block context.
    pub four_block_fraction: f64,
    pub fill: f32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            four_block_fraction: 0.25,
            fill: 0.5,
        }
    }
}

/// The `2N x 2N` window whose bottom-right quadrant is the block at `origin`.
pub fn context_window(
    recon: &GrayImage,
    origin: (usize, usize),
    n: usize,
    mode: AvailabilityMode,
    fill: f32,
) -> Result<Tensor<f32>> {
    let (x, y) = origin;
    if x < n || y < n || x + n > recon.width() || y + n > recon.height() {
        return Err(Error::Bounds {
            x,
            y,
            size: n,
            width: recon.width(),
            height: recon.height(),
        });
    }
    let mut ctx = recon.crop(x - n, y - n, 2 * n, 2 * n)?;
    let s = 2 * n;
    let data = ctx.data_mut();
    let x0 = if mode == AvailabilityMode::ThreeBlock { 0 } else { n };
    for r in n..s {
        data[r * s + x0..r * s + s].fill(fill);
    }
    Ok(ctx)
}

/// Uniformly placed windows; deterministic for a given seed.
pub fn sample_contexts(
    clean: &GrayImage,
    degraded: &GrayImage,
    n: usize,
    count: usize,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Vec<ContextBlock>> {
    if (clean.width(), clean.height()) != (degraded.width(), degraded.height()) {
        return Err(Error::Shape("clean and degraded images differ in size".into()));
    }
    if n == 0 || clean.width() < 2 * n || clean.height() < 2 * n {
        return Err(Error::Size(format!(
            "{}x{} image cannot hold a {}x{} context",
            clean.width(),
            clean.height(),
            2 * n,
            2 * n
        )));
    }
    if !(0.0..=1.0).contains(&cfg.four_block_fraction) {
        return Err(Error::Config("four_block_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = rng.random_range(n..=clean.width() - n);
            let y = rng.random_range(n..=clean.height() - n);
            let mode = if rng.random::<f64>() < cfg.four_block_fraction {
                AvailabilityMode::FourBlock
            } else {
                AvailabilityMode::ThreeBlock
            };
            Ok(ContextBlock {
                context: context_window(degraded, (x, y), n, mode, cfg.fill)?,
                target: clean.crop(x, y, n, n)?,
                mode,
                origin: (x, y),
                n,
            })
        })
        .collect()
}
