use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{degrade, sample_contexts, ContextBlock, DegradeConfig, GrayImage, SampleConfig, STANDARD_QPS};
use crate::error::{Error, Result};

/// Analytic test patterns. Angles are in degrees; 0 means the pattern varies
/// only down the columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureKind {
    /// Linear ramp spanning [0, 1] across the image.
    Directional { angle: f64 },
    /// `0.5 + 0.5 sin(2 pi freq p + phase)`, `freq` in cycles per pixel.
    Sinusoid { freq: f64, phase: f64, angle: f64 },
    /// `0.5 + 0.5 cos(2 pi r / period)` around `center`.
    Rings { center: (f64, f64), period: f64 },
    Flat { value: f64 },
}

impl TextureKind {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.into()));
        match *self {
            Self::Directional { angle } if !angle.is_finite() => bad("angle must be finite"),
            Self::Sinusoid { freq, phase, angle }
                if !(freq > 0.0 && freq.is_finite() && phase.is_finite() && angle.is_finite()) =>
            {
                bad("sinusoid needs a positive frequency")
            }
            Self::Rings { period, center }
                if !(period > 0.0 && period.is_finite() && center.0.is_finite() && center.1.is_finite()) =>
            {
                bad("rings need a positive period")
            }
            Self::Flat { value } if !(0.0..=1.0).contains(&value) => bad("flat value must lie in [0, 1]"),
            _ => Ok(()),
        }
    }
}

/// Distance along the pattern direction.
fn project(x: f64, y: f64, angle: f64) -> f64 {
    let a = angle.to_radians();
    x * a.sin() + y * a.cos()
}

pub fn synth_texture(kind: &TextureKind, width: usize, height: usize, noise_sigma: f64, seed: u64) -> Result<GrayImage> {
    if width < 8 || height < 8 {
        return Err(Error::Usage(format!("texture {width}x{height} is below the 8x8 minimum")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Usage("noise sigma must be non-negative".into()));
    }
    kind.validate()?;
    let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
    let value = |x: f64, y: f64| -> f64 {
        match *kind {
            TextureKind::Directional { angle } => {
                let corners = [(0.0, 0.0), (wm, 0.0), (0.0, hm), (wm, hm)].map(|(cx, cy)| project(cx, cy, angle));
                let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo < 1e-12 {
                    0.5
                } else {
                    (project(x, y, angle) - lo) / (hi - lo)
                }
            }
            TextureKind::Sinusoid { freq, phase, angle } => {
                0.5 + 0.5 * (2.0 * PI * freq * project(x, y, angle) + phase).sin()
            }
            TextureKind::Rings { center, period } => {
                let r = (x - center.0).hypot(y - center.1);
                0.5 + 0.5 * (2.0 * PI * r / period).cos()
            }
            TextureKind::Flat { value } => value,
        }
    };
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let mut v = value(x as f64, y as f64);
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            px.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(width, height, px)
}

/// Texture families a synthetic corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Directional,
    Sinusoid,
    Rings,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Directional => "directional",
            Self::Sinusoid => "sinusoid",
            Self::Rings => "rings",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "directional" => Ok(Self::Directional),
            "sinusoid" => Ok(Self::Sinusoid),
            "rings" => Ok(Self::Rings),
            _ => Err(Error::Config(format!("unknown texture family {s:?}"))),
        }
    }

    /// Random member of the family.
    pub fn draw(self, size: usize, rng: &mut impl Rng) -> TextureKind {
        let angle = rng.random_range(0.0..180.0);
        match self {
            Self::Directional => TextureKind::Directional { angle },
            Self::Sinusoid => TextureKind::Sinusoid {
                freq: rng.random_range(1.0 / 32.0..1.0 / 6.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                angle,
            },
            Self::Rings => TextureKind::Rings {
                center: (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)),
                period: rng.random_range(6.0..24.0),
            },
        }
    }
}

/// Recipe for a corpus of context blocks cut from random synthetic textures.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n: usize,
    pub samples: usize,
    pub image_size: usize,
    pub per_image: usize,
    pub families: Vec<TextureFamily>,
    pub noise_sigma: f64,
    /// Each image is degraded at one of these, chosen uniformly.
    pub qps: Vec<u32>,
    pub sampling: SampleConfig,
}

impl CorpusSpec {
    pub fn new(n: usize, samples: usize) -> Self {
        Self {
            n,
            samples,
            image_size: (8 * n).max(64),
            per_image: 32,
            families: vec![TextureFamily::Directional, TextureFamily::Sinusoid],
            noise_sigma: 0.0,
            qps: STANDARD_QPS.to_vec(),
            sampling: SampleConfig::default(),
        }
    }
}

/// Deterministic corpus: image `i` uses family `i mod len`, random parameters,
/// a random qp, and `per_image` context samples.
pub fn synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<ContextBlock>> {
    if spec.families.is_empty() || spec.qps.is_empty() || spec.per_image == 0 {
        return Err(Error::Usage("corpus needs families, qps and per_image > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.samples);
    let mut i = 0;
    while out.len() < spec.samples {
        let family = spec.families[i % spec.families.len()];
        let kind = family.draw(spec.image_size, &mut rng);
        let clean = synth_texture(&kind, spec.image_size, spec.image_size, spec.noise_sigma, rng.random())?;
        let qp = spec.qps[rng.random_range(0..spec.qps.len())];
        let recon = degrade(&clean, &DegradeConfig { qp, block: 8 })?;
        let take = spec.per_image.min(spec.samples - out.len());
        out.extend(sample_contexts(&clean, &recon, spec.n, take, &spec.sampling, rng.random())?);
        i += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_directional() {
        let f = synth_texture(&TextureKind::Flat { value: 0.3 }, 8, 8, 0.0, 0).unwrap();
        assert!(f.pixels().iter().all(|&p| p == 0.3f64 as f32));
        let d = synth_texture(&TextureKind::Directional { angle: 0.0 }, 16, 12, 0.0, 0).unwrap();
        for y in 0..12 {
            assert!((0..16).all(|x| d.get(x, y) == d.get(0, y)));
        }
        assert!(d.get(0, 11) > d.get(0, 0));
    }

    #[test]
    fn rings_are_periodic() {
        let k = TextureKind::Rings { center: (0.0, 0.0), period: 5.0 };
        let img = synth_texture(&k, 16, 16, 0.0, 0).unwrap();
        assert!((img.get(5, 0) - img.get(10, 0)).abs() < 1e-6);
        assert!((img.get(0, 5) - img.get(0, 0)).abs() < 1e-6);
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec { per_image: 7, ..CorpusSpec::new(4, 30) };
        let a = synthetic_corpus(&spec, 11).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, synthetic_corpus(&spec, 11).unwrap());
        assert_ne!(a, synthetic_corpus(&spec, 12).unwrap());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_texture(&TextureKind::Flat { value: 0.3 }, 4, 8, 0.0, 0).is_err());
        assert!(synth_texture(&TextureKind::Flat { value: 1.3 }, 8, 8, 0.0, 0).is_err());
        let s = TextureKind::Sinusoid { freq: 0.0, phase: 0.0, angle: 0.0 };
        assert!(matches!(synth_texture(&s, 8, 8, 0.0, 0), Err(Error::Usage(_))));
    }
}
