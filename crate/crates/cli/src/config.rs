//! `key=value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use psrnn::data::{TextureFamily, STANDARD_QPS};
use psrnn::eval::{BlockPolicy, EvalConfig};
use psrnn::intra::IntraConfig;
use psrnn::model::NetworkConfig;
use psrnn::train::{LossKind, TrainConfig};
use psrnn::{Error, Result};

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory written by `prepare`.
    Archive(PathBuf),
}

/// Where evaluation or demo images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Synthetic,
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub scales: bool,
    pub qps: Vec<u32>,
    pub data: DataSource,
    pub samples: usize,
    pub families: Vec<TextureFamily>,
    pub noise_sigma: f64,
    pub four_block_fraction: f64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Block size of the unified model; 0 trains a per-size network.
    pub plus_target: usize,
    pub base_model: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub qp: u32,
    pub eval: EvalConfig,
    pub eval_images: ImageSource,
    pub eval_count: usize,
    pub eval_size: usize,
    pub seeds: Vec<u64>,
    pub unit_counts: Vec<usize>,
    pub demo_cases: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            manifest: None,
            scales: true,
            qps: STANDARD_QPS.to_vec(),
            data: DataSource::Synthetic,
            samples: 50_000,
            families: vec![TextureFamily::Directional, TextureFamily::Sinusoid],
            noise_sigma: 0.0,
            four_block_fraction: 0.25,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            plus_target: 0,
            base_model: None,
            models: Vec::new(),
            qp: 32,
            eval: EvalConfig::default(),
            eval_images: ImageSource::Synthetic,
            eval_count: 8,
            eval_size: 64,
            seeds: vec![1, 2, 3],
            unit_counts: vec![1, 2, 3, 4],
            demo_cases: 2,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| bad(key, s)))
        .collect()
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("{key}: invalid value {v:?}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| bad(key, v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.trim().is_empty() && v.trim() != "none").then(|| PathBuf::from(v.trim()))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Applies one setting; `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "manifest" => self.manifest = path_opt(v),
            "scales" => self.scales = num(key, v)?,
            "qps" => self.qps = list(key, v)?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    dir => DataSource::Archive(PathBuf::from(dir)),
                }
            }
            "samples" => self.samples = num(key, v)?,
            "families" => {
                self.families = v.split(',').map(|s| TextureFamily::parse(s.trim())).collect::<Result<_>>()?
            }
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "four_block_fraction" => self.four_block_fraction = num(key, v)?,
            "loss" => t.loss = LossKind::parse(v)?,
            "total_iters" => t.total_iters = num(key, v)?,
            "milestones" => t.milestones = if v == "auto" { None } else { Some(list(key, v)?) },
            "base_lr" => t.base_lr = num(key, v)?,
            "decay_ratio" => t.decay_ratio = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "validation_fraction" => t.validation_fraction = num(key, v)?,
            "selection_window" => t.selection_window = num(key, v)?,
            "grad_clip" => t.grad_clip = if v == "none" { None } else { Some(num(key, v)?) },
            "checkpoint_every" => t.checkpoint_every = if v == "auto" { None } else { Some(num(key, v)?) },
            "satd_partition" => {
                t.satd.partition = num(key, v)?;
                self.eval.intra.satd.partition = t.satd.partition;
            }
            "satd_epsilon" => {
                t.satd.epsilon = num(key, v)?;
                self.eval.intra.satd.epsilon = t.satd.epsilon;
            }
            "plus_target" => self.plus_target = num(key, v)?,
            "base_model" => self.base_model = path_opt(v),
            "models" => self.models = v.split(',').filter_map(path_opt).collect(),
            "qp" => self.qp = num(key, v)?,
            "block_sizes" => self.eval.block_sizes = list(key, v)?,
            "block_policy" => self.eval.policy = BlockPolicy::parse(v)?,
            "smoothing" => self.eval.intra.smoothing = num(key, v)?,
            "mode_bits" => self.eval.intra.mode_bits = num(key, v)?,
            "network_bits" => self.eval.intra.network_bits = num(key, v)?,
            "split_bits" => self.eval.split_bits = num(key, v)?,
            "eval_images" => {
                self.eval_images = match v {
                    "synthetic" => ImageSource::Synthetic,
                    p => ImageSource::Manifest(PathBuf::from(p)),
                }
            }
            "eval_count" => self.eval_count = num(key, v)?,
            "eval_size" => self.eval_size = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "unit_counts" => self.unit_counts = list(key, v)?,
            "demo_cases" => self.demo_cases = num(key, v)?,
            _ => return self.network.set(key, v),
        }
        Ok(true)
    }

    /// Applies `key=value` lines; `#` starts a comment. All unknown keys are
    /// reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut unknown = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            if !self.set(k.trim(), v)? {
                unknown.push(k.trim().to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Pushes shared settings into the library configs and checks them.
    pub fn finish(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.train.threads = self.threads;
        self.train.pu_size = self.network.pu_size;
        self.train.availability = self.network.availability;
        self.eval.threads = self.threads;
        self.network.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.four_block_fraction) {
            return Err(Error::Config("four_block_fraction must lie in [0, 1]".into()));
        }
        if self.families.is_empty() || self.qps.is_empty() {
            return Err(Error::Config("families and qps must be non-empty".into()));
        }
        Ok(())
    }

    pub fn intra(&self) -> IntraConfig {
        self.eval.intra
    }

    /// Every setting in a fixed order; feeding the text back reproduces the run.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let e = &self.eval;
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("out".into(), self.out.display().to_string()),
            ("manifest".into(), show_path(&self.manifest)),
            ("scales".into(), self.scales.to_string()),
            ("qps".into(), join(&self.qps)),
            (
                "data".into(),
                match &self.data {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Archive(p) => p.display().to_string(),
                },
            ),
            ("samples".into(), self.samples.to_string()),
            (
                "families".into(),
                self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            ),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("four_block_fraction".into(), self.four_block_fraction.to_string()),
        ];
        pairs.extend(self.network.to_pairs());
        pairs.extend([
            ("loss".into(), t.loss.name().into()),
            ("total_iters".into(), t.total_iters.to_string()),
            ("milestones".into(), t.milestones.as_ref().map_or_else(|| "auto".into(), |m| join(m))),
            ("base_lr".into(), t.base_lr.to_string()),
            ("decay_ratio".into(), t.decay_ratio.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("validation_fraction".into(), t.validation_fraction.to_string()),
            ("selection_window".into(), t.selection_window.to_string()),
            ("grad_clip".into(), t.grad_clip.map_or_else(|| "none".into(), |c| c.to_string())),
            (
                "checkpoint_every".into(),
                t.checkpoint_every.map_or_else(|| "auto".into(), |c| c.to_string()),
            ),
            ("satd_partition".into(), t.satd.partition.to_string()),
            ("satd_epsilon".into(), t.satd.epsilon.to_string()),
            ("plus_target".into(), self.plus_target.to_string()),
            ("base_model".into(), show_path(&self.base_model)),
            (
                "models".into(),
                self.models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("qp".into(), self.qp.to_string()),
            ("block_sizes".into(), join(&e.block_sizes)),
            ("block_policy".into(), e.policy.name().into()),
            ("smoothing".into(), e.intra.smoothing.to_string()),
            ("mode_bits".into(), e.intra.mode_bits.to_string()),
            ("network_bits".into(), e.intra.network_bits.to_string()),
            ("split_bits".into(), e.split_bits.to_string()),
            (
                "eval_images".into(),
                match &self.eval_images {
                    ImageSource::Synthetic => "synthetic".into(),
                    ImageSource::Manifest(p) => p.display().to_string(),
                },
            ),
            ("eval_count".into(), self.eval_count.to_string()),
            ("eval_size".into(), self.eval_size.to_string()),
            ("seeds".into(), join(&self.seeds)),
            ("unit_counts".into(), join(&self.unit_counts)),
            ("demo_cases".into(), self.demo_cases.to_string()),
        ]);
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
