//! The PS-RNN predictor, its unified variable-block-size variant, and the
//! binary model file.

mod file;
mod network;
mod plus;
mod unit;

pub use file::{load_model, save_model, ModelFile, SavedModel, MAGIC, VERSION};
pub use network::{NetworkCache, PsRnnNetwork};
pub use plus::{PlusCache, PsRnnPlus, PLUS_BASE_SIZE};
pub use unit::{PsRnnUnit, UnitCache, UnitGrads};

use crate::data::AvailabilityMode;
use crate::error::{Error, Result};
use crate::layers::GateActivation;
use crate::tensor::{Real, Tensor};

/// Block sizes a per-size model can be built for.
pub const PU_SIZES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Side `N` of the predicted block; the context is `2N x 2N`.
    pub pu_size: usize,
    pub preproc_channels: Vec<usize>,
    /// Hidden channels per position for each PS-RNN unit, in order.
    pub unit_cells: Vec<usize>,
    pub fusion_kernel: usize,
    pub recon_channels: usize,
    pub gate_activation: GateActivation,
    /// `None` for a model trained on a mix of both availability conditions.
    pub availability: Option<AvailabilityMode>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            pu_size: 8,
            preproc_channels: vec![8, 8],
            unit_cells: vec![8, 4, 4],
            fusion_kernel: 3,
            recon_channels: 8,
            gate_activation: GateActivation::Sigmoid,
            availability: None,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: bad integer {s:?}")))
        })
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl NetworkConfig {
    pub fn with_pu_size(pu_size: usize) -> Self {
        Self {
            pu_size,
            ..Self::default()
        }
    }

    pub fn context_size(&self) -> usize {
        2 * self.pu_size
    }

    /// Default widths with `units` PS-RNN units: 8 cells first, 4 after.
    pub fn with_units(mut self, units: usize) -> Self {
        self.unit_cells = (0..units).map(|i| if i == 0 { 8 } else { 4 }).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !PU_SIZES.contains(&self.pu_size) {
            return Err(Error::Config(format!(
                "pu_size {} not in {PU_SIZES:?}",
                self.pu_size
            )));
        }
        if self.unit_cells.is_empty() {
            return Err(Error::Config("network needs at least one PS-RNN unit".into()));
        }
        if self.preproc_channels.is_empty() {
            return Err(Error::Config("network needs at least one preprocessing layer".into()));
        }
        let zero = |v: &[usize]| v.iter().any(|&c| c == 0);
        if zero(&self.unit_cells) || zero(&self.preproc_channels) || self.recon_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.fusion_kernel % 2 == 0 {
            return Err(Error::Config("fusion kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("pu_size".into(), self.pu_size.to_string()),
            ("preproc_channels".into(), join_list(&self.preproc_channels)),
            ("unit_cells".into(), join_list(&self.unit_cells)),
            ("fusion_kernel".into(), self.fusion_kernel.to_string()),
            ("recon_channels".into(), self.recon_channels.to_string()),
            ("gate_activation".into(), self.gate_activation.name().into()),
            (
                "availability".into(),
                self.availability.map_or("mixed", |a| a.name()).into(),
            ),
        ]
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: bad integer {v:?}")))
        };
        match key {
            "pu_size" => self.pu_size = int(value)?,
            "preproc_channels" => self.preproc_channels = parse_list(key, value)?,
            "unit_cells" => self.unit_cells = parse_list(key, value)?,
            "fusion_kernel" => self.fusion_kernel = int(value)?,
            "recon_channels" => self.recon_channels = int(value)?,
            "gate_activation" => self.gate_activation = GateActivation::parse(value.trim())?,
            "availability" => {
                self.availability = match value.trim() {
                    "mixed" => None,
                    v => Some(AvailabilityMode::parse(v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown network key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A trainable predictor mapping a `2N x 2N` context to an `N x N` block.
pub trait Model<T: Real>: Clone + Send + Sync {
    type Cache: Send;

    fn pu_size(&self) -> usize;

    fn forward(&self, context: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    /// Gradients for [`Model::trainable`], in the same order.
    fn backward(&self, cache: &Self::Cache, grad_prediction: &Tensor<T>) -> Result<Vec<Tensor<f64>>>;

    fn trainable(&self) -> Vec<(String, &Tensor<T>)>;

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn predict(&self, context: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(context)?.0)
    }

    fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Runs forward then backward in one call.
pub fn network_backward<T: Real, M: Model<T>>(
    model: &M,
    context: &Tensor<T>,
    grad_prediction: &Tensor<T>,
) -> Result<Vec<Tensor<f64>>> {
    let (_, cache) = model.forward(context)?;
    model.backward(&cache, grad_prediction)
}
