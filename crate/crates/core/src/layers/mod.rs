//! Trainable building blocks: GRU, PReLU, convolution layers, and the optimiser.

mod conv;
mod gru;
mod optim;
mod prelu;

pub use conv::{ConvCache, ConvLayer, ConvLayerGrads, PRELU_INIT};
pub use gru::{
    gru_backward, gru_forward, gru_sequence, GateActivation, GruBackward, GruGrads, GruParams,
    GruStep,
};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule};
pub use prelu::PRelu;

use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Uniform in `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
pub(crate) fn glorot<T: Real>(t: &mut Tensor<T>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64(rng.random_range(-limit..limit));
    }
}
