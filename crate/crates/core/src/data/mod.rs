//! Image ingestion, multi-scale preparation, quantization-noise simulation,
//! context extraction and synthetic textures.

mod context;
mod degrade;
mod image;
mod synth;

pub use context::{context_window, sample_contexts, AvailabilityMode, ContextBlock, SampleConfig};
pub use degrade::{degrade, qstep, DegradeConfig, STANDARD_QPS};
pub use image::{
    load_image, multi_scale, read_manifest, resample_area, save_pgm, GrayImage, STANDARD_SCALES,
};
pub use synth::{synth_texture, synthetic_corpus, CorpusSpec, TextureFamily, TextureKind};
