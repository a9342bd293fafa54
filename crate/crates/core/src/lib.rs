//! Taxonomy-conditioned diffusion: data, conditioning, denoiser, training,
//! guided sampling and evaluation.

pub mod checkpoint;
pub mod condition;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod eval;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod ppm;
pub mod sampler;
pub mod synth;
pub mod taxonomy;
pub mod trainer;
