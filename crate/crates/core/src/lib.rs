//! Enhancement of low-quality surface-mapped fMRI signals toward a
//! high-quality distribution via an unpaired, optimal-transport-guided GAN,
//! plus the surrounding pipeline: dataset files and manifests, 1D
//! preprocessing, a synthetic ground-truth generator for verification,
//! ridge-regression latent decoding, and Fréchet-distance evaluation.

pub mod autodiff;
pub mod container;
pub mod error;
pub mod gan;
pub mod manifest;
pub mod matio;
pub mod metrics;
pub mod preproc;
pub mod regression;
pub mod sample;
pub mod synth;
pub mod tensor;

pub use error::Error;
pub use sample::FmriSample;

