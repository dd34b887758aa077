//! Unpaired enhancement GAN: a transport-cost-plus-Wasserstein-1 objective
//! over the two quality tiers, trained by alternating critic and generator
//! updates with a gradient penalty enforcing the critic's Lipschitz bound.

pub mod adam;
pub mod arch;
pub mod checkpoint;
pub mod loss;
pub mod params;
pub mod train;

pub use arch::{Critic, CriticConfig, Generator, GeneratorConfig, Rcab, CHANNELS};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{gradient_penalty, transport_cost, w1_estimate};
pub use params::{Binding, ParamSet};
pub use train::{
    batch_tensor, enhance, load_samples, loss_history_csv, train, StepRecord, TrainConfig,
    TrainData, TrainState,
};
