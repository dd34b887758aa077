//! Checkpoint files: the versioned container with a config echo, step
//! counter, every parameter tensor, optimizer moments, RNG state, and the
//! loss history. Loading restores training bit-identically.

use super::adam::AdamState;
use super::arch::{Critic, Generator};
use super::train::{StepRecord, TrainConfig, TrainState};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: TrainConfig,
    vertex_count: usize,
    step: u64,
    rng_seed_hex: String,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    adam_generator_t: u64,
    adam_critic_t: u64,
    history: Vec<StepRecord>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Checkpoint("odd-length hex seed".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Checkpoint(format!("bad hex seed: {e}")))
        })
        .collect()
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let word_pos = state.rng.get_word_pos();
    let meta = CheckpointMeta {
        config: state.config.clone(),
        vertex_count: state.vertex_count,
        step: state.step,
        rng_seed_hex: hex_encode(&state.rng.get_seed()),
        rng_word_pos_hi: (word_pos >> 64) as u64,
        rng_word_pos_lo: word_pos as u64,
        adam_generator_t: state.adam_generator.t,
        adam_critic_t: state.adam_critic.t,
        history: state.history.clone(),
    };

    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (name, t) in state.generator.params().iter() {
        tensors.push((format!("generator.{name}"), t));
    }
    for (name, t) in state.critic.params().iter() {
        tensors.push((format!("critic.{name}"), t));
    }
    for (which, adam, params) in [
        ("generator", &state.adam_generator, state.generator.params()),
        ("critic", &state.adam_critic, state.critic.params()),
    ] {
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            tensors.push((format!("adam_{which}.m.{}", params.name(i)), m));
            tensors.push((format!("adam_{which}.v.{}", params.name(i)), v));
        }
    }
    write_container(path, KIND, &meta, &tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let (meta, tensors): (CheckpointMeta, Vec<(String, Tensor<f32>)>) =
        read_container(path, KIND)?;
    meta.config.validate()?;

    // rebuild the architectures from the echoed config, then overwrite every
    // tensor by name; any mismatch is a corrupt or incompatible file
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut generator: Generator<f32> = Generator::new(&meta.config.generator, &mut throwaway);
    let mut critic: Critic<f32> = Critic::new(&meta.config.critic, meta.vertex_count, &mut throwaway);
    let mut adam_generator = AdamState::new(generator.params());
    let mut adam_critic = AdamState::new(critic.params());
    adam_generator.t = meta.adam_generator_t;
    adam_critic.t = meta.adam_critic_t;

    let mut consumed = 0usize;
    for (name, tensor) in &tensors {
        let target: Option<&mut Tensor<f32>> = if let Some(rest) =
            name.strip_prefix("generator.")
        {
            generator.params_mut().index_of(rest).map(|i| generator.params_mut().tensor_mut(i))
        } else if let Some(rest) = name.strip_prefix("critic.") {
            critic.params_mut().index_of(rest).map(|i| critic.params_mut().tensor_mut(i))
        } else if let Some(rest) = name.strip_prefix("adam_generator.m.") {
            generator.params().index_of(rest).map(|i| &mut adam_generator.m[i])
        } else if let Some(rest) = name.strip_prefix("adam_generator.v.") {
            generator.params().index_of(rest).map(|i| &mut adam_generator.v[i])
        } else if let Some(rest) = name.strip_prefix("adam_critic.m.") {
            critic.params().index_of(rest).map(|i| &mut adam_critic.m[i])
        } else if let Some(rest) = name.strip_prefix("adam_critic.v.") {
            critic.params().index_of(rest).map(|i| &mut adam_critic.v[i])
        } else {
            None
        };
        let target = target.ok_or_else(|| {
            Error::Checkpoint(format!("unexpected tensor {name:?} in {}", path.display()))
        })?;
        if target.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                target.shape()
            )));
        }
        *target = tensor.clone();
        consumed += 1;
    }
    let expected = 2 * (generator.params().len() + critic.params().len())
        + generator.params().len()
        + critic.params().len();
    if consumed != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {consumed} tensors, expected {expected}"
        )));
    }

    let seed_bytes = hex_decode(&meta.rng_seed_hex)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(((meta.rng_word_pos_hi as u128) << 64) | meta.rng_word_pos_lo as u128);

    Ok(TrainState {
        config: meta.config,
        vertex_count: meta.vertex_count,
        step: meta.step,
        generator,
        critic,
        adam_generator,
        adam_critic,
        rng,
        history: meta.history,
    })
}
