//! Alternating critic/generator training on the unpaired pools, with
//! deterministic seeded batching, checkpoint hooks, and inference.

use super::adam::AdamState;
use super::arch::{Critic, CriticConfig, Generator, GeneratorConfig, CHANNELS};
use super::loss::{gradient_penalty_node, transport_cost_node, w1_node};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::manifest::{SampleRef, SplitPlan};
use crate::sample::FmriSample;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the adversarial divergence term.
    pub lambda: f64,
    pub critic_steps_per_gen: u32,
    pub lr_generator: f64,
    pub lr_critic: f64,
    /// Gradient-penalty coefficient.
    pub gradient_penalty_coeff: f64,
    pub batch_size: usize,
    /// Number of generator updates to run.
    pub max_steps: u64,
    pub seed: u64,
    /// Invoke the checkpoint hook every this many generator steps.
    pub checkpoint_interval: u64,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            critic_steps_per_gen: 5,
            lr_generator: 1e-4,
            lr_critic: 1e-4,
            gradient_penalty_coeff: 10.0,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 500,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("train config", "lambda must be > 0"));
        }
        if self.gradient_penalty_coeff < 0.0 {
            return Err(Error::invalid("train config", "penalty coefficient must be >= 0"));
        }
        if self.critic_steps_per_gen == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train config",
                "critic_steps_per_gen and batch_size must be positive",
            ));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::invalid("train config", "checkpoint_interval must be positive"));
        }
        Ok(())
    }
}

/// Per-step loss record; one CSV row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub transport_cost: f32,
    pub w1_estimate: f32,
    pub critic_loss: f32,
}

/// `step,transport_cost,w1_estimate,critic_loss` rows; formatting is
/// deterministic (shortest round-trip floats), so identical histories yield
/// identical bytes.
pub fn loss_history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,transport_cost,w1_estimate,critic_loss\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.transport_cost, r.w1_estimate, r.critic_loss
        ));
    }
    out
}

/// The two unpaired training pools, fully materialized.
pub struct TrainData {
    pub x_high: Vec<FmriSample>,
    pub y_low: Vec<FmriSample>,
}

/// Load the referenced samples in order, rooted at their manifest directory.
pub fn load_samples(refs: &[SampleRef], root: impl AsRef<Path>) -> Result<Vec<FmriSample>> {
    refs.iter()
        .map(|r| FmriSample::load(root.as_ref().join(&r.rel_path)))
        .collect()
}

impl TrainData {
    pub fn load(
        plan: &SplitPlan,
        low_root: impl AsRef<Path>,
        high_root: impl AsRef<Path>,
    ) -> Result<Self> {
        Ok(TrainData {
            x_high: load_samples(&plan.train_high, high_root)?,
            y_low: load_samples(&plan.train_low, low_root)?,
        })
    }

    fn vertex_count(&self) -> Result<usize> {
        let v = self
            .x_high
            .first()
            .or_else(|| self.y_low.first())
            .ok_or_else(|| Error::invalid("train data", "both pools empty"))?
            .vertex_count();
        for s in self.x_high.iter().chain(self.y_low.iter()) {
            if s.vertex_count() != v {
                return Err(Error::ShapeMismatch(format!(
                    "vertex counts differ in pools: {} vs {v}",
                    s.vertex_count()
                )));
            }
        }
        Ok(v)
    }
}

/// Full training state; checkpoints restore it bit-identically.
pub struct TrainState {
    pub config: TrainConfig,
    pub vertex_count: usize,
    pub step: u64,
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    pub adam_generator: AdamState<f32>,
    pub adam_critic: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh state: identity-initialized generator, random critic, zeroed
    /// optimizer moments, RNG at the seed.
    pub fn init(config: &TrainConfig, vertex_count: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&config.generator, &mut rng);
        let critic = Critic::new(&config.critic, vertex_count, &mut rng);
        let adam_generator = AdamState::new(generator.params());
        let adam_critic = AdamState::new(critic.params());
        Ok(TrainState {
            config: config.clone(),
            vertex_count,
            step: 0,
            generator,
            critic,
            adam_generator,
            adam_critic,
            rng,
            history: Vec::new(),
        })
    }

    /// Run (or continue) the alternating loop until `max_steps`, invoking
    /// `on_checkpoint` at the configured interval and at the final step.
    ///
    /// A non-finite loss aborts with [`Error::NonFiniteLoss`]; checkpoints
    /// already handed to the hook remain the last good state.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        if data.x_high.is_empty() || data.y_low.is_empty() {
            return Err(Error::invalid("train data", "both quality tiers must be nonempty"));
        }
        let v = data.vertex_count()?;
        if v != self.vertex_count {
            return Err(Error::ShapeMismatch(format!(
                "data vertex count {v} vs state {}",
                self.vertex_count
            )));
        }
        let cfg = self.config.clone();
        let lambda = cfg.lambda as f32;
        let gamma = cfg.gradient_penalty_coeff as f32;

        while self.step < cfg.max_steps {
            let mut last_w1 = 0.0f32;
            let mut last_critic_loss = 0.0f32;

            for _ in 0..cfg.critic_steps_per_gen {
                let xb = sample_batch(&mut self.rng, &data.x_high, cfg.batch_size);
                let yb = sample_batch(&mut self.rng, &data.y_low, cfg.batch_size);
                let u: Vec<f32> = (0..cfg.batch_size)
                    .map(|_| self.rng.gen_range(0.0f32..1.0))
                    .collect();

                let gy = self.generator.apply_batch(&yb)?;

                let mut g: Graph<f32> = Graph::new();
                let cb = self.critic.bind(&mut g, true);
                let xv = g.constant(xb);
                let gyv = g.constant(gy);
                let dx = self.critic.forward(&mut g, &cb, xv)?;
                let dgy = self.critic.forward(&mut g, &cb, gyv)?;
                let w1 = w1_node(&mut g, dx, dgy);
                let uv = g.constant(Tensor::from_vec(&[cfg.batch_size], u));
                let gp = gradient_penalty_node(&mut g, &self.critic, &cb, xv, gyv, uv, gamma)?;
                let neg_w1 = g.neg(w1);
                let loss = g.add(neg_w1, gp);

                last_w1 = g.item(w1);
                last_critic_loss = g.item(loss);
                if !last_critic_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: self.step });
                }
                let grads = g.grad(loss, &cb.vars);
                let grad_tensors: Vec<Tensor<f32>> =
                    grads.iter().map(|&v| g.value(v).clone()).collect();
                drop(g);
                self.adam_critic
                    .step(self.critic.params_mut(), &grad_tensors, cfg.lr_critic);
            }

            let yb = sample_batch(&mut self.rng, &data.y_low, cfg.batch_size);
            let mut g: Graph<f32> = Graph::new();
            let gb = self.generator.bind(&mut g, true);
            let cb = self.critic.bind(&mut g, false);
            let yv = g.constant(yb);
            let gy = self.generator.forward(&mut g, &gb, yv)?;
            let tc = transport_cost_node(&mut g, yv, gy);
            let dgy = self.critic.forward(&mut g, &cb, gy)?;
            let adv = g.mean_all(dgy);
            let adv = g.scale(adv, -lambda);
            let loss = g.add(tc, adv);

            let tc_value = g.item(tc);
            if !g.item(loss).is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step });
            }
            let grads = g.grad(loss, &gb.vars);
            let grad_tensors: Vec<Tensor<f32>> = grads.iter().map(|&v| g.value(v).clone()).collect();
            drop(g);
            self.adam_generator
                .step(self.generator.params_mut(), &grad_tensors, cfg.lr_generator);

            self.step += 1;
            self.history.push(StepRecord {
                step: self.step,
                transport_cost: tc_value,
                w1_estimate: last_w1,
                critic_loss: last_critic_loss,
            });

            if self.step % cfg.checkpoint_interval == 0 || self.step == cfg.max_steps {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Train from scratch; convenience over `TrainState::init` + `run`.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainState> {
    let v = data.vertex_count()?;
    let mut state = TrainState::init(config, v)?;
    state.run(data, |_| Ok(()))?;
    Ok(state)
}

/// Apply the trained generator per trial; identities preserved.
pub fn enhance(state: &TrainState, samples: &[FmriSample]) -> Result<Vec<FmriSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(state.config.batch_size.max(1)) {
        for s in chunk {
            if s.vertex_count() != state.vertex_count {
                return Err(Error::ShapeMismatch(format!(
                    "sample vertex count {} vs trained {}",
                    s.vertex_count(),
                    state.vertex_count
                )));
            }
        }
        let refs: Vec<&FmriSample> = chunk.iter().collect();
        let batch = batch_tensor(&refs);
        let enhanced = state.generator.apply_batch(&batch)?;
        let v = state.vertex_count;
        for (i, s) in chunk.iter().enumerate() {
            let row = &enhanced.data()[i * CHANNELS * v..(i + 1) * CHANNELS * v];
            out.push(s.with_values(row[..v].to_vec(), row[v..].to_vec())?);
        }
    }
    Ok(out)
}

/// `[B, 2, V]` tensor from samples (all the same V).
pub fn batch_tensor(samples: &[&FmriSample]) -> Tensor<f32> {
    batch_tensor_impl(samples.iter().copied())
}

fn batch_tensor_impl<'a>(samples: impl ExactSizeIterator<Item = &'a FmriSample>) -> Tensor<f32> {
    let b = samples.len();
    let mut data = Vec::new();
    let mut v = 0;
    for s in samples {
        v = s.vertex_count();
        data.extend_from_slice(s.channel(0));
        data.extend_from_slice(s.channel(1));
    }
    Tensor::from_vec(&[b, CHANNELS, v], data)
}

fn sample_batch(rng: &mut ChaCha8Rng, pool: &[FmriSample], batch: usize) -> Tensor<f32> {
    let picks: Vec<&FmriSample> = (0..batch)
        .map(|_| &pool[rng.gen_range(0..pool.len())])
        .collect();
    batch_tensor(&picks)
}
