//! Network architectures: a 1D U-Net generator whose skip connections pass
//! through residual channel-attention blocks, and a strided-conv critic with
//! a dense head and no output nonlinearity.
//!
//! The generator has a global residual connection and a zero-initialized
//! output convolution, so an untrained generator is exactly the identity
//! map. Inputs of any length are zero-padded internally to a multiple of
//! `2^depth` and cropped back on output.

use super::params::{he_init, Binding, ParamSet};
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of down/up levels.
    pub depth: usize,
    /// Channel width at the top level; doubles per level.
    pub base_width: usize,
    /// Channel-attention bottleneck reduction ratio.
    pub attention_reduction: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 4,
            base_width: 16,
            attention_reduction: 4,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    /// Number of stride-2 stages; widths double per stage.
    pub stages: usize,
    pub base_width: usize,
    /// Hidden width of the dense head; 0 collapses the head to one linear
    /// layer (useful as a closed-form critic).
    pub head_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            stages: 4,
            base_width: 16,
            head_hidden: 64,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

/// Residual channel attention block:
/// `out = input + scale (.) body(input)` with `body = conv -> relu -> conv`
/// and `scale = sigmoid(dense2(relu(dense1(gap(body_out)))))`.
#[derive(Clone, Debug)]
pub struct Rcab {
    channels: usize,
    conv1: ConvIdx,
    conv2: ConvIdx,
    att1: ConvIdx,
    att2: ConvIdx,
}

impl Rcab {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        let conv = |params: &mut ParamSet<S>, name: String, rng: &mut ChaCha8Rng| ConvIdx {
            w: params.push(format!("{name}.w"), he_init(&[channels, channels, 3], channels * 3, rng)),
            b: params.push(format!("{name}.b"), Tensor::zeros(&[channels])),
        };
        let conv1 = conv(params, format!("{prefix}.conv1"), rng);
        let conv2 = conv(params, format!("{prefix}.conv2"), rng);
        let att1 = ConvIdx {
            w: params.push(
                format!("{prefix}.att1.w"),
                he_init(&[hidden, channels], channels, rng),
            ),
            b: params.push(format!("{prefix}.att1.b"), Tensor::zeros(&[hidden])),
        };
        let att2 = ConvIdx {
            w: params.push(
                format!("{prefix}.att2.w"),
                he_init(&[channels, hidden], hidden, rng),
            ),
            b: params.push(format!("{prefix}.att2.b"), Tensor::zeros(&[channels])),
        };
        Rcab {
            channels,
            conv1,
            conv2,
            att1,
            att2,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, binding: &Binding, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "rcab expects [B, {}, L], got {:?}",
                self.channels, shape
            )));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        let geom = ConvGeom::new(l, 3, 1, 1);

        let h = g.conv1d(x, binding.var(self.conv1.w), geom);
        let h = g.add_bias_1d(h, binding.var(self.conv1.b));
        let h = g.relu(h);
        let body = g.conv1d(h, binding.var(self.conv2.w), geom);
        let body = g.add_bias_1d(body, binding.var(self.conv2.b));

        // squeeze: global average pool over length
        let pooled = g.sum_axes(body, &[2]);
        let pooled = g.reshape(pooled, &[b, c]);
        let pooled = g.scale(pooled, S::from_f64_val(1.0 / l as f64));
        let a = g.dense(pooled, binding.var(self.att1.w), binding.var(self.att1.b));
        let a = g.relu(a);
        let a = g.dense(a, binding.var(self.att2.w), binding.var(self.att2.b));
        let scale = g.sigmoid(a);

        let scale3 = g.reshape(scale, &[b, c, 1]);
        let scale3 = g.broadcast_axes(scale3, &[2], &[l]);
        let gated = g.mul(body, scale3);
        Ok(g.add(x, gated))
    }
}

#[derive(Clone, Debug)]
struct GenLevel {
    skip: Rcab,
    down: ConvIdx,
    up: ConvIdx,
    fuse: ConvIdx,
}

/// U-Net generator. Channel count is fixed at 2 in and 2 out; works for any
/// input length.
#[derive(Clone, Debug)]
pub struct Generator<S: Scalar> {
    cfg: GeneratorConfig,
    params: ParamSet<S>,
    stem: ConvIdx,
    levels: Vec<GenLevel>,
    bottleneck: Rcab,
    out: ConvIdx,
}

impl<S: Scalar> Generator<S> {
    pub fn new(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.depth >= 1 && cfg.base_width >= 1);
        let mut params = ParamSet::new();
        let w0 = cfg.base_width;
        let stem = ConvIdx {
            w: params.push("stem.w", he_init(&[w0, CHANNELS, 3], CHANNELS * 3, rng)),
            b: params.push("stem.b", Tensor::zeros(&[w0])),
        };
        let mut levels = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let c = w0 << i;
            let c_next = c * 2;
            let skip = Rcab::new(&mut params, &format!("level{i}.rcab"), c, cfg.attention_reduction, rng);
            let down = ConvIdx {
                w: params.push(
                    format!("level{i}.down.w"),
                    he_init(&[c_next, c, 4], c * 4, rng),
                ),
                b: params.push(format!("level{i}.down.b"), Tensor::zeros(&[c_next])),
            };
            // transposed conv weight: [C_in, C_out, K]
            let up = ConvIdx {
                w: params.push(
                    format!("level{i}.up.w"),
                    he_init(&[c_next, c, 4], c_next * 4, rng),
                ),
                b: params.push(format!("level{i}.up.b"), Tensor::zeros(&[c])),
            };
            let fuse = ConvIdx {
                w: params.push(
                    format!("level{i}.fuse.w"),
                    he_init(&[c, 2 * c, 3], 2 * c * 3, rng),
                ),
                b: params.push(format!("level{i}.fuse.b"), Tensor::zeros(&[c])),
            };
            levels.push(GenLevel { skip, down, up, fuse });
        }
        let c_bot = w0 << cfg.depth;
        let bottleneck = Rcab::new(&mut params, "bottleneck.rcab", c_bot, cfg.attention_reduction, rng);
        // zero-initialized output conv + global residual = identity map
        let out = ConvIdx {
            w: params.push("out.w", Tensor::zeros(&[CHANNELS, w0, 3])),
            b: params.push("out.b", Tensor::zeros(&[CHANNELS])),
        };
        Generator {
            cfg: cfg.clone(),
            params,
            stem,
            levels,
            bottleneck,
            out,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// Internal padded length for input length `l`.
    pub fn padded_len(&self, l: usize) -> usize {
        let m = 1 << self.cfg.depth;
        l.div_ceil(m) * m
    }

    pub fn forward(&self, g: &mut Graph<S>, binding: &Binding, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[1] != CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "generator expects [B, {CHANNELS}, V], got {shape:?}"
            )));
        }
        let v = shape[2];
        let vp = self.padded_len(v);
        let slope = S::from_f64_val(self.cfg.leaky_slope);

        let x = if vp > v {
            g.pad_zero(input, 2, 0, vp - v)
        } else {
            input
        };

        let mut act = {
            let geom = ConvGeom::new(vp, 3, 1, 1);
            let h = g.conv1d(x, binding.var(self.stem.w), geom);
            let h = g.add_bias_1d(h, binding.var(self.stem.b));
            g.leaky_relu(h, slope)
        };
        check_finite(g, act, "stem")?;

        let mut skips = Vec::with_capacity(self.levels.len());
        let mut l = vp;
        for (i, level) in self.levels.iter().enumerate() {
            let skip = level.skip.forward(g, binding, act)?;
            check_finite(g, skip, &format!("level{i}.rcab"))?;
            skips.push(skip);
            let geom = ConvGeom::new(l, 4, 2, 1);
            let h = g.conv1d(act, binding.var(level.down.w), geom);
            let h = g.add_bias_1d(h, binding.var(level.down.b));
            act = g.leaky_relu(h, slope);
            check_finite(g, act, &format!("level{i}.down"))?;
            l /= 2;
        }

        act = self.bottleneck.forward(g, binding, act)?;
        check_finite(g, act, "bottleneck.rcab")?;

        for (i, level) in self.levels.iter().enumerate().rev() {
            let geom = ConvGeom::new(l * 2, 4, 2, 1);
            let h = g.conv1d_transpose(act, binding.var(level.up.w), geom);
            let h = g.add_bias_1d(h, binding.var(level.up.b));
            let up = g.leaky_relu(h, slope);
            check_finite(g, up, &format!("level{i}.up"))?;
            l *= 2;
            let cat = g.concat(&[up, skips[i]], 1);
            let geom = ConvGeom::new(l, 3, 1, 1);
            let h = g.conv1d(cat, binding.var(level.fuse.w), geom);
            let h = g.add_bias_1d(h, binding.var(level.fuse.b));
            act = g.leaky_relu(h, slope);
            check_finite(g, act, &format!("level{i}.fuse"))?;
        }

        let geom = ConvGeom::new(vp, 3, 1, 1);
        let delta = g.conv1d(act, binding.var(self.out.w), geom);
        let delta = g.add_bias_1d(delta, binding.var(self.out.b));
        let y = g.add(x, delta);
        check_finite(g, y, "out")?;
        Ok(if vp > v { g.slice(y, 2, 0, v) } else { y })
    }

    /// Run the generator on a plain batch tensor, outside any caller graph.
    pub fn apply_batch(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let binding = self.bind(&mut g, false);
        let out = self.forward(&mut g, &binding, input)?;
        Ok(g.value(out).clone())
    }
}

/// Stride-2 conv stack with doubling widths, flattened into a dense head
/// producing one unbounded scalar per input sample.
#[derive(Clone, Debug)]
pub struct Critic<S: Scalar> {
    cfg: CriticConfig,
    vertex_count: usize,
    params: ParamSet<S>,
    stages: Vec<ConvIdx>,
    head_hidden: Option<ConvIdx>,
    head_out: ConvIdx,
}

impl<S: Scalar> Critic<S> {
    pub fn new(cfg: &CriticConfig, vertex_count: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(vertex_count >= 1);
        let mut params = ParamSet::new();
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut c_in = CHANNELS;
        for i in 0..cfg.stages {
            let c_out = cfg.base_width << i;
            stages.push(ConvIdx {
                w: params.push(
                    format!("stage{i}.w"),
                    he_init(&[c_out, c_in, 4], c_in * 4, rng),
                ),
                b: params.push(format!("stage{i}.b"), Tensor::zeros(&[c_out])),
            });
            c_in = c_out;
        }
        let padded = padded_len(vertex_count, cfg.stages);
        let flat = c_in * (padded >> cfg.stages);
        let head_hidden = if cfg.head_hidden > 0 {
            Some(ConvIdx {
                w: params.push("head1.w", he_init(&[cfg.head_hidden, flat], flat, rng)),
                b: params.push("head1.b", Tensor::zeros(&[cfg.head_hidden])),
            })
        } else {
            None
        };
        let head_in = if cfg.head_hidden > 0 { cfg.head_hidden } else { flat };
        let head_out = ConvIdx {
            w: params.push("head2.w", he_init(&[1, head_in], head_in, rng)),
            b: params.push("head2.b", Tensor::zeros(&[1])),
        };
        Critic {
            cfg: cfg.clone(),
            vertex_count,
            params,
            stages,
            head_hidden,
            head_out,
        }
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// Scores: `[B, 2, V] -> [B, 1]`, no output nonlinearity.
    pub fn forward(&self, g: &mut Graph<S>, binding: &Binding, input: Var) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[1] != CHANNELS || shape[2] != self.vertex_count {
            return Err(Error::ShapeMismatch(format!(
                "critic expects [B, {CHANNELS}, {}], got {shape:?}",
                self.vertex_count
            )));
        }
        let b = shape[0];
        let slope = S::from_f64_val(self.cfg.leaky_slope);
        let vp = padded_len(self.vertex_count, self.cfg.stages);
        let mut act = if vp > self.vertex_count {
            g.pad_zero(input, 2, 0, vp - self.vertex_count)
        } else {
            input
        };
        let mut l = vp;
        for stage in &self.stages {
            let geom = ConvGeom::new(l, 4, 2, 1);
            let h = g.conv1d(act, binding.var(stage.w), geom);
            let h = g.add_bias_1d(h, binding.var(stage.b));
            act = g.leaky_relu(h, slope);
            l /= 2;
        }
        let c_last = g.shape(act)[1];
        let mut flat = g.reshape(act, &[b, c_last * l]);
        if let Some(h1) = &self.head_hidden {
            let h = g.dense(flat, binding.var(h1.w), binding.var(h1.b));
            flat = g.leaky_relu(h, slope);
        }
        Ok(g.dense(flat, binding.var(self.head_out.w), binding.var(self.head_out.b)))
    }

    pub fn apply_batch(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let input = g.constant(batch.clone());
        let binding = self.bind(&mut g, false);
        let out = self.forward(&mut g, &binding, input)?;
        Ok(g.value(out).clone())
    }
}

pub(crate) fn padded_len(l: usize, levels: usize) -> usize {
    let m = 1usize << levels;
    l.div_ceil(m) * m
}

fn check_finite<S: Scalar>(g: &Graph<S>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation {
            layer: layer.to_string(),
        })
    }
}
