//! Objective terms: mean-squared transport cost, the critic-form
//! Wasserstein-1 estimate, the interpolated gradient penalty that enforces
//! the critic's Lipschitz bound, and the combined generator loss.
//!
//! Each term has a graph builder (used by training, differentiable) and a
//! plain evaluator over batch tensors.

use super::arch::Critic;
use super::params::Binding;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Keeps the penalty's square root differentiable at zero gradient norm.
const NORM_EPSILON: f64 = 1e-12;

/// Mean over batch and elements of the squared difference.
pub fn transport_cost_node<S: Scalar>(g: &mut Graph<S>, y: Var, gy: Var) -> Var {
    let d = g.sub(y, gy);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Mean critic score over a `[B, 1]` batch of scores.
pub fn mean_scores_node<S: Scalar>(g: &mut Graph<S>, scores: Var) -> Var {
    g.mean_all(scores)
}

/// `mean D(x) - mean D(G(y))` given the two score batches.
pub fn w1_node<S: Scalar>(g: &mut Graph<S>, d_x: Var, d_gy: Var) -> Var {
    let mx = g.mean_all(d_x);
    let mgy = g.mean_all(d_gy);
    g.sub(mx, mgy)
}

/// `gamma * E[(||grad_xhat D(xhat)|| - 1)^2]` with `xhat = u*x + (1-u)*gy`,
/// `u` uniform per sample. The input gradient is built on the tape, so this
/// node is differentiable w.r.t. the critic parameters.
pub fn gradient_penalty_node<S: Scalar>(
    g: &mut Graph<S>,
    critic: &Critic<S>,
    binding: &Binding,
    x: Var,
    gy: Var,
    u: Var,
    gamma: S,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, c, l) = (shape[0], shape[1], shape[2]);
    assert_eq!(g.shape(u), &[b], "u must hold one coefficient per sample");

    let u3 = g.reshape(u, &[b, 1, 1]);
    let ub = g.broadcast_axes(u3, &[1, 2], &[c, l]);
    let neg_u = g.neg(ub);
    let one_minus_u = g.offset(neg_u, S::one());
    let xu = g.mul(x, ub);
    let gyu = g.mul(gy, one_minus_u);
    let xhat = g.add(xu, gyu);
    g.set_requires_grad(xhat);

    let scores = critic.forward(g, binding, xhat)?;
    let total = {
        let s = g.sum_axes(scores, &[0, 1]);
        g.reshape(s, &[])
    };
    let grad_x = g.grad(total, &[xhat])[0];

    let sq = g.mul(grad_x, grad_x);
    let ss = g.sum_axes(sq, &[1, 2]);
    let ss = g.reshape(ss, &[b]);
    let ss = g.offset(ss, S::from_f64_val(NORM_EPSILON));
    let norm = g.sqrt(ss);
    let diff = g.offset(norm, -S::one());
    let pen = g.mul(diff, diff);
    let mean = g.mean_all(pen);
    Ok(g.scale(mean, gamma))
}

/// Generator objective: `transport_cost + lambda * (-mean D(G(y)))`.
/// Terms constant in the generator are dropped.
pub fn generator_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    y: Var,
    gy: Var,
    d_gy: Var,
    lambda: S,
) -> Var {
    let tc = transport_cost_node(g, y, gy);
    let adv = g.mean_all(d_gy);
    let adv = g.scale(adv, -lambda);
    g.add(tc, adv)
}

// ---- plain evaluators ----

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference over all values of two equal-shape batches.
pub fn transport_cost<S: Scalar>(y: &Tensor<S>, gy: &Tensor<S>) -> Result<f64> {
    check_same_shape(y, gy)?;
    let n = y.len() as f64;
    let sum: f64 = y
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_val() - b.to_f64_val();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Critic-form Wasserstein-1 estimate on plain batches.
pub fn w1_estimate<S: Scalar>(
    critic: &Critic<S>,
    x: &Tensor<S>,
    gy: &Tensor<S>,
) -> Result<f64> {
    if x.is_empty() || gy.is_empty() {
        return Err(Error::invalid("w1 batches", "must be nonempty"));
    }
    let mut g = Graph::new();
    let binding = critic.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let gyv = g.constant(gy.clone());
    let dx = critic.forward(&mut g, &binding, xv)?;
    let dgy = critic.forward(&mut g, &binding, gyv)?;
    let w1 = w1_node(&mut g, dx, dgy);
    Ok(g.item(w1).to_f64_val())
}

/// Gradient penalty on plain batches with explicit per-sample `u`.
pub fn gradient_penalty<S: Scalar>(
    critic: &Critic<S>,
    x: &Tensor<S>,
    gy: &Tensor<S>,
    u: &[S],
    gamma: f64,
) -> Result<f64> {
    check_same_shape(x, gy)?;
    if gamma < 0.0 {
        return Err(Error::invalid("gamma", "must be >= 0"));
    }
    let mut g = Graph::new();
    let binding = critic.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let gyv = g.constant(gy.clone());
    let uv = g.constant(Tensor::from_vec(&[u.len()], u.to_vec()));
    let pen = gradient_penalty_node(
        &mut g,
        critic,
        &binding,
        xv,
        gyv,
        uv,
        S::from_f64_val(gamma),
    )?;
    Ok(g.item(pen).to_f64_val())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::arch::{Critic, CriticConfig, Generator, GeneratorConfig, CHANNELS};
    use crate::gan::params::ParamSet;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(b: usize, v: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * CHANNELS * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[b, CHANNELS, v], data)
    }

    /// A critic that is exactly `w . flatten(x) + b`.
    fn linear_critic(v: usize, seed: u64) -> Critic<f64> {
        let cfg = CriticConfig {
            stages: 0,
            base_width: 1,
            head_hidden: 0,
            leaky_slope: 0.2,
        };
        Critic::new(&cfg, v, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn transport_cost_zero_on_identical() {
        let x = random_batch(2, 16, 1);
        assert_eq!(transport_cost(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn transport_cost_of_unit_offset_is_one() {
        let x = random_batch(2, 16, 2);
        let y = x.map(|v| v + 1.0);
        assert_relative_eq!(transport_cost(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn transport_cost_matches_direct_summation() {
        let x = random_batch(3, 16, 3);
        let y = random_batch(3, 16, 4);
        let mut acc = 0.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            acc += (a - b) * (a - b);
        }
        let expected = acc / x.len() as f64;
        assert_relative_eq!(transport_cost(&x, &y).unwrap(), expected, epsilon = 1e-12);
        // graph builder agrees
        let mut g: Graph<f64> = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let node = transport_cost_node(&mut g, xv, yv);
        assert_relative_eq!(g.item(node), expected, epsilon = 1e-12);
    }

    #[test]
    fn w1_zero_for_identical_batches_and_zero_critic() {
        let v = 16;
        let x = random_batch(4, v, 5);
        let critic = linear_critic(v, 6);
        assert_eq!(w1_estimate(&critic, &x, &x).unwrap(), 0.0);

        let mut zero = linear_critic(v, 7);
        for i in 0..zero.params().len() {
            let z = Tensor::zeros(zero.params().tensor(i).shape());
            *zero.params_mut().tensor_mut(i) = z;
        }
        let y = random_batch(4, v, 8);
        assert_eq!(w1_estimate(&zero, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn w1_matches_closed_form_for_linear_critic() {
        let v = 8;
        let critic = linear_critic(v, 9);
        let x = random_batch(3, v, 10);
        let y = random_batch(3, v, 11);
        let w = critic
            .params()
            .tensor(critic.params().index_of("head2.w").unwrap())
            .data()
            .to_vec();
        // w . (mean_x - mean_y) over flattened samples
        let n = CHANNELS * v;
        let mut mean_diff = vec![0.0; n];
        for s in 0..3 {
            for i in 0..n {
                mean_diff[i] += (x.data()[s * n + i] - y.data()[s * n + i]) / 3.0;
            }
        }
        let expected: f64 = w.iter().zip(&mean_diff).map(|(a, b)| a * b).sum();
        assert_relative_eq!(w1_estimate(&critic, &x, &y).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn w1_antisymmetric_under_batch_swap() {
        let v = 16;
        let critic = Critic::new(
            &CriticConfig {
                stages: 2,
                base_width: 4,
                head_hidden: 8,
                leaky_slope: 0.2,
            },
            v,
            &mut ChaCha8Rng::seed_from_u64(12),
        );
        let x = random_batch(3, v, 13);
        let y = random_batch(3, v, 14);
        let ab = w1_estimate(&critic, &x, &y).unwrap();
        let ba = w1_estimate(&critic, &y, &x).unwrap();
        assert_eq!(ab, -ba);
    }

    #[test]
    fn penalty_zero_for_unit_gradient_critic() {
        // single linear layer with unit-norm weight vector: grad = w everywhere
        let v = 8;
        let mut critic = linear_critic(v, 15);
        let wi = critic.params().index_of("head2.w").unwrap();
        let w = critic.params().tensor(wi).clone();
        let norm: f64 = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        *critic.params_mut().tensor_mut(wi) = w.map(|x| x / norm);
        let x = random_batch(4, v, 16);
        let y = random_batch(4, v, 17);
        let u: Vec<f64> = (0..4).map(|i| i as f64 / 4.0).collect();
        let pen = gradient_penalty(&critic, &x, &y, &u, 10.0).unwrap();
        assert!(pen.abs() < 1e-6, "penalty {pen}");
    }

    #[test]
    fn penalty_is_gamma_for_zero_critic() {
        let v = 8;
        let mut critic = linear_critic(v, 18);
        for i in 0..critic.params().len() {
            let z = Tensor::zeros(critic.params().tensor(i).shape());
            *critic.params_mut().tensor_mut(i) = z;
        }
        let x = random_batch(2, v, 19);
        let y = random_batch(2, v, 20);
        let pen = gradient_penalty(&critic, &x, &y, &[0.3, 0.8], 10.0).unwrap();
        assert!((pen - 10.0).abs() < 1e-4, "penalty {pen}");
        let zero = gradient_penalty(&critic, &x, &y, &[0.3, 0.8], 0.0).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn generator_loss_reduces_to_transport_cost_at_lambda_zero() {
        let v = 16;
        let gen: Generator<f64> = Generator::new(
            &GeneratorConfig {
                depth: 2,
                base_width: 4,
                ..GeneratorConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(21),
        );
        let critic = linear_critic(v, 22);
        let y = random_batch(2, v, 23);

        let mut g = Graph::new();
        let gb = gen.bind(&mut g, false);
        let cb = critic.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let gy = gen.forward(&mut g, &gb, yv).unwrap();
        let d_gy = critic.forward(&mut g, &cb, gy).unwrap();
        let loss0 = generator_loss_node(&mut g, yv, gy, d_gy, 0.0);
        let tc = transport_cost_node(&mut g, yv, gy);
        assert_relative_eq!(g.item(loss0), g.item(tc), epsilon = 1e-12);

        // identity generator + zero critic: loss = transport_cost(y, y) = 0
        let mut zero_critic = linear_critic(v, 24);
        for i in 0..zero_critic.params().len() {
            let z = Tensor::zeros(zero_critic.params().tensor(i).shape());
            *zero_critic.params_mut().tensor_mut(i) = z;
        }
        let mut g = Graph::new();
        let gb = gen.bind(&mut g, false);
        let cb = zero_critic.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let gy = gen.forward(&mut g, &gb, yv).unwrap();
        let d_gy = zero_critic.forward(&mut g, &cb, gy).unwrap();
        let loss = generator_loss_node(&mut g, yv, gy, d_gy, 1.0);
        assert!(g.item(loss).abs() < 1e-10, "loss {}", g.item(loss));
    }

    proptest::proptest! {
        /// transport cost is nonnegative and zero iff the batches agree.
        #[test]
        fn prop_transport_cost_nonnegative(seed in proptest::prelude::any::<u64>()) {
            let x = random_batch(2, 8, seed);
            let y = random_batch(2, 8, seed.wrapping_add(1));
            let c = transport_cost(&x, &y).unwrap();
            proptest::prop_assert!(c >= 0.0);
            if c == 0.0 {
                proptest::prop_assert_eq!(x.data(), y.data());
            }
            proptest::prop_assert_eq!(transport_cost(&x, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_param_set_helper_consistency() {
        // guard: ParamSet::bind preserves order so index_of lookups stay valid
        let mut p: ParamSet<f64> = ParamSet::new();
        p.push("a", Tensor::scalar(1.0));
        p.push("b", Tensor::scalar(2.0));
        assert_eq!(p.index_of("b"), Some(1));
    }
}
