//! Adam with the usual bias correction; moments live alongside the
//! parameter set and are part of the checkpoint payload.

use super::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.9;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    /// One update over every parameter tensor, `grads` in parameter order.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let b1 = S::from_f64_val(ADAM_BETA1);
        let b2 = S::from_f64_val(ADAM_BETA2);
        let one = S::one();
        let eps = S::from_f64_val(ADAM_EPSILON);
        let corr1 = S::from_f64_val(1.0 - ADAM_BETA1.powi(self.t as i32));
        let corr2 = S::from_f64_val(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr = S::from_f64_val(lr);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / corr1;
                let vh = v[j] / corr2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
