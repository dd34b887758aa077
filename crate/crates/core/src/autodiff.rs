//! Define-by-run reverse-mode differentiation on a growable tape.
//!
//! Backward rules are emitted as ordinary tape ops, so the output of
//! [`Graph::grad`] is itself differentiable. That is what makes the critic's
//! gradient penalty trainable: the penalty is built from input gradients of
//! the critic, and its parameter gradients require differentiating through
//! that first backward pass.
//!
//! Shape errors are programmer errors and panic; callers that accept
//! external data validate shapes before building graph ops.

use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// 1D convolution geometry shared by the conv op family.
///
/// `l_out = (l_in + 2*pad - kernel) / stride + 1`, which the builders require
/// to be exact so that down/up pairs invert cleanly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub l_in: usize,
    pub l_out: usize,
}

impl ConvGeom {
    pub fn new(l_in: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        let span = l_in + 2 * pad;
        assert!(
            span >= kernel && (span - kernel) % stride == 0,
            "conv geometry not exact: l_in={l_in} kernel={kernel} stride={stride} pad={pad}"
        );
        ConvGeom {
            kernel,
            stride,
            pad,
            l_in,
            l_out: (span - kernel) / stride + 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ActKind {
    Relu,
    LeakyRelu,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(S),
    Offset(S),
    Recip,
    Sqrt,
    Sigmoid,
    Act { kind: ActKind, slope: S },
    /// d(activation)/d(src) evaluated at `src`, times the cotangent.
    /// Parents: `[src, ct]`. The mask is piecewise constant in `src`, so the
    /// only differentiable parent is `ct`.
    ActGradMul { kind: ActKind, slope: S },
    Conv(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvKernelGrad(ConvGeom),
    MatMul,
    Transpose,
    Reshape { orig: Vec<usize> },
    /// Sum over `axes`, keeping them as size 1.
    SumAxes { axes: Vec<usize>, orig: Vec<usize> },
    /// Expand size-1 `axes` to the parent-relative `sizes`.
    BroadcastAxes { axes: Vec<usize> },
    Concat { axis: usize, parts: Vec<usize> },
    Slice { axis: usize, start: usize, orig_len: usize },
    PadZero { axis: usize, before: usize, after: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<Var>,
    op: Op<S>,
    needs_grad: bool,
}

/// Growable computation tape. Values are computed eagerly as ops are built.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<S>, parents: Vec<Var>, op: Op<S>) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let v = self.push(value, vec![], Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Insert a non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Copy a node's value into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Force gradient tracking through `v` (e.g. an interpolated input built
    /// from constants whose input gradient is itself needed).
    pub fn set_requires_grad(&mut self, v: Var) {
        self.nodes[v.0].needs_grad = true;
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, vec![a, b], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, vec![a, b], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, vec![a, b], Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(value, vec![a], Op::Neg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(value, vec![a], Op::Scale(c))
    }

    pub fn offset(&mut self, a: Var, c: S) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(value, vec![a], Op::Offset(c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| S::one() / x);
        self.push(value, vec![a], Op::Recip)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        self.push(value, vec![a], Op::Sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let value = self.nodes[a.0].value.map(|x| one / (one + (-x).exp()));
        self.push(value, vec![a], Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = S::zero();
        let value = self.nodes[a.0].value.map(|x| if x > z { x } else { z });
        self.push(
            value,
            vec![a],
            Op::Act {
                kind: ActKind::Relu,
                slope: z,
            },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let z = S::zero();
        let value = self.nodes[a.0].value.map(|x| if x > z { x } else { x * slope });
        self.push(
            value,
            vec![a],
            Op::Act {
                kind: ActKind::LeakyRelu,
                slope,
            },
        )
    }

    fn act_grad_mul(&mut self, kind: ActKind, slope: S, src: Var, ct: Var) -> Var {
        let z = S::zero();
        let one = S::one();
        let neg = match kind {
            ActKind::Relu => z,
            ActKind::LeakyRelu => slope,
        };
        let value = {
            let s = &self.nodes[src.0].value;
            let c = &self.nodes[ct.0].value;
            assert_eq!(s.shape(), c.shape());
            let data = s
                .data()
                .iter()
                .zip(c.data())
                .map(|(&sv, &cv)| if sv > z { cv * one } else { cv * neg })
                .collect();
            Tensor::from_vec(s.shape(), data)
        };
        self.push(value, vec![src, ct], Op::ActGradMul { kind, slope })
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    // ---- convolution family ----

    /// 1D convolution: `x [B,Ci,L]`, `w [Co,Ci,K]` -> `[B,Co,M]`.
    pub fn conv1d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 3, "conv1d input must be [B,Ci,L]");
        assert_eq!(ws.len(), 3, "conv1d weight must be [Co,Ci,K]");
        assert_eq!(xs[1], ws[1], "conv1d channel mismatch");
        assert_eq!(xs[2], geom.l_in);
        assert_eq!(ws[2], geom.kernel);
        let value = conv_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, geom);
        self.push(value, vec![x, w], Op::Conv(geom))
    }

    /// Adjoint of [`Graph::conv1d`] w.r.t. its input, used directly as the
    /// forward op of transposed (upsampling) convolution:
    /// `y [B,Co,M]`, `w [Co,Ci,K]` -> `[B,Ci,L]`.
    pub fn conv1d_transpose(&mut self, y: Var, w: Var, geom: ConvGeom) -> Var {
        let (ys, ws) = (self.shape(y).to_vec(), self.shape(w).to_vec());
        assert_eq!(ys.len(), 3);
        assert_eq!(ws.len(), 3);
        assert_eq!(ys[1], ws[0], "conv1d_transpose channel mismatch");
        assert_eq!(ys[2], geom.l_out);
        assert_eq!(ws[2], geom.kernel);
        let value = conv_input_grad(&self.nodes[y.0].value, &self.nodes[w.0].value, geom);
        self.push(value, vec![y, w], Op::ConvInputGrad(geom))
    }

    fn conv1d_kernel_grad(&mut self, x: Var, gy: Var, geom: ConvGeom) -> Var {
        let value = conv_kernel_grad(&self.nodes[x.0].value, &self.nodes[gy.0].value, geom);
        self.push(value, vec![x, gy], Op::ConvKernelGrad(geom))
    }

    // ---- linear algebra ----

    /// `a [m,k] * b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(value, vec![a, b], Op::MatMul)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose2(&self.nodes[a.0].value);
        self.push(value, vec![a], Op::Transpose)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.shape(a).to_vec();
        let value = self.nodes[a.0].value.clone().reshaped(shape);
        self.push(value, vec![a], Op::Reshape { orig })
    }

    // ---- reductions / broadcasting ----

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let orig = self.shape(a).to_vec();
        let value = sum_axes(&self.nodes[a.0].value, axes);
        self.push(
            value,
            vec![a],
            Op::SumAxes {
                axes: axes.to_vec(),
                orig,
            },
        )
    }

    /// Expand size-1 `axes` of `a` to the given sizes (other dims unchanged).
    pub fn broadcast_axes(&mut self, a: Var, axes: &[usize], sizes: &[usize]) -> Var {
        let mut target = self.shape(a).to_vec();
        for (&ax, &sz) in axes.iter().zip(sizes) {
            assert_eq!(target[ax], 1, "broadcast source axis {ax} must be size 1");
            target[ax] = sz;
        }
        let value = broadcast_to(&self.nodes[a.0].value, &target);
        self.push(
            value,
            vec![a],
            Op::BroadcastAxes {
                axes: axes.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = concat(&tensors, axis);
        let sizes = tensors.iter().map(|t| t.shape()[axis]).collect();
        self.push(
            value,
            parts.to_vec(),
            Op::Concat {
                axis,
                parts: sizes,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let orig_len = self.shape(a)[axis];
        assert!(start + len <= orig_len);
        let value = slice(&self.nodes[a.0].value, axis, start, len);
        self.push(
            value,
            vec![a],
            Op::Slice {
                axis,
                start,
                orig_len,
            },
        )
    }

    pub fn pad_zero(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let value = pad_zero(&self.nodes[a.0].value, axis, before, after);
        self.push(value, vec![a], Op::PadZero { axis, before, after })
    }

    // ---- composites ----

    /// Mean over all elements, returned as a rank-0 scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let rank = self.shape(a).len();
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.sum_axes(a, &axes);
        let s = self.reshape(s, &[]);
        self.scale(s, S::from_f64_val(1.0 / n as f64))
    }

    /// Add a per-channel bias `b [C]` over `x [B,C,L]`.
    pub fn add_bias_1d(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.shape(b), &[xs[1]]);
        let b3 = self.reshape(b, &[1, xs[1], 1]);
        let bb = self.broadcast_axes(b3, &[0, 2], &[xs[0], xs[2]]);
        self.add(x, bb)
    }

    /// Dense layer `x [B,F] * w [O,F]^T + b [O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let wt = self.transpose(w);
        let y = self.matmul(x, wt);
        let o = self.shape(b)[0];
        let b2 = self.reshape(b, &[1, o]);
        let bb = self.broadcast_axes(b2, &[0], &[xs[0]]);
        self.add(y, bb)
    }

    // ---- differentiation ----

    /// Reverse-mode gradients of `loss` w.r.t. each of `wrt`.
    ///
    /// The backward pass is emitted as tape ops, so returned vars can be fed
    /// into further ops and differentiated again. Disconnected `wrt` entries
    /// yield zero tensors.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Vec<Var> {
        let top = loss.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; top + 1];
        let seed = Tensor::filled(self.shape(loss), S::one());
        adjoint[top] = Some(self.constant(seed));

        for i in (0..=top).rev() {
            let Some(ct) = adjoint[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            for (parent, contrib) in self.backward_node(i, ct) {
                debug_assert!(parent.0 < i);
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|v| match adjoint.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(*v));
                    self.constant(zeros)
                }
            })
            .collect()
    }

    /// Emit cotangent contributions of node `i` to each parent that tracks
    /// gradients.
    fn backward_node(&mut self, i: usize, ct: Var) -> Vec<(Var, Var)> {
        let parents = self.nodes[i].parents.clone();
        let op = self.nodes[i].op.clone();
        let this = Var(i);
        let mut out: Vec<(Var, Var)> = Vec::new();
        let mut emit = |g: &mut Self, p: Var, build: &mut dyn FnMut(&mut Self) -> Var| {
            if g.nodes[p.0].needs_grad {
                let c = build(g);
                out.push((p, c));
            }
        };

        match op {
            Op::Leaf => {}
            Op::Add => {
                emit(self, parents[0], &mut |_| ct);
                emit(self, parents[1], &mut |_| ct);
            }
            Op::Sub => {
                emit(self, parents[0], &mut |_| ct);
                emit(self, parents[1], &mut |g| g.neg(ct));
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                emit(self, a, &mut |g| g.mul(ct, b));
                emit(self, b, &mut |g| g.mul(ct, a));
            }
            Op::Neg => emit(self, parents[0], &mut |g| g.neg(ct)),
            Op::Scale(c) => emit(self, parents[0], &mut |g| g.scale(ct, c)),
            Op::Offset(_) => emit(self, parents[0], &mut |_| ct),
            Op::Recip => {
                // d(1/x) = -ct * y^2 with y the node's own output.
                emit(self, parents[0], &mut |g| {
                    let y2 = g.mul(this, this);
                    let m = g.mul(ct, y2);
                    g.neg(m)
                });
            }
            Op::Sqrt => {
                // d(sqrt x) = ct / (2 y).
                emit(self, parents[0], &mut |g| {
                    let r = g.recip(this);
                    let half = g.scale(r, S::from_f64_val(0.5));
                    g.mul(ct, half)
                });
            }
            Op::Sigmoid => {
                // d(sigmoid x) = ct * y * (1 - y).
                emit(self, parents[0], &mut |g| {
                    let ny = g.neg(this);
                    let one_minus = g.offset(ny, S::one());
                    let m = g.mul(ct, this);
                    g.mul(m, one_minus)
                });
            }
            Op::Act { kind, slope } => {
                let src = parents[0];
                emit(self, src, &mut |g| g.act_grad_mul(kind, slope, src, ct));
            }
            Op::ActGradMul { kind, slope } => {
                // Differentiable only through the cotangent operand; the mask
                // is piecewise constant in `src`.
                let src = parents[0];
                emit(self, parents[1], &mut |g| g.act_grad_mul(kind, slope, src, ct));
            }
            Op::Conv(geom) => {
                let (x, w) = (parents[0], parents[1]);
                emit(self, x, &mut |g| g.conv1d_transpose(ct, w, geom));
                emit(self, w, &mut |g| g.conv1d_kernel_grad(x, ct, geom));
            }
            Op::ConvInputGrad(geom) => {
                let (y, w) = (parents[0], parents[1]);
                emit(self, y, &mut |g| g.conv1d(ct, w, geom));
                emit(self, w, &mut |g| g.conv1d_kernel_grad(ct, y, geom));
            }
            Op::ConvKernelGrad(geom) => {
                let (x, gy) = (parents[0], parents[1]);
                emit(self, x, &mut |g| g.conv1d_transpose(gy, ct, geom));
                emit(self, gy, &mut |g| g.conv1d(x, ct, geom));
            }
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                emit(self, a, &mut |g| {
                    let bt = g.transpose(b);
                    g.matmul(ct, bt)
                });
                emit(self, b, &mut |g| {
                    let at = g.transpose(a);
                    g.matmul(at, ct)
                });
            }
            Op::Transpose => emit(self, parents[0], &mut |g| g.transpose(ct)),
            Op::Reshape { orig } => {
                emit(self, parents[0], &mut |g| g.reshape(ct, &orig));
            }
            Op::SumAxes { axes, orig } => {
                let sizes: Vec<usize> = axes.iter().map(|&a| orig[a]).collect();
                emit(self, parents[0], &mut |g| g.broadcast_axes(ct, &axes, &sizes));
            }
            Op::BroadcastAxes { axes } => {
                emit(self, parents[0], &mut |g| g.sum_axes(ct, &axes));
            }
            Op::Concat { axis, parts } => {
                let mut start = 0;
                for (p, len) in parents.iter().zip(parts.iter()) {
                    let (s, l) = (start, *len);
                    emit(self, *p, &mut |g| g.slice(ct, axis, s, l));
                    start += len;
                }
            }
            Op::Slice {
                axis,
                start,
                orig_len,
            } => {
                let len = self.shape(this)[axis];
                emit(self, parents[0], &mut |g| {
                    g.pad_zero(ct, axis, start, orig_len - start - len)
                });
            }
            Op::PadZero { axis, before, .. } => {
                let len = self.shape(parents[0])[axis];
                emit(self, parents[0], &mut |g| g.slice(ct, axis, before, len));
            }
        }
        out
    }
}

// ---- compute kernels ----

/// Work threshold below which rayon dispatch is not worth it. Results are
/// identical either way: every output element is reduced sequentially.
const PAR_THRESHOLD: usize = 1 << 14;

fn conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Tensor<S> {
    let (b, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let m = g.l_out;
    debug_assert_eq!(l, g.l_in);
    let mut out = Tensor::zeros(&[b, co, m]);
    let xd = x.data();
    let wd = w.data();
    let fill = |(bo, row): (usize, &mut [S])| {
        let (bi, oi) = (bo / co, bo % co);
        for (mi, dst) in row.iter_mut().enumerate() {
            let mut acc = S::zero();
            let base = mi * g.stride;
            for i in 0..ci {
                let xrow = &xd[(bi * ci + i) * l..(bi * ci + i) * l + l];
                let wrow = &wd[(oi * ci + i) * k..(oi * ci + i) * k + k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    let pos = base + ki;
                    if pos >= g.pad && pos - g.pad < l {
                        acc = acc + xrow[pos - g.pad] * wv;
                    }
                }
            }
            *dst = acc;
        }
    };
    let work = b * co * m * ci * k;
    if work >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(fill);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(fill);
    }
    out
}

fn conv_input_grad<S: Scalar>(gy: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Tensor<S> {
    let (b, co, m) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let (ci, k) = (w.shape()[1], w.shape()[2]);
    let l = g.l_in;
    debug_assert_eq!(m, g.l_out);
    debug_assert_eq!(co, w.shape()[0]);
    let mut out = Tensor::zeros(&[b, ci, l]);
    let gyd = gy.data();
    let wd = w.data();
    let fill = |(bo, row): (usize, &mut [S])| {
        let (bi, ii) = (bo / ci, bo % ci);
        for (li, dst) in row.iter_mut().enumerate() {
            let mut acc = S::zero();
            for o in 0..co {
                let gyrow = &gyd[(bi * co + o) * m..(bi * co + o) * m + m];
                let wrow = &wd[(o * ci + ii) * k..(o * ci + ii) * k + k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    // li = mi*stride + ki - pad  =>  mi = (li + pad - ki)/stride
                    let num = li + g.pad;
                    if num >= ki && (num - ki) % g.stride == 0 {
                        let mi = (num - ki) / g.stride;
                        if mi < m {
                            acc = acc + gyrow[mi] * wv;
                        }
                    }
                }
            }
            *dst = acc;
        }
    };
    let work = b * ci * l * co * k / g.stride.max(1);
    if work >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(l).enumerate().for_each(fill);
    } else {
        out.data_mut().chunks_mut(l).enumerate().for_each(fill);
    }
    out
}

fn conv_kernel_grad<S: Scalar>(x: &Tensor<S>, gy: &Tensor<S>, g: ConvGeom) -> Tensor<S> {
    let (b, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, m) = (gy.shape()[1], gy.shape()[2]);
    let k = g.kernel;
    debug_assert_eq!(b, gy.shape()[0]);
    let mut out = Tensor::zeros(&[co, ci, k]);
    let xd = x.data();
    let gyd = gy.data();
    let fill = |(oi, chunk): (usize, &mut [S])| {
        // chunk covers [ci, k] for one output channel
        for bi in 0..b {
            let gyrow = &gyd[(bi * co + oi) * m..(bi * co + oi) * m + m];
            for i in 0..ci {
                let xrow = &xd[(bi * ci + i) * l..(bi * ci + i) * l + l];
                for ki in 0..k {
                    let mut acc = S::zero();
                    for (mi, &gv) in gyrow.iter().enumerate() {
                        let pos = mi * g.stride + ki;
                        if pos >= g.pad && pos - g.pad < l {
                            acc = acc + gv * xrow[pos - g.pad];
                        }
                    }
                    chunk[i * k + ki] = chunk[i * k + ki] + acc;
                }
            }
        }
    };
    let work = b * co * ci * k * m;
    if work >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(ci * k)
            .enumerate()
            .for_each(fill);
    } else {
        out.data_mut().chunks_mut(ci * k).enumerate().for_each(fill);
    }
    out
}

fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.rank(), 2);
    assert_eq!(b.rank(), 2);
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let fill = |(mi, row): (usize, &mut [S])| {
        let arow = &ad[mi * ka..mi * ka + ka];
        for (ki, &av) in arow.iter().enumerate() {
            let brow = &bd[ki * n..ki * n + n];
            for (dst, &bv) in row.iter_mut().zip(brow) {
                *dst = *dst + av * bv;
            }
        }
    };
    if m * ka * n >= PAR_THRESHOLD {
        out.data_mut().par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.data_mut().chunks_mut(n).enumerate().for_each(fill);
    }
    out
}

fn transpose2<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.rank(), 2);
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = ad[i * n + j];
        }
    }
    out
}

fn sum_axes<S: Scalar>(a: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let shape = a.shape();
    let mut out_shape = shape.to_vec();
    for &ax in axes {
        assert!(ax < shape.len());
        out_shape[ax] = 1;
    }
    let mut out = Tensor::zeros(&out_shape);
    let strides_in = row_major_strides(shape);
    let strides_out = row_major_strides(&out_shape);
    let od = out.data_mut();
    let mut idx = vec![0usize; shape.len()];
    for &v in a.data() {
        let mut o = 0;
        for (d, &i) in idx.iter().enumerate() {
            let oi = if out_shape[d] == 1 { 0 } else { i };
            o += oi * strides_out[d];
        }
        od[o] = od[o] + v;
        // increment multi-index
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let _ = strides_in;
    out
}

fn broadcast_to<S: Scalar>(a: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    let shape = a.shape();
    assert_eq!(shape.len(), target.len());
    let mut out = Tensor::zeros(target);
    let strides_in = row_major_strides(shape);
    let od = out.data_mut();
    let ad = a.data();
    let mut idx = vec![0usize; target.len()];
    for slot in od.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            let si = if shape[d] == 1 { 0 } else { i };
            src += si * strides_in[d];
        }
        *slot = ad[src];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Tensor<S> {
    let first = parts[0].shape();
    let rank = first.len();
    let mut out_shape = first.to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        assert_eq!(p.shape().len(), rank);
        for d in 0..rank {
            if d != axis {
                assert_eq!(p.shape()[d], first[d], "concat shape mismatch on axis {d}");
            }
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let total_axis = out_shape[axis];
    let od = out.data_mut();
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = &pd[o * pa * inner..(o + 1) * pa * inner];
            let dst_start = (o * total_axis + offset) * inner;
            od[dst_start..dst_start + pa * inner].copy_from_slice(src);
        }
        offset += pa;
    }
    out
}

fn slice<S: Scalar>(a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let shape = a.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let ad = a.data();
    for o in 0..outer {
        let src_start = (o * axis_len + start) * inner;
        od[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&ad[src_start..src_start + len * inner]);
    }
    out
}

fn pad_zero<S: Scalar>(a: &Tensor<S>, axis: usize, before: usize, after: usize) -> Tensor<S> {
    let shape = a.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let new_len = axis_len + before + after;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = new_len;
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let ad = a.data();
    for o in 0..outer {
        let dst_start = (o * new_len + before) * inner;
        od[dst_start..dst_start + axis_len * inner]
            .copy_from_slice(&ad[o * axis_len * inner..(o + 1) * axis_len * inner]);
    }
    out
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Central-difference verification helpers for analytic gradients.
pub mod gradcheck {
    use crate::tensor::{Scalar, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct GradCheckReport {
        /// max over checked coordinates of |analytic - fd| / scale, where
        /// scale = max(|analytic|, |fd|, global max |gradient|).
        pub max_rel_err: f64,
        pub checked: usize,
    }

    /// Compare analytic gradients against central finite differences of
    /// `value_fn`, sampling up to `samples_per_tensor` coordinates per tensor.
    pub fn check<S: Scalar>(
        tensors: &mut [Tensor<S>],
        analytic: &[Tensor<S>],
        mut value_fn: impl FnMut(&[Tensor<S>]) -> f64,
        samples_per_tensor: usize,
        rel_step: f64,
        seed: u64,
    ) -> GradCheckReport {
        assert_eq!(tensors.len(), analytic.len());
        let gmax = analytic
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64_val().abs())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_rel_err = 0.0f64;
        let mut checked = 0usize;
        for ti in 0..tensors.len() {
            let n = tensors[ti].len();
            if n == 0 {
                continue;
            }
            let picks: Vec<usize> = if n <= samples_per_tensor {
                (0..n).collect()
            } else {
                (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
            };
            for idx in picks {
                let orig = tensors[ti].data()[idx];
                let h = rel_step * (1.0 + orig.to_f64_val().abs());
                tensors[ti].data_mut()[idx] = S::from_f64_val(orig.to_f64_val() + h);
                let fp = value_fn(tensors);
                tensors[ti].data_mut()[idx] = S::from_f64_val(orig.to_f64_val() - h);
                let fm = value_fn(tensors);
                tensors[ti].data_mut()[idx] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[ti].data()[idx].to_f64_val();
                let scale = an.abs().max(fd.abs()).max(gmax);
                let rel = (an - fd).abs() / scale;
                if rel > max_rel_err {
                    max_rel_err = rel;
                }
                checked += 1;
            }
        }
        GradCheckReport {
            max_rel_err,
            checked,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv_matches_hand_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[2, 3, 7], &mut rng);
        let w = random_tensor(&[4, 3, 3], &mut rng);
        let geom = ConvGeom::new(7, 3, 1, 1);
        let y = conv_forward(&x, &w, geom);
        assert_eq!(y.shape(), &[2, 4, 7]);
        // hand-check one element: out[1,2,0]
        let mut acc = 0.0;
        for i in 0..3 {
            for k in 0..3usize {
                let pos = k as isize - 1; // m=0, stride 1, pad 1
                if (0..7).contains(&pos) {
                    acc += x.data()[(1 * 3 + i) * 7 + pos as usize] * w.data()[(2 * 3 + i) * 3 + k];
                }
            }
        }
        assert_relative_eq!(y.data()[(1 * 4 + 2) * 7], acc, max_relative = 1e-12);
    }

    #[test]
    fn conv_transpose_inverts_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = ConvGeom::new(8, 4, 2, 1);
        assert_eq!(geom.l_out, 4);
        let y = random_tensor(&[1, 2, 4], &mut rng);
        let w = random_tensor(&[2, 5, 4], &mut rng);
        let x = conv_input_grad(&y, &w, geom);
        assert_eq!(x.shape(), &[1, 5, 8]);
    }

    #[test]
    fn sum_and_broadcast_round_trip_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let t = Tensor::from_vec(&[2, 3, 2], (0..12).map(|i| i as f64).collect());
        let v = g.constant(t);
        let s = g.sum_axes(v, &[0, 2]);
        assert_eq!(g.shape(s), &[1, 3, 1]);
        // sums: channel j gets sum over b,l of value
        assert_relative_eq!(g.value(s).data()[0], 0.0 + 1.0 + 6.0 + 7.0);
        let b = g.broadcast_axes(s, &[0, 2], &[2, 2]);
        assert_eq!(g.shape(b), &[2, 3, 2]);
    }

    /// FD check of a composite: dense -> leaky_relu -> dense -> mean, plus a
    /// conv path with concat/slice/pad, covering most op backward rules.
    #[test]
    fn first_order_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_tensor(&[2, 2, 8], &mut rng);
        let w_conv = random_tensor(&[3, 2, 3], &mut rng);
        let b_conv = random_tensor(&[3], &mut rng);
        let w_dense = random_tensor(&[4, 3 * 8], &mut rng);
        let b_dense = random_tensor(&[4], &mut rng);

        let mut tensors = vec![w_conv, b_conv, w_dense, b_dense];

        let build = |params: &[Tensor<f64>], x0: &Tensor<f64>| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(x0.clone());
            let ids: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let geom = ConvGeom::new(8, 3, 1, 1);
            let c = g.conv1d(x, ids[0], geom);
            let c = g.add_bias_1d(c, ids[1]);
            let c = g.leaky_relu(c, 0.2);
            let padded = g.pad_zero(c, 2, 1, 1);
            let back = g.slice(padded, 2, 1, 8);
            let cat = g.concat(&[back], 1);
            let flat = g.reshape(cat, &[2, 3 * 8]);
            let d = g.dense(flat, ids[2], ids[3]);
            let d = g.sigmoid(d);
            let loss = g.mean_all(d);
            (g, ids, loss)
        };

        let x0c = x0.clone();
        let (mut g, ids, loss) = build(&tensors, &x0c);
        let grads = g.grad(loss, &ids);
        let analytic: Vec<Tensor<f64>> = grads.iter().map(|&v| g.value(v).clone()).collect();

        let report = gradcheck::check(
            &mut tensors,
            &analytic,
            |params| {
                let (g, _, loss) = build(params, &x0c);
                g.item(loss)
            },
            10,
            1e-6,
            7,
        );
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    /// FD check of a second-order quantity: the parameter gradient of
    /// sum((d f / d x)^2) for a small dense net, i.e. the same structure the
    /// critic's gradient penalty uses.
    #[test]
    fn second_order_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random_tensor(&[3, 6], &mut rng);
        let w1 = random_tensor(&[5, 6], &mut rng);
        let b1 = random_tensor(&[5], &mut rng);
        let w2 = random_tensor(&[1, 5], &mut rng);
        let b2 = random_tensor(&[1], &mut rng);
        let mut tensors = vec![w1, b1, w2, b2];

        let build = |params: &[Tensor<f64>], x0: &Tensor<f64>| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(x0.clone());
            g.set_requires_grad(x);
            let ids: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let h = g.dense(x, ids[0], ids[1]);
            let h = g.sigmoid(h);
            let y = g.dense(h, ids[2], ids[3]);
            let ysum = g.mean_all(y);
            let gx = g.grad(ysum, &[x])[0];
            let sq = g.mul(gx, gx);
            let penalty = g.mean_all(sq);
            g.item(penalty)
        };

        // analytic: differentiate the penalty w.r.t. params
        let analytic: Vec<Tensor<f64>> = {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(x0.clone());
            g.set_requires_grad(x);
            let ids: Vec<Var> = tensors.iter().map(|p| g.param(p.clone())).collect();
            let h = g.dense(x, ids[0], ids[1]);
            let h = g.sigmoid(h);
            let y = g.dense(h, ids[2], ids[3]);
            let ysum = g.mean_all(y);
            let gx = g.grad(ysum, &[x])[0];
            let sq = g.mul(gx, gx);
            let penalty = g.mean_all(sq);
            let grads = g.grad(penalty, &ids);
            grads.iter().map(|&v| g.value(v).clone()).collect()
        };

        let report = gradcheck::check(
            &mut tensors,
            &analytic,
            |params| build(params, &x0),
            12,
            1e-6,
            11,
        );
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_of_disconnected_param_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let loss = g.mul(a, a);
        let grads = g.grad(loss, &[a, b]);
        assert_relative_eq!(g.value(grads[0]).item(), 4.0);
        assert_relative_eq!(g.value(grads[1]).item(), 0.0);
    }
}
