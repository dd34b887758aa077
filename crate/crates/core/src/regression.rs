//! Linear decoding: closed-form ridge regression heads mapping flattened
//! signals to latent targets, with 5-fold cross-validated regularization,
//! plus a forward-noising utility and the synthetic decoder used by
//! end-to-end tests.

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::synth::GroundTruth;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fixed fold-assignment seed; fitting is deterministic given inputs.
const FOLD_SEED: u64 = 0x5EED_F01D;
const N_FOLDS: usize = 5;

/// Default regularization grid.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Visual,
    Semantic,
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetKind::Visual => write!(f, "visual"),
            TargetKind::Semantic => write!(f, "semantic"),
        }
    }
}

/// One fitted linear head: `predict(x) = W x + b`.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub kind: TargetKind,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
    /// `d_out x d_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RegressionHead {
    /// `W x + b` for a flattened signal (or trial-averaged signal).
    pub fn predict(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} vs head d_in {}",
                x.len(),
                self.d_in
            )));
        }
        Ok((0..self.d_out)
            .map(|o| {
                let row = &self.weights[o * self.d_in..(o + 1) * self.d_in];
                row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + self.bias[o]
            })
            .collect())
    }

    pub fn weights_frobenius(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Diagnostics from one fit.
#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub chosen_alpha: f64,
    /// (alpha, mean cross-validated R^2) per grid entry, grid order.
    pub cv_scores: Vec<(f64, f64)>,
    /// max-norm residual of the normal equations, relative to the
    /// right-hand side's max-norm.
    pub normal_eq_rel_residual: f64,
    /// training-data R^2 of the final head.
    pub train_r2: f64,
}

struct CenteredSystem {
    gram: DMatrix<f64>, // Xc^T Xc
    xty: DMatrix<f64>,  // Xc^T Yc
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
}

fn centered_system(x: ArrayView2<f64>, y: ArrayView2<f64>) -> CenteredSystem {
    let mean_x = x.mean_axis(Axis(0)).unwrap();
    let mean_y = y.mean_axis(Axis(0)).unwrap();
    let xc = &x - &mean_x.view().insert_axis(Axis(0));
    let yc = &y - &mean_y.view().insert_axis(Axis(0));
    let gram = xc.t().dot(&xc);
    let xty = xc.t().dot(&yc);
    CenteredSystem {
        gram: DMatrix::from_row_iterator(gram.nrows(), gram.ncols(), gram.iter().copied()),
        xty: DMatrix::from_row_iterator(xty.nrows(), xty.ncols(), xty.iter().copied()),
        mean_x: DVector::from_iterator(mean_x.len(), mean_x.iter().copied()),
        mean_y: DVector::from_iterator(mean_y.len(), mean_y.iter().copied()),
    }
}

/// Solve `(gram + alpha I) W^T = xty`; returns `W^T` (`d_in x d_out`).
fn ridge_solve(gram: &DMatrix<f64>, xty: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    let mut lhs = gram.clone();
    for i in 0..p {
        lhs[(i, i)] += alpha;
    }
    lhs.cholesky()
        .map(|ch| ch.solve(xty))
        .ok_or_else(|| Error::invalid("ridge system", "not positive definite (alpha too small?)"))
}

/// Variance-weighted R^2 of predictions against targets.
fn r_squared(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let mean = truth.mean_axis(Axis(0)).unwrap();
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (p_row, t_row) in pred.outer_iter().zip(truth.outer_iter()) {
        for ((&p, &t), &m) in p_row.iter().zip(t_row.iter()).zip(mean.iter()) {
            sse += (p - t) * (p - t);
            sst += (t - m) * (t - m);
        }
    }
    if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    }
}

/// Deterministic shuffled fold assignment: `fold_of[i] in 0..N_FOLDS`.
fn fold_assignment(n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(FOLD_SEED);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (rank, &row) in order.iter().enumerate() {
        fold_of[row] = rank % N_FOLDS;
    }
    fold_of
}

/// Closed-form ridge fit with 5-fold cross-validated choice of `alpha`
/// (ties toward the larger value).
///
/// `x` is `n x d_in` (flattened signals), `y` is `n x d_out` (latent
/// targets). All `alpha_grid` entries must be positive.
pub fn fit_head(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    alpha_grid: &[f64],
    kind: TargetKind,
) -> Result<(RegressionHead, FitReport)> {
    let (n, p) = (x.nrows(), x.ncols());
    let d_out = y.ncols();
    if n < 2 {
        return Err(Error::invalid("design", "need at least 2 rows"));
    }
    if y.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} target rows for {n} design rows",
            y.nrows()
        )));
    }
    if alpha_grid.is_empty() || alpha_grid.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::invalid("alpha grid", "entries must be positive"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("design", "non-finite entries"));
    }

    // cross-validation with per-fold recentering
    let fold_of = fold_assignment(n);
    let mut cv_scores: Vec<(f64, f64)> = alpha_grid.iter().map(|&a| (a, 0.0)).collect();
    let mut folds_used = 0usize;
    for fold in 0..N_FOLDS {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        if train_rows.len() < 2 || test_rows.is_empty() {
            continue;
        }
        folds_used += 1;
        let xt = x.select(Axis(0), &train_rows);
        let yt = y.select(Axis(0), &train_rows);
        let xv = x.select(Axis(0), &test_rows);
        let yv = y.select(Axis(0), &test_rows);
        let sys = centered_system(xt.view(), yt.view());
        for (gi, &alpha) in alpha_grid.iter().enumerate() {
            let wt = ridge_solve(&sys.gram, &sys.xty, alpha)?;
            // predictions: (xv - mean_x) W^T + mean_y
            let mut pred = Array2::<f64>::zeros((test_rows.len(), d_out));
            for (ri, row) in xv.outer_iter().enumerate() {
                for o in 0..d_out {
                    let mut acc = sys.mean_y[o];
                    for j in 0..p {
                        acc += (row[j] - sys.mean_x[j]) * wt[(j, o)];
                    }
                    pred[(ri, o)] = acc;
                }
            }
            cv_scores[gi].1 += r_squared(&pred, &yv.to_owned());
        }
    }
    if folds_used == 0 {
        return Err(Error::invalid("design", "too few rows for cross-validation"));
    }
    for s in &mut cv_scores {
        s.1 /= folds_used as f64;
    }

    // ties toward larger alpha
    let mut best = 0usize;
    for (i, &(alpha, score)) in cv_scores.iter().enumerate() {
        let (ba, bs) = cv_scores[best];
        if score > bs || (score == bs && alpha > ba) {
            best = i;
        }
    }
    let chosen_alpha = cv_scores[best].0;

    // final fit on everything
    let sys = centered_system(x, y);
    let wt = ridge_solve(&sys.gram, &sys.xty, chosen_alpha)?;

    // || (Gc + aI) W^T - Xc^T Yc ||_inf relative to the right-hand side
    let mut lhs = sys.gram.clone() * &wt;
    for j in 0..p {
        for o in 0..d_out {
            lhs[(j, o)] += chosen_alpha * wt[(j, o)];
        }
    }
    let resid = (&lhs - &sys.xty).abs().max();
    let scale = sys.xty.abs().max().max(1e-12);
    let normal_eq_rel_residual = resid / scale;

    let mut weights = vec![0.0; d_out * p];
    for o in 0..d_out {
        for j in 0..p {
            weights[o * p + j] = wt[(j, o)];
        }
    }
    let bias: Vec<f64> = (0..d_out)
        .map(|o| {
            sys.mean_y[o] - (0..p).map(|j| weights[o * p + j] * sys.mean_x[j]).sum::<f64>()
        })
        .collect();
    let head = RegressionHead {
        kind,
        alpha: chosen_alpha,
        d_in: p,
        d_out,
        weights,
        bias,
    };

    let mut pred = Array2::<f64>::zeros((n, d_out));
    for (ri, row) in x.outer_iter().enumerate() {
        let xr: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        for (o, v) in head.predict(&xr)?.into_iter().enumerate() {
            pred[(ri, o)] = v;
        }
    }
    let train_r2 = r_squared(&pred, &y.to_owned());

    Ok((
        head,
        FitReport {
            chosen_alpha,
            cv_scores,
            normal_eq_rel_residual,
            train_r2,
        },
    ))
}

/// Build an `n x d` matrix from equal-length rows.
pub fn design_from_rows(rows: &[Vec<f32>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let p = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 || p == 0 {
        return Err(Error::invalid("design", "empty"));
    }
    let mut out = Array2::<f64>::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "row {i} has {} values, expected {p}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v as f64;
        }
    }
    Ok(out)
}

// ---- head serialization ----

const HEAD_KIND: &str = "regression_head";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    kind: TargetKind,
    alpha: f64,
    d_in: usize,
    d_out: usize,
}

/// Store in the shared container format (f32 payloads).
pub fn save_head(head: &RegressionHead, path: impl AsRef<Path>) -> Result<()> {
    let meta = HeadMeta {
        kind: head.kind,
        alpha: head.alpha,
        d_in: head.d_in,
        d_out: head.d_out,
    };
    let w = Tensor::from_vec(
        &[head.d_out, head.d_in],
        head.weights.iter().map(|&v| v as f32).collect(),
    );
    let b = Tensor::from_vec(&[head.d_out], head.bias.iter().map(|&v| v as f32).collect());
    write_container(
        path,
        HEAD_KIND,
        &meta,
        &[("weights".to_string(), &w), ("bias".to_string(), &b)],
    )
}

pub fn load_head(path: impl AsRef<Path>) -> Result<RegressionHead> {
    let (meta, tensors): (HeadMeta, Vec<(String, Tensor<f32>)>) = read_container(path, HEAD_KIND)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    };
    let w = find("weights")?;
    let b = find("bias")?;
    if w.shape() != [meta.d_out, meta.d_in] || b.shape() != [meta.d_out] {
        return Err(Error::Checkpoint("head tensor shapes disagree with metadata".into()));
    }
    Ok(RegressionHead {
        kind: meta.kind,
        alpha: meta.alpha,
        d_in: meta.d_in,
        d_out: meta.d_out,
        weights: w.data().iter().map(|&v| v as f64).collect(),
        bias: b.data().iter().map(|&v| v as f64).collect(),
    })
}

// ---- forward noising ----

/// Cumulative noise schedule: `alpha_bar(t)` for `t = 1..=T`, with the
/// boundary convention `alpha_bar(0) = 1`. Values lie in `[0, 1]` and are
/// non-increasing. (Zero is allowed so the fully-noised endpoint is exact.)
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::invalid("noise schedule", "must have at least one step"));
        }
        let mut prev = 1.0;
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(
                    "noise schedule",
                    format!("alpha_bar[{}] = {a} outside [0, 1]", t + 1),
                ));
            }
            if a > prev {
                return Err(Error::invalid(
                    "noise schedule",
                    format!("alpha_bar must be non-increasing (step {})", t + 1),
                ));
            }
            prev = a;
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Standard linear-beta schedule, accumulated.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule", "steps must be positive"));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|t| {
                let beta = if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                };
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        NoiseSchedule::new(alpha_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `alpha_bar(t)`; `t = 0` returns the boundary value 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alpha_bar.get(t - 1).copied().ok_or_else(|| {
            Error::invalid("noise schedule", format!("t = {t} out of 1..={}", self.steps()))
        })
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    x0: &[f32],
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[f32],
) -> Result<Vec<f32>> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::invalid(
            "noise step",
            format!("t = {t} out of 1..={}", schedule.steps()),
        ));
    }
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 len {} vs eps len {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let a = (ab.sqrt()) as f32;
    let b = ((1.0 - ab).sqrt()) as f32;
    // exact endpoints: coefficients collapse to {1, 0} bitwise
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| {
            if ab == 1.0 {
                x
            } else if ab == 0.0 {
                e
            } else {
                a * x + b * e
            }
        })
        .collect())
}

// ---- synthetic latent codec ----

/// Linear stand-in for the external latent decoder: `decode(z) = W z + bias`
/// with `encode` its least-squares inverse through the pseudo-inverse of the
/// encoding map.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    d: usize,
    n: usize,
    /// `n x d`, row-major (the encoding matrix).
    decode_matrix: Vec<f64>,
    /// `d x n`, row-major (pseudo-inverse).
    encode_matrix: Vec<f64>,
    bias: Vec<f64>,
}

impl LatentCodec {
    /// From an `n x d` encoding matrix with full column rank.
    pub fn from_encoding(w: &[f32], n: usize, d: usize, bias: Vec<f64>) -> Result<Self> {
        if w.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "encoding matrix {} values for {n} x {d}",
                w.len()
            )));
        }
        if bias.len() != n {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
        let wm = DMatrix::from_row_iterator(n, d, w.iter().map(|&v| v as f64));
        // pinv = (W^T W)^-1 W^T for tall full-rank W
        let gram = wm.transpose() * &wm;
        let inv = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("codec", "encoding matrix is rank-deficient"))?
            .inverse();
        let pinv = inv * wm.transpose();
        let mut decode_matrix = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                decode_matrix[i * d + j] = wm[(i, j)];
            }
        }
        let mut encode_matrix = vec![0.0; d * n];
        for i in 0..d {
            for j in 0..n {
                encode_matrix[i * n + j] = pinv[(i, j)];
            }
        }
        Ok(LatentCodec {
            d,
            n,
            decode_matrix,
            encode_matrix,
            bias,
        })
    }

    /// Visual-latent codec from a synthetic ground truth (zero bias).
    pub fn visual(gt: &GroundTruth) -> Result<Self> {
        let n = 2 * gt.config.vertex_count;
        LatentCodec::from_encoding(&gt.w_z, n, gt.config.latent_dim_visual, vec![0.0; n])
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn vector_dim(&self) -> usize {
        self.n
    }

    /// `W z + bias`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "latent dim {} vs codec {}",
                z.len(),
                self.d
            )));
        }
        Ok((0..self.n)
            .map(|i| {
                let row = &self.decode_matrix[i * self.d..(i + 1) * self.d];
                row.iter().zip(z).map(|(w, zv)| w * zv).sum::<f64>() + self.bias[i]
            })
            .collect())
    }

    /// Least-squares latent for a vector: `W^+ (x - bias)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "vector dim {} vs codec {}",
                x.len(),
                self.n
            )));
        }
        Ok((0..self.d)
            .map(|o| {
                let row = &self.encode_matrix[o * self.n..(o + 1) * self.n];
                row.iter()
                    .zip(x)
                    .zip(&self.bias)
                    .map(|((w, xv), b)| w * (xv - b))
                    .sum::<f64>()
            })
            .collect())
    }
}
