//! Evaluation: Gaussian moments of feature sets, a clamped PSD matrix
//! square root, the Fréchet distance between moment pairs, best-of-k
//! selection, and feature-file ingestion.
//!
//! Covariances are unbiased (n - 1 denominator); conventions vary across
//! implementations, so reports state it.

use crate::error::{Error, Result};
use crate::matio::{load_matrix, save_matrix, MatrixFile};
use nalgebra::{DMatrix, DVector};
use std::path::Path;

/// An `n x d` feature matrix with a provenance label.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    /// row-major
    pub data: Vec<f64>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::invalid("feature set", "need n >= 2 rows and d >= 1 columns"));
        }
        if data.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n} x {d}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "feature set",
                format!("non-finite value in row {}", i / d),
            ));
        }
        Ok(FeatureSet {
            n,
            d,
            data,
            source: source.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Load a feature file (matrix sidecar + payload convention).
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let m = load_matrix(path)?;
    FeatureSet::new(
        m.n,
        m.d,
        m.data.iter().map(|&v| v as f64).collect(),
        path.display().to_string(),
    )
}

/// Write features in the same convention (f32 payload).
pub fn save_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let m = MatrixFile::new(set.n, set.d, set.data.iter().map(|&v| v as f32).collect())?;
    save_matrix(&m, path)
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Two-pass sample moments, symmetrized covariance.
pub fn fit_moments(features: &FeatureSet) -> Result<GaussianMoments> {
    let (n, d) = (features.n, features.d);
    if n < 2 {
        return Err(Error::invalid("moments", "need at least 2 rows"));
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    Ok(GaussianMoments { mean, cov })
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (numerical noise) clamp to zero. Errs on asymmetric input or when the
/// reconstruction `B * B` misses `A` beyond `1e-6 * (1 + ||A||_F)`.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::ShapeMismatch("sqrtm needs a square matrix".into()));
    }
    let scale = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-8 * scale {
        return Err(Error::invalid(
            "sqrtm input",
            format!("asymmetry {asym:.3e} beyond tolerance"),
        ));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let mut root_vals = eig.eigenvalues.clone();
    for v in root_vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    let b = &eig.eigenvectors * DMatrix::from_diagonal(&root_vals) * eig.eigenvectors.transpose();
    let b = (&b + b.transpose()) * 0.5;

    let recon_err = (&b * &b - &sym).map(|v| v * v).sum().sqrt();
    let a_norm = sym.map(|v| v * v).sum().sqrt();
    if recon_err > 1e-6 * (1.0 + a_norm) {
        return Err(Error::invalid(
            "sqrtm",
            format!("reconstruction error {recon_err:.3e} exceeds bound"),
        ));
    }
    Ok(b)
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 sqrt(cov_a^1/2 cov_b cov_a^1/2))`,
/// with tiny negative trace terms clamped to zero.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "moment dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrtm_psd(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrtm_psd(&inner)?;
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(mean_term + trace_term.max(0.0))
}

/// Index and item minimizing `score`; ties break toward the lowest index.
pub fn best_of_k<'a, T>(items: &'a [T], mut score: impl FnMut(&T) -> f64) -> Result<(usize, &'a T)> {
    if items.is_empty() {
        return Err(Error::invalid("candidates", "empty list"));
    }
    let mut best = 0usize;
    let mut best_score = score(&items[0]);
    for (i, item) in items.iter().enumerate().skip(1) {
        let s = score(item);
        if s < best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((best, &items[best]))
}
