//! Synthetic oracle datasets: paired ground truth that real acquisitions
//! lack, so enhancement and decoding can be scored quantitatively.
//!
//! Clean signals are linear in per-image latents through spatially smooth
//! encoding maps, plus a per-subject offset:
//!
//! ```text
//! clean(s, i) = W_z * z_i + W_c * c_i + offset_s
//! ```
//!
//! High-tier trials add white noise to the clean signal. Low-tier trials are
//! an affine + blur + noise degradation of it, so the ideal inverse map is
//! known in closed form (affine inverse plus regularized deconvolution) and
//! serves as the target for the trained generator.
//!
//! Smooth encoding columns keep the blur invertible: the clean signal lives
//! in the passband that Tikhonov deconvolution can recover.

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, QualityTier, SampleKey, SubjectEntry};
use crate::matio::{load_matrix, save_matrix, MatrixFile};
use crate::preproc::{gaussian_kernel, smooth_symmetric};
use crate::sample::FmriSample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Tikhonov regularization used by the oracle deconvolution.
pub const DECONV_EPSILON: f64 = 1e-3;

/// Affine + blur + noise model of the quality gap between tiers.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    /// Gaussian blur FWHM in vertex units; `<= 0` disables blur.
    pub blur_fwhm_vertices: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma_low: f64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gain == 0.0 || !self.gain.is_finite() {
            return Err(Error::invalid("degradation", "gain must be finite and nonzero"));
        }
        if self.noise_sigma_low < 0.0 {
            return Err(Error::invalid("degradation", "noise sigma must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vertex_count: usize,
    pub n_images: usize,
    pub n_subjects_low: usize,
    pub n_subjects_high: usize,
    pub trials_per_image_low: u32,
    pub trials_per_image_high: u32,
    pub latent_dim_visual: usize,
    pub latent_dim_semantic: usize,
    pub encoding_seed: u64,
    pub noise_sigma_high: f64,
    pub degradation: DegradationSpec,
    /// FWHM of the smoothing applied to encoding columns.
    pub encoding_smoothness_fwhm: f64,
    /// Per-vertex std of the per-subject offsets.
    pub subject_offset_sigma: f64,
}

impl Default for SynthConfig {
    /// The 9 x 10 low / 8 x 3 high, 70-image composition, at desk-scale
    /// vertex count.
    fn default() -> Self {
        SynthConfig {
            vertex_count: 1024,
            n_images: 70,
            n_subjects_low: 9,
            n_subjects_high: 8,
            trials_per_image_low: 10,
            trials_per_image_high: 3,
            latent_dim_visual: 16,
            latent_dim_semantic: 8,
            encoding_seed: 7,
            noise_sigma_high: 0.05,
            degradation: DegradationSpec {
                blur_fwhm_vertices: 4.0,
                gain: 1.5,
                bias: 0.5,
                noise_sigma_low: 0.05,
            },
            encoding_smoothness_fwhm: 16.0,
            subject_offset_sigma: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vertex_count", self.vertex_count),
            ("n_images", self.n_images),
            ("n_subjects_low", self.n_subjects_low),
            ("n_subjects_high", self.n_subjects_high),
            ("latent_dim_visual", self.latent_dim_visual),
            ("latent_dim_semantic", self.latent_dim_semantic),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("synth config", format!("{name} must be positive")));
            }
        }
        if self.trials_per_image_low == 0 || self.trials_per_image_high == 0 {
            return Err(Error::invalid("synth config", "trials per image must be positive"));
        }
        if self.noise_sigma_high < 0.0 || self.subject_offset_sigma < 0.0 {
            return Err(Error::invalid("synth config", "noise sigmas must be >= 0"));
        }
        self.degradation.validate()
    }

    pub fn subjects_low(&self) -> Vec<String> {
        (1..=self.n_subjects_low).map(|i| format!("low-{i:02}")).collect()
    }

    pub fn subjects_high(&self) -> Vec<String> {
        (1..=self.n_subjects_high).map(|i| format!("high-{i:02}")).collect()
    }

    pub fn image_ids(&self) -> Vec<String> {
        (0..self.n_images).map(|i| format!("img-{i:03}")).collect()
    }
}

/// Everything the tests need to score pipeline outputs: per-image latents,
/// the encoding maps, and per-subject offsets. Clean signals are recomputed
/// on demand.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub image_ids: Vec<String>,
    pub subjects_low: Vec<String>,
    pub subjects_high: Vec<String>,
    /// `n_images x d_z`, row-major.
    pub z: Vec<f32>,
    /// `n_images x d_c`, row-major.
    pub c: Vec<f32>,
    /// `2V x d_z`, row-major.
    pub w_z: Vec<f32>,
    /// `2V x d_c`, row-major.
    pub w_c: Vec<f32>,
    /// subject id -> offset vector of length `2V`.
    pub offsets: BTreeMap<String, Vec<f32>>,
}

impl GroundTruth {
    pub fn image_index(&self, image_id: &str) -> Result<usize> {
        self.image_ids
            .iter()
            .position(|i| i == image_id)
            .ok_or_else(|| Error::invalid("ground truth", format!("unknown image {image_id:?}")))
    }

    pub fn latent_visual(&self, image_id: &str) -> Result<&[f32]> {
        let d = self.config.latent_dim_visual;
        let i = self.image_index(image_id)?;
        Ok(&self.z[i * d..(i + 1) * d])
    }

    pub fn latent_semantic(&self, image_id: &str) -> Result<&[f32]> {
        let d = self.config.latent_dim_semantic;
        let i = self.image_index(image_id)?;
        Ok(&self.c[i * d..(i + 1) * d])
    }

    /// Clean high-quality signal for one (subject, image), as both channels
    /// concatenated (length `2V`).
    pub fn clean_signal(&self, subject_id: &str, image_id: &str) -> Result<Vec<f32>> {
        let offset = self
            .offsets
            .get(subject_id)
            .ok_or_else(|| Error::invalid("ground truth", format!("unknown subject {subject_id:?}")))?;
        let i = self.image_index(image_id)?;
        let (dz, dc) = (self.config.latent_dim_visual, self.config.latent_dim_semantic);
        let z = &self.z[i * dz..(i + 1) * dz];
        let c = &self.c[i * dc..(i + 1) * dc];
        let n = 2 * self.config.vertex_count;
        let mut out = Vec::with_capacity(n);
        for v in 0..n {
            let mut acc = offset[v] as f64;
            let wz_row = &self.w_z[v * dz..(v + 1) * dz];
            for (w, x) in wz_row.iter().zip(z) {
                acc += *w as f64 * *x as f64;
            }
            let wc_row = &self.w_c[v * dc..(v + 1) * dc];
            for (w, x) in wc_row.iter().zip(c) {
                acc += *w as f64 * *x as f64;
            }
            out.push(acc as f32);
        }
        Ok(out)
    }

    /// Serialize to `dir`: a JSON index plus flat binary matrices.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let v2 = 2 * self.config.vertex_count;
        let (dz, dc) = (self.config.latent_dim_visual, self.config.latent_dim_semantic);

        let z = MatrixFile::new(self.image_ids.len(), dz, self.z.clone())?
            .with_image_ids(self.image_ids.clone())?;
        save_matrix(&z, dir.join("z.json"))?;
        let c = MatrixFile::new(self.image_ids.len(), dc, self.c.clone())?
            .with_image_ids(self.image_ids.clone())?;
        save_matrix(&c, dir.join("c.json"))?;
        save_matrix(&MatrixFile::new(v2, dz, self.w_z.clone())?, dir.join("w_z.json"))?;
        save_matrix(&MatrixFile::new(v2, dc, self.w_c.clone())?, dir.join("w_c.json"))?;

        let subject_order: Vec<String> = self.offsets.keys().cloned().collect();
        let mut flat = Vec::with_capacity(subject_order.len() * v2);
        for s in &subject_order {
            flat.extend_from_slice(&self.offsets[s]);
        }
        save_matrix(
            &MatrixFile::new(subject_order.len(), v2, flat)?,
            dir.join("offsets.json"),
        )?;

        let index = GroundTruthIndex {
            config: self.config.clone(),
            image_ids: self.image_ids.clone(),
            subjects_low: self.subjects_low.clone(),
            subjects_high: self.subjects_high.clone(),
            offset_subjects: subject_order,
        };
        let path = dir.join("ground_truth.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&index).expect("index serializes"),
        )
        .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("ground_truth.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: GroundTruthIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let z = load_matrix(dir.join("z.json"))?;
        let c = load_matrix(dir.join("c.json"))?;
        let w_z = load_matrix(dir.join("w_z.json"))?;
        let w_c = load_matrix(dir.join("w_c.json"))?;
        let offsets_mat = load_matrix(dir.join("offsets.json"))?;
        let v2 = 2 * index.config.vertex_count;
        if w_z.n != v2 || w_c.n != v2 || offsets_mat.d != v2 {
            return Err(Error::invalid("ground truth", "matrix dims do not match config"));
        }
        let mut offsets = BTreeMap::new();
        for (i, s) in index.offset_subjects.iter().enumerate() {
            offsets.insert(s.clone(), offsets_mat.row(i).to_vec());
        }
        Ok(GroundTruth {
            config: index.config,
            image_ids: index.image_ids,
            subjects_low: index.subjects_low,
            subjects_high: index.subjects_high,
            z: z.data,
            c: c.data,
            w_z: w_z.data,
            w_c: w_c.data,
            offsets,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthIndex {
    config: SynthConfig,
    image_ids: Vec<String>,
    subjects_low: Vec<String>,
    subjects_high: Vec<String>,
    offset_subjects: Vec<String>,
}

// stream tags for counter-based seeding
const TAG_W_Z: u64 = 1;
const TAG_W_C: u64 = 2;
const TAG_LATENT_Z: u64 = 3;
const TAG_LATENT_C: u64 = 4;
const TAG_OFFSET_LOW: u64 = 5;
const TAG_OFFSET_HIGH: u64 = 6;
const TAG_NOISE_LOW: u64 = 7;
const TAG_NOISE_HIGH: u64 = 8;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for one (tag, indices) cell; lets generation be
/// partitioned per sample without sharing stream state.
fn stream_rng(seed: u64, tag: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut acc = splitmix(seed ^ splitmix(tag));
    for &p in parts {
        acc = splitmix(acc ^ p.wrapping_mul(0x2545f4914f6cdd1d));
    }
    ChaCha8Rng::seed_from_u64(acc)
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Smooth white noise per hemisphere and rescale columns so the summed
/// clean signal has about unit per-vertex variance.
fn encoding_matrix(
    seed: u64,
    tag: u64,
    v: usize,
    dim: usize,
    total_dims: usize,
    fwhm: f64,
) -> Vec<f32> {
    let n = 2 * v;
    let mut w = vec![0.0f32; n * dim];
    let target_rms = 1.0 / (total_dims as f64).sqrt();
    for j in 0..dim {
        let mut rng = stream_rng(seed, tag, &[j as u64]);
        let raw = standard_normal_vec(&mut rng, n);
        let mut col = if fwhm > 0.0 {
            let mut left = smooth_symmetric(&raw[..v], fwhm);
            let right = smooth_symmetric(&raw[v..], fwhm);
            left.extend(right);
            left
        } else {
            raw
        };
        let rms = (col.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let scale = if rms > 0.0 { target_rms / rms } else { 0.0 };
        for x in &mut col {
            *x *= scale;
        }
        for (row, x) in col.iter().enumerate() {
            w[row * dim + j] = *x as f32;
        }
    }
    w
}

/// Deterministic ground truth for `config` (no files touched).
pub fn build_ground_truth(config: &SynthConfig) -> Result<GroundTruth> {
    config.validate()?;
    let v = config.vertex_count;
    let (dz, dc) = (config.latent_dim_visual, config.latent_dim_semantic);
    let seed = config.encoding_seed;
    let total = dz + dc;
    let w_z = encoding_matrix(seed, TAG_W_Z, v, dz, total, config.encoding_smoothness_fwhm);
    let w_c = encoding_matrix(seed, TAG_W_C, v, dc, total, config.encoding_smoothness_fwhm);

    let image_ids = config.image_ids();
    let mut z = Vec::with_capacity(image_ids.len() * dz);
    let mut c = Vec::with_capacity(image_ids.len() * dc);
    for i in 0..image_ids.len() {
        let mut rng = stream_rng(seed, TAG_LATENT_Z, &[i as u64]);
        z.extend(standard_normal_vec(&mut rng, dz).into_iter().map(|x| x as f32));
        let mut rng = stream_rng(seed, TAG_LATENT_C, &[i as u64]);
        c.extend(standard_normal_vec(&mut rng, dc).into_iter().map(|x| x as f32));
    }

    let mut offsets = BTreeMap::new();
    let subjects_low = config.subjects_low();
    let subjects_high = config.subjects_high();
    for (idx, s) in subjects_low.iter().enumerate() {
        let mut rng = stream_rng(seed, TAG_OFFSET_LOW, &[idx as u64]);
        let off: Vec<f32> = standard_normal_vec(&mut rng, 2 * v)
            .into_iter()
            .map(|x| (x * config.subject_offset_sigma) as f32)
            .collect();
        offsets.insert(s.clone(), off);
    }
    for (idx, s) in subjects_high.iter().enumerate() {
        let mut rng = stream_rng(seed, TAG_OFFSET_HIGH, &[idx as u64]);
        let off: Vec<f32> = standard_normal_vec(&mut rng, 2 * v)
            .into_iter()
            .map(|x| (x * config.subject_offset_sigma) as f32)
            .collect();
        offsets.insert(s.clone(), off);
    }

    Ok(GroundTruth {
        config: config.clone(),
        image_ids,
        subjects_low,
        subjects_high,
        z,
        c,
        w_z,
        w_c,
        offsets,
    })
}

/// Deterministic part of the degradation (no noise), on a concatenated
/// two-channel vector. Without blur this is pure f32 affine arithmetic, so
/// `low = gain * clean + bias` holds bit-for-bit.
pub fn degrade_values(clean: &[f32], vertex_count: usize, spec: &DegradationSpec) -> Vec<f32> {
    assert_eq!(clean.len(), 2 * vertex_count);
    if spec.blur_fwhm_vertices > 0.0 {
        let mut out = Vec::with_capacity(clean.len());
        for ch in 0..2 {
            let seg: Vec<f64> = clean[ch * vertex_count..(ch + 1) * vertex_count]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let blurred = smooth_symmetric(&seg, spec.blur_fwhm_vertices);
            out.extend(blurred.into_iter().map(|x| (spec.gain * x + spec.bias) as f32));
        }
        out
    } else {
        let (g, b) = (spec.gain as f32, spec.bias as f32);
        clean.iter().map(|&x| g * x + b).collect()
    }
}

/// Generate a low/high manifest pair plus ground truth under `out_dir`.
///
/// High-tier trials are `clean + N(0, noise_sigma_high^2)`; low-tier trials
/// are `gain * blur(clean) + bias + N(0, noise_sigma_low^2)`. Byte-identical
/// for a fixed config.
pub fn generate(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, DatasetManifest, GroundTruth)> {
    let out_dir = out_dir.as_ref();
    let gt = build_ground_truth(config)?;
    let v = config.vertex_count;
    let seed = config.encoding_seed;

    std::fs::create_dir_all(out_dir.join("low")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("high")).map_err(|e| Error::io(out_dir, e))?;

    let mut tiers: Vec<(QualityTier, &str, &[String], u32, u64, f64)> = vec![
        (
            QualityTier::Low,
            "low",
            &gt.subjects_low,
            config.trials_per_image_low,
            TAG_NOISE_LOW,
            config.degradation.noise_sigma_low,
        ),
        (
            QualityTier::High,
            "high",
            &gt.subjects_high,
            config.trials_per_image_high,
            TAG_NOISE_HIGH,
            config.noise_sigma_high,
        ),
    ];

    let mut manifests = Vec::new();
    for (tier, dir_name, subjects, trials, noise_tag, sigma) in tiers.drain(..) {
        let mut sample_index = BTreeMap::new();
        for (s_idx, subject) in subjects.iter().enumerate() {
            for (i_idx, image) in gt.image_ids.iter().enumerate() {
                let clean = gt.clean_signal(subject, image)?;
                let base: Vec<f32> = match tier {
                    QualityTier::Low => degrade_values(&clean, v, &config.degradation),
                    _ => clean,
                };
                for t in 0..trials {
                    let values: Vec<f32> = if sigma > 0.0 {
                        let mut rng =
                            stream_rng(seed, noise_tag, &[s_idx as u64, i_idx as u64, t as u64]);
                        let normal = Normal::new(0.0, sigma).unwrap();
                        base.iter()
                            .map(|&x| x + normal.sample(&mut rng) as f32)
                            .collect()
                    } else {
                        base.clone()
                    };
                    let sample = FmriSample::new(
                        subject.clone(),
                        image.clone(),
                        t,
                        values[..v].to_vec(),
                        values[v..].to_vec(),
                    )?;
                    let rel = format!("{dir_name}/{subject}_{image}_{t}.otf");
                    sample.save(out_dir.join(&rel))?;
                    sample_index
                        .insert(SampleKey::new(subject.clone(), image.clone(), t).to_string(), rel);
                }
            }
        }
        manifests.push(DatasetManifest {
            name: format!("synth-{dir_name}"),
            quality_tier: tier,
            vertex_count: v as u64,
            subjects: subjects
                .iter()
                .map(|s| SubjectEntry {
                    subject_id: s.clone(),
                    trials_per_image: trials,
                })
                .collect(),
            shared_image_ids: gt.image_ids.clone(),
            sample_index,
        });
    }

    let high = manifests.pop().unwrap();
    let low = manifests.pop().unwrap();
    low.save(out_dir.join("low_manifest.json"))?;
    high.save(out_dir.join("high_manifest.json"))?;
    gt.save(out_dir.join("ground_truth"))?;
    Ok((low, high, gt))
}

/// Frequency response of the blur kernel embedded circularly in a
/// length-`2V` symmetric extension.
fn kernel_spectrum(kernel: &[f64], n: usize) -> Vec<Complex<f64>> {
    let radius = kernel.len() / 2;
    assert!(kernel.len() <= n, "kernel longer than extended signal");
    let mut k = vec![Complex::new(0.0, 0.0); n];
    for (i, &w) in kernel.iter().enumerate() {
        let pos = (i as isize - radius as isize).rem_euclid(n as isize) as usize;
        k[pos] += Complex::new(w, 0.0);
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut k);
    k
}

/// Undo the blur of one channel via Tikhonov-regularized deconvolution on
/// the symmetric extension (which is exactly the boundary rule the blur
/// used).
fn tikhonov_deconv(values: &[f64], fwhm: f64, eps: f64) -> Vec<f64> {
    let v = values.len();
    let n = 2 * v;
    let kernel = gaussian_kernel(fwhm);
    let spectrum = kernel_spectrum(&kernel, n);

    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(n);
    buf.extend(values.iter().map(|&x| Complex::new(x, 0.0)));
    buf.extend(values.iter().rev().map(|&x| Complex::new(x, 0.0)));

    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (b, k) in buf.iter_mut().zip(&spectrum) {
        let denom = k.norm_sqr() + eps;
        *b = *b * k.conj() / denom;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf[..v].iter().map(|c| c.re / n as f64).collect()
}

/// L2 gain of the deconvolution filter at vertex count `v`: white noise of
/// std `sigma` comes out with std about `sigma * gain`.
pub fn deconv_filter_l2_gain(fwhm: f64, v: usize) -> f64 {
    let n = 2 * v;
    let kernel = gaussian_kernel(fwhm);
    let spectrum = kernel_spectrum(&kernel, n);
    let mean_sq = spectrum
        .iter()
        .map(|k| {
            let m = k.norm_sqr();
            m / (m + DECONV_EPSILON).powi(2)
        })
        .sum::<f64>()
        / n as f64;
    mean_sq.sqrt()
}

/// Ideal inverse of [`degrade_values`] up to noise: affine inverse followed
/// by regularized deconvolution of the blur.
pub fn oracle_enhance(sample: &FmriSample, spec: &DegradationSpec) -> Result<FmriSample> {
    spec.validate()?;
    let restore = |ch: &[f32]| -> Vec<f32> {
        let affine: Vec<f64> = ch
            .iter()
            .map(|&y| (y as f64 - spec.bias) / spec.gain)
            .collect();
        let out = if spec.blur_fwhm_vertices > 0.0 {
            tikhonov_deconv(&affine, spec.blur_fwhm_vertices, DECONV_EPSILON)
        } else {
            affine
        };
        out.into_iter().map(|x| x as f32).collect()
    };
    sample.with_values(restore(sample.channel(0)), restore(sample.channel(1)))
}
