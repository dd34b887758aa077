//! Preprocessing on vertex vectors: discrete-cosine high-pass detrending of
//! trial time series, Gaussian smoothing along the vertex index, and trial
//! averaging.

use crate::error::{Error, Result};
use crate::sample::{FmriSample, TRIAL_AVERAGED};

/// Gaussian sigma for a given full-width-at-half-maximum.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
}

/// Normalized Gaussian kernel for `fwhm` in vertex units; odd length
/// `2 * radius + 1` with the peak at the center.
pub fn gaussian_kernel(fwhm: f64) -> Vec<f64> {
    assert!(fwhm > 0.0, "fwhm must be positive");
    let sigma = fwhm_to_sigma(fwhm);
    let radius = (4.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Mirror an out-of-range index back into `0..len` with edge-inclusive
/// (symmetric) reflection: `-1 -> 0`, `len -> len - 1`.
fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve with a normalized Gaussian under symmetric reflection. The
/// reflection keeps every kernel column summing to one, so totals are
/// preserved exactly up to rounding.
pub fn smooth_symmetric(values: &[f64], fwhm: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(fwhm);
    let radius = kernel.len() / 2;
    let n = values.len();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (ki, &w) in kernel.iter().enumerate() {
            let src = reflect(i as isize + ki as isize - radius as isize, n);
            acc += w * values[src];
        }
        *slot = acc;
    }
    out
}

/// Gaussian smoothing of both channels along the vertex index.
pub fn smooth_spatial(sample: &FmriSample, fwhm_vertices: f64) -> Result<FmriSample> {
    if fwhm_vertices <= 0.0 {
        return Err(Error::invalid("fwhm", "must be positive"));
    }
    let smoothed: Vec<Vec<f32>> = sample
        .channels()
        .iter()
        .map(|ch| {
            let as64: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
            smooth_symmetric(&as64, fwhm_vertices)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        })
        .collect();
    let mut it = smoothed.into_iter();
    sample.with_values(it.next().unwrap(), it.next().unwrap())
}

/// Remove slow drift from a time-ordered series of samples by regressing out
/// the discrete-cosine components with period longer than `cutoff_s`.
/// Per-vertex means are unchanged (the removed basis vectors are zero-mean).
pub fn highpass_temporal(
    series: &[FmriSample],
    cutoff_s: f64,
    tr_s: f64,
) -> Result<Vec<FmriSample>> {
    let n = series.len();
    if n < 2 {
        return Err(Error::invalid(
            "time series",
            "need at least 2 time points",
        ));
    }
    if !(tr_s > 0.0) || cutoff_s <= 2.0 * tr_s {
        return Err(Error::invalid(
            "cutoff",
            format!("cutoff_s must exceed 2 * tr_s ({cutoff_s} vs {tr_s})"),
        ));
    }
    let v = series[0].vertex_count();
    for s in series {
        if s.vertex_count() != v {
            return Err(Error::ShapeMismatch(format!(
                "vertex counts differ in series: {} vs {v}",
                s.vertex_count()
            )));
        }
    }

    // DCT-II component k has frequency k / (2 n tr); drop those strictly
    // below the cutoff frequency.
    let k_max = {
        let limit = 2.0 * n as f64 * tr_s / cutoff_s;
        let ceil = limit.ceil();
        let k = if (ceil - limit).abs() < f64::EPSILON {
            limit as usize
        } else {
            ceil as usize
        };
        k.saturating_sub(1).min(n - 1)
    };
    if k_max == 0 {
        return Ok(series.to_vec());
    }

    // orthogonal basis, |c_k|^2 = n/2 for 1 <= k < n
    let basis: Vec<Vec<f64>> = (1..=k_max)
        .map(|k| {
            (0..n)
                .map(|t| {
                    (std::f64::consts::PI * k as f64 * (2.0 * t as f64 + 1.0) / (2.0 * n as f64))
                        .cos()
                })
                .collect()
        })
        .collect();
    let norm = n as f64 / 2.0;

    let mut filtered: Vec<Vec<[f32; 2]>> = Vec::new(); // placeholder-free accumulation below
    filtered.clear();

    let mut out_channels: Vec<[Vec<f32>; 2]> = series
        .iter()
        .map(|s| {
            [
                s.channel(0).to_vec(),
                s.channel(1).to_vec(),
            ]
        })
        .collect();

    let mut column = vec![0.0f64; n];
    for ch in 0..2 {
        for vi in 0..v {
            for (t, s) in series.iter().enumerate() {
                column[t] = s.channel(ch)[vi] as f64;
            }
            for b in &basis {
                let coef: f64 = column.iter().zip(b).map(|(x, c)| x * c).sum::<f64>() / norm;
                for (x, c) in column.iter_mut().zip(b) {
                    *x -= coef * c;
                }
            }
            for (t, x) in column.iter().enumerate() {
                out_channels[t][ch][vi] = *x as f32;
            }
        }
    }

    series
        .iter()
        .zip(out_channels)
        .map(|(s, [l, r])| s.with_values(l, r))
        .collect()
}

/// Element-wise mean of trials sharing one (subject, image); the result's
/// `trial_index` is the averaged sentinel.
pub fn trial_average(samples: &[FmriSample]) -> Result<FmriSample> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("trial list", "empty"))?;
    let v = first.vertex_count();
    for s in samples {
        if s.subject_id != first.subject_id || s.image_id != first.image_id {
            return Err(Error::invalid(
                "trial list",
                format!(
                    "mixed identities: {}/{} vs {}/{}",
                    s.subject_id, s.image_id, first.subject_id, first.image_id
                ),
            ));
        }
        if s.vertex_count() != v {
            return Err(Error::ShapeMismatch(format!(
                "vertex counts differ: {} vs {v}",
                s.vertex_count()
            )));
        }
    }
    let scale = 1.0 / samples.len() as f64;
    let mean_channel = |c: usize| -> Vec<f32> {
        let mut acc = vec![0.0f64; v];
        for s in samples {
            for (a, &x) in acc.iter_mut().zip(s.channel(c)) {
                *a += x as f64;
            }
        }
        acc.into_iter().map(|a| (a * scale) as f32).collect()
    };
    let mut avg = first.with_values(mean_channel(0), mean_channel(1))?;
    avg.trial_index = TRIAL_AVERAGED;
    Ok(avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn constant_sample(v: usize, val: f32) -> FmriSample {
        FmriSample::new("s", "i", 0, vec![val; v], vec![val; v]).unwrap()
    }

    // ---- smoothing ----

    #[test]
    fn delta_spike_becomes_the_kernel() {
        let v = 256;
        let mut left = vec![0.0f32; v];
        left[100] = 1.0;
        let s = FmriSample::new("s", "i", 0, left, vec![0.0; v]).unwrap();
        let out = smooth_spatial(&s, 8.0).unwrap();
        let kernel = gaussian_kernel(8.0);
        let radius = kernel.len() / 2;
        // interior spike: output equals the directly evaluated kernel
        for (ki, &w) in kernel.iter().enumerate() {
            let idx = 100 + ki - radius;
            assert_relative_eq!(out.channel(0)[idx] as f64, w, epsilon = 1e-7);
        }
        let sum: f64 = out.channel(0).iter().map(|&x| x as f64).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-4);
        let peak = out
            .channel(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 100);
    }

    #[test]
    fn constant_channel_unchanged() {
        let s = constant_sample(64, 3.25);
        let out = smooth_spatial(&s, 6.0).unwrap();
        for (&a, &b) in out.channel(0).iter().zip(s.channel(0)) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn tiny_fwhm_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 128;
        let left: Vec<f32> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let right: Vec<f32> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = FmriSample::new("s", "i", 0, left, right).unwrap();
        let out = smooth_spatial(&s, 0.1).unwrap();
        for c in 0..2 {
            for (&a, &b) in out.channel(c).iter().zip(s.channel(c)) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    // ---- high-pass ----

    fn series_from_rows(rows: Vec<Vec<f32>>) -> Vec<FmriSample> {
        rows.into_iter()
            .enumerate()
            .map(|(t, row)| {
                FmriSample::new("s", "i", t as u32, row.clone(), row).unwrap()
            })
            .collect()
    }

    /// Independent oracle: least-squares projection onto the same cosine
    /// regressors via explicit normal equations (no orthogonality shortcut).
    fn oracle_dct_residual(column: &[f64], k_max: usize) -> Vec<f64> {
        let n = column.len();
        let basis: Vec<Vec<f64>> = (1..=k_max)
            .map(|k| {
                (0..n)
                    .map(|t| {
                        (std::f64::consts::PI * k as f64 * (2.0 * t as f64 + 1.0)
                            / (2.0 * n as f64))
                            .cos()
                    })
                    .collect()
            })
            .collect();
        // gram is diagonal (n/2) but solve it generically
        let m = basis.len();
        let mut gram = vec![vec![0.0; m]; m];
        let mut rhs = vec![0.0; m];
        for a in 0..m {
            for b in 0..m {
                gram[a][b] = basis[a].iter().zip(&basis[b]).map(|(x, y)| x * y).sum();
            }
            rhs[a] = basis[a].iter().zip(column).map(|(x, y)| x * y).sum();
        }
        // gaussian elimination
        for p in 0..m {
            let pivot = gram[p][p];
            for b in p..m {
                gram[p][b] /= pivot;
            }
            rhs[p] /= pivot;
            for r in 0..m {
                if r != p {
                    let f = gram[r][p];
                    for b in p..m {
                        gram[r][b] -= f * gram[p][b];
                    }
                    rhs[r] -= f * rhs[p];
                }
            }
        }
        let mut out = column.to_vec();
        for (a, b) in basis.iter().enumerate() {
            for (x, c) in out.iter_mut().zip(b) {
                *x -= rhs[a] * c;
            }
        }
        out
    }

    #[test]
    fn linear_drift_is_removed() {
        let n = 200;
        let tr = 2.0;
        let drift: Vec<f64> = (0..n).map(|t| 0.01 * t as f64).collect();
        let rows: Vec<Vec<f32>> = drift.iter().map(|&d| vec![d as f32; 4]).collect();
        let series = series_from_rows(rows);
        let out = highpass_temporal(&series, 128.0, tr).unwrap();

        // drift amplitude via regression onto the centered ramp
        let ramp: Vec<f64> = (0..n).map(|t| t as f64 - (n as f64 - 1.0) / 2.0).collect();
        let ramp_ss: f64 = ramp.iter().map(|r| r * r).sum();
        let slope = |col: &[f64]| -> f64 {
            col.iter().zip(&ramp).map(|(x, r)| x * r).sum::<f64>() / ramp_ss
        };
        let before = slope(&drift);
        let after_col: Vec<f64> = out.iter().map(|s| s.channel(0)[0] as f64).collect();
        let after = slope(&after_col);
        assert!(
            after.abs() <= 0.05 * before.abs(),
            "drift reduced only {before} -> {after}"
        );

        // matches the independent least-squares oracle
        let k_max = 6; // 2*200*2/128 = 6.25
        let oracle = oracle_dct_residual(&drift, k_max);
        for (a, b) in after_col.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }

        // per-vertex means unchanged
        let mean_before: f64 = drift.iter().sum::<f64>() / n as f64;
        let mean_after: f64 = after_col.iter().sum::<f64>() / n as f64;
        assert!((mean_before - mean_after).abs() < 1e-5);
    }

    #[test]
    fn white_noise_passband_preserved() {
        // spectral check against a direct FFT of before/after
        use rustfft::{num_complex::Complex, FftPlanner};
        let n = 256;
        let tr = 2.0;
        let cutoff = 128.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f32>> = noise.iter().map(|&x| vec![x as f32; 2]).collect();
        let series = series_from_rows(rows);
        let out = highpass_temporal(&series, cutoff, tr).unwrap();
        let after: Vec<f64> = out.iter().map(|s| s.channel(0)[0] as f64).collect();

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let spectrum = |x: &[f64]| -> Vec<f64> {
            let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            buf.iter().map(|c| c.norm_sqr()).collect()
        };
        let before_spec = spectrum(&noise);
        let after_spec = spectrum(&after);
        // power above the cutoff frequency
        let f_cut = 1.0 / cutoff;
        let df = 1.0 / (n as f64 * tr);
        let hi_power = |spec: &[f64]| -> f64 {
            (1..=n / 2)
                .filter(|&k| k as f64 * df > f_cut)
                .map(|k| spec[k])
                .sum()
        };
        let before_hi = hi_power(&before_spec);
        let after_hi = hi_power(&after_spec);
        assert!(
            (after_hi - before_hi).abs() <= 0.10 * before_hi,
            "passband power changed: {before_hi} -> {after_hi}"
        );
    }

    #[test]
    fn constant_series_unchanged() {
        let series: Vec<FmriSample> = (0..16).map(|_| constant_sample(4, 2.5)).collect();
        let out = highpass_temporal(&series, 128.0, 2.0).unwrap();
        for (a, b) in out.iter().zip(&series) {
            for c in 0..2 {
                for (&x, &y) in a.channel(c).iter().zip(b.channel(c)) {
                    assert_relative_eq!(x, y, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_time_point_rejected() {
        let series = vec![constant_sample(4, 1.0)];
        assert!(highpass_temporal(&series, 128.0, 2.0).is_err());
    }

    // ---- trial averaging ----

    #[test]
    fn identical_trials_average_to_themselves() {
        let s = constant_sample(32, 1.5);
        let trials: Vec<FmriSample> = (0..10)
            .map(|t| {
                let mut c = s.clone();
                c.trial_index = t;
                c
            })
            .collect();
        let avg = trial_average(&trials).unwrap();
        assert_eq!(avg.trial_index, TRIAL_AVERAGED);
        assert_eq!(avg.channel(0), s.channel(0));
    }

    #[test]
    fn zeros_and_twos_average_to_ones() {
        let a = constant_sample(8, 0.0);
        let b = constant_sample(8, 2.0);
        let avg = trial_average(&[a, b]).unwrap();
        assert!(avg.channel(0).iter().all(|&x| x == 1.0));
        assert!(avg.channel(1).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ten_trial_average_suppresses_noise_variance() {
        // signal + iid N(0, sigma^2): residual variance ~ sigma^2/10
        let v = 4096;
        let sigma = 0.3f64;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0, sigma).unwrap();
        let signal: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trials: Vec<FmriSample> = (0..10)
            .map(|t| {
                let l: Vec<f32> =
                    signal.iter().map(|&s| (s + normal.sample(&mut rng)) as f32).collect();
                let r: Vec<f32> =
                    signal.iter().map(|&s| (s + normal.sample(&mut rng)) as f32).collect();
                FmriSample::new("s", "i", t, l, r).unwrap()
            })
            .collect();
        let avg = trial_average(&trials).unwrap();
        let residual_var: f64 = avg
            .channel(0)
            .iter()
            .zip(&signal)
            .map(|(&a, &s)| (a as f64 - s).powi(2))
            .sum::<f64>()
            / v as f64;
        let expected = sigma * sigma / 10.0;
        assert!(
            (residual_var - expected).abs() <= 0.2 * expected,
            "residual var {residual_var}, expected about {expected}"
        );
    }

    #[test]
    fn mixed_identities_rejected() {
        let a = constant_sample(8, 0.0);
        let mut b = constant_sample(8, 1.0);
        b.image_id = "other".into();
        assert!(trial_average(&[a, b]).is_err());
        assert!(trial_average(&[]).is_err());
    }

    proptest! {
        /// Averaging is permutation-invariant (f64 accumulation).
        #[test]
        fn prop_trial_average_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = 16;
            let trials: Vec<FmriSample> = (0..6).map(|t| {
                let l: Vec<f32> = (0..v).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
                let r: Vec<f32> = (0..v).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
                FmriSample::new("s", "i", t, l, r).unwrap()
            }).collect();
            let mut shuffled = trials.clone();
            shuffled.reverse();
            shuffled.swap(0, 2);
            let a = trial_average(&trials).unwrap();
            let b = trial_average(&shuffled).unwrap();
            for c in 0..2 {
                for (&x, &y) in a.channel(c).iter().zip(b.channel(c)) {
                    prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
                }
            }
        }

        /// Smoothing commutes with channel swap and preserves channel sums.
        #[test]
        fn prop_smooth_swap_and_sums(seed in any::<u64>(), fwhm in 0.5f64..12.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = 64;
            let l: Vec<f32> = (0..v).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
            let r: Vec<f32> = (0..v).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
            let s = FmriSample::new("s", "i", 0, l.clone(), r.clone()).unwrap();
            let swapped = FmriSample::new("s", "i", 0, r, l).unwrap();
            let out = smooth_spatial(&s, fwhm).unwrap();
            let out_swapped = smooth_spatial(&swapped, fwhm).unwrap();
            prop_assert_eq!(out.channel(0), out_swapped.channel(1));
            prop_assert_eq!(out.channel(1), out_swapped.channel(0));
            for c in 0..2 {
                let before: f64 = s.channel(c).iter().map(|&x| x as f64).sum();
                let after: f64 = out.channel(c).iter().map(|&x| x as f64).sum();
                let scale = before.abs().max(1.0);
                prop_assert!((before - after).abs() <= 1e-4 * scale);
            }
        }
    }
}
