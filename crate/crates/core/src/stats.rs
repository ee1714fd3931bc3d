//! Per-video statistical summary `[sigma, entropy]`.
//!
//! `sigma` is the sample standard deviation of consecutive differences of
//! segment feature norms. `entropy` is `-sum(l * ln l)` over the singular values
//! of the mean-centred sample covariance of the segment features (divisor
//! `m - 1`, natural log, no trace normalisation).

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::dataset::VideoRecord;

/// Relative floor below which a singular value counts as zero.
pub const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 segments for magnitude statistics, got {0}")]
    InsufficientSegments(usize),
    #[error("feature matrix length {len} is not a multiple of dimension {dim}")]
    BadShape { len: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSummary {
    pub video_id: String,
    pub sigma: f64,
    pub entropy: f64,
}

impl VideoSummary {
    pub fn point(&self) -> [f64; 2] {
        [self.sigma, self.entropy]
    }
}

/// Entropy value plus a flag for inputs where the covariance is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub value: f64,
    pub degenerate: bool,
}

fn rows(features: &[f32], dim: usize) -> Result<usize, StatsError> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(StatsError::BadShape {
            len: features.len(),
            dim,
        });
    }
    Ok(features.len() / dim)
}

pub fn segment_norms(features: &[f32], dim: usize) -> Vec<f64> {
    features
        .chunks_exact(dim)
        .map(|row| row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
        .collect()
}

/// Mean and standard deviation of `||f_j|| - ||f_{j+1}||` over `j`.
///
/// The mean uses divisor `m - 1` and the deviation divisor `m - 2`. With exactly
/// two segments the deviation is reported as 0.
pub fn magnitude_diff_stats(features: &[f32], dim: usize) -> Result<(f64, f64), StatsError> {
    let m = rows(features, dim)?;
    magnitude_diff_stats_from_norms(&segment_norms(features, dim)).map_err(|e| match e {
        StatsError::InsufficientSegments(_) => StatsError::InsufficientSegments(m),
        other => other,
    })
}

pub fn magnitude_diff_stats_from_norms(norms: &[f64]) -> Result<(f64, f64), StatsError> {
    let m = norms.len();
    if m < 2 {
        return Err(StatsError::InsufficientSegments(m));
    }
    let diffs: Vec<f64> = norms.windows(2).map(|w| w[0] - w[1]).collect();
    let mu = diffs.iter().sum::<f64>() / (m - 1) as f64;
    if m == 2 {
        warn!("only two segments: magnitude deviation defaults to 0");
        return Ok((mu, 0.0));
    }
    let ss: f64 = diffs.iter().map(|d| (d - mu) * (d - mu)).sum();
    Ok((mu, (ss / (m - 2) as f64).sqrt()))
}

fn centered(features: &[f32], dim: usize, m: usize) -> DMatrix<f64> {
    let mut x = DMatrix::<f64>::from_row_iterator(m, dim, features.iter().map(|&v| f64::from(v)));
    for mut col in x.column_iter_mut() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            // exact zero: the rounded mean of equal values can miss by an ulp
            col.fill(0.0);
            continue;
        }
        let mean = col.sum() / m as f64;
        col.add_scalar_mut(-mean);
    }
    x
}

/// `-sum(l ln l)` with eigenvalues below the relative floor treated as zero.
pub fn spectral_entropy(eigenvalues: impl IntoIterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = eigenvalues.into_iter().map(f64::abs).collect();
    let max = vals.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let floor = SPECTRUM_FLOOR * max;
    -vals
        .iter()
        .filter(|&&l| l > floor)
        .map(|&l| l * l.ln())
        .sum::<f64>()
}

fn symmetric_spectrum(mut a: DMatrix<f64>) -> Vec<f64> {
    // Symmetrise away accumulated rounding before the eigen solve.
    let t = a.transpose();
    a += t;
    a *= 0.5;
    SymmetricEigen::new(a).eigenvalues.iter().copied().collect()
}

/// Entropy via the `d x d` covariance matrix.
pub fn entropy_via_covariance(features: &[f32], dim: usize) -> Result<Entropy, StatsError> {
    let m = rows(features, dim)?;
    if m < 2 {
        return Ok(Entropy { value: 0.0, degenerate: true });
    }
    let x = centered(features, dim, m);
    let cov = x.tr_mul(&x) / (m - 1) as f64;
    Ok(Entropy {
        value: spectral_entropy(symmetric_spectrum(cov)),
        degenerate: false,
    })
}

/// Entropy via the `m x m` Gram matrix of centred features, which has the
/// same non-zero spectrum as the covariance.
pub fn entropy_via_gram(features: &[f32], dim: usize) -> Result<Entropy, StatsError> {
    let m = rows(features, dim)?;
    if m < 2 {
        return Ok(Entropy { value: 0.0, degenerate: true });
    }
    let x = centered(features, dim, m);
    let gram = &x * x.transpose() / (m - 1) as f64;
    Ok(Entropy {
        value: spectral_entropy(symmetric_spectrum(gram)),
        degenerate: false,
    })
}

/// Covariance entropy, routed through whichever of the Gram or covariance
/// matrices is smaller. A single segment yields 0 with the degenerate flag.
pub fn covariance_entropy(features: &[f32], dim: usize) -> Result<Entropy, StatsError> {
    let m = rows(features, dim)?;
    if m < dim {
        entropy_via_gram(features, dim)
    } else {
        entropy_via_covariance(features, dim)
    }
}

pub fn summarize_video(record: &VideoRecord) -> Result<VideoSummary, StatsError> {
    let (_, sigma) = magnitude_diff_stats(record.features(), record.dim())?;
    let entropy = covariance_entropy(record.features(), record.dim())?;
    Ok(VideoSummary {
        video_id: record.video_id.clone(),
        sigma,
        entropy: entropy.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Rows `scale * e_k` placed so every row has the requested norm.
    fn rows_with_norms(norms: &[f64], dim: usize) -> Vec<f32> {
        norms
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| {
                let mut row = vec![0.0f32; dim];
                row[j % dim] = n as f32;
                row
            })
            .collect()
    }

    #[test]
    fn constant_magnitude_gives_zero_stats() {
        let f = rows_with_norms(&[5.0; 6], 3);
        assert_eq!(magnitude_diff_stats(&f, 3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn doubling_magnitudes_match_hand_values() {
        // diffs -1, -2, -4: mean -7/3, squared deviations 16/9 + 1/9 + 25/9 = 42/9, / 2.
        let f = rows_with_norms(&[1.0, 2.0, 4.0, 8.0], 4);
        let (mu, sigma) = magnitude_diff_stats(&f, 4).unwrap();
        assert!((mu + 7.0 / 3.0).abs() < 1e-12);
        assert!((sigma - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((sigma - 1.52753).abs() < 1e-5);
    }

    #[test]
    fn two_segments_fall_back_to_zero_sigma() {
        let f = rows_with_norms(&[1.0, 3.0], 2);
        assert_eq!(magnitude_diff_stats(&f, 2).unwrap(), (-2.0, 0.0));
    }

    #[test]
    fn single_segment_is_an_error() {
        let f = rows_with_norms(&[1.0], 2);
        assert_eq!(magnitude_diff_stats(&f, 2), Err(StatsError::InsufficientSegments(1)));
        let e = covariance_entropy(&f, 2).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn identical_segments_have_zero_entropy() {
        let row = [0.3f32, -1.2, 4.0, 2.5];
        let f: Vec<f32> = row.iter().cycle().take(4 * 7).copied().collect();
        assert_eq!(covariance_entropy(&f, 4).unwrap().value, 0.0);
        assert_eq!(entropy_via_covariance(&f, 4).unwrap().value, 0.0);
    }

    #[test]
    fn half_identity_covariance_gives_ln2() {
        // Four points (+-a, 0), (0, +-a): mean 0, cov = diag(2a^2/3, 2a^2/3).
        // a^2 = 0.75 makes the covariance diag(0.5, 0.5).
        let a = 0.75f64.sqrt() as f32;
        let f = vec![a, 0.0, -a, 0.0, 0.0, a, 0.0, -a];
        let h = covariance_entropy(&f, 2).unwrap().value;
        assert!((h - std::f64::consts::LN_2).abs() < 1e-6, "{h}");
        // independent check of -sum l ln l for two eigenvalues of 0.5
        assert!((-2.0 * 0.5 * 0.5f64.ln() - std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        use rand::Rng;
        let mut r = crate::rng::stream(&[11]);
        for (m, d) in [(5, 12), (12, 5), (9, 9), (30, 64)] {
            let f: Vec<f32> = (0..m * d).map(|_| r.random_range(0.0f32..0.4)).collect();
            let g = entropy_via_gram(&f, d).unwrap().value;
            let c = entropy_via_covariance(&f, d).unwrap().value;
            assert!(rel(g, c) < 1e-6, "m={m} d={d}: {g} vs {c}");
        }
    }

    #[test]
    fn summary_composes_both_statistics() {
        let f = rows_with_norms(&[1.0, 2.0, 4.0, 8.0], 4);
        let rec = VideoRecord::new("v", f.clone(), 4, 1).unwrap();
        let s = summarize_video(&rec).unwrap();
        assert_eq!(s.sigma, magnitude_diff_stats(&f, 4).unwrap().1);
        assert_eq!(s.entropy, covariance_entropy(&f, 4).unwrap().value);

        let flat = VideoRecord::new("c", vec![1.5; 12], 3, 1).unwrap();
        let s = summarize_video(&flat).unwrap();
        assert_eq!((s.sigma, s.entropy), (0.0, 0.0));
    }
}
