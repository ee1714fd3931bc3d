//! Segment-level pseudo-labels.
//!
//! Each participant fits a scalar Gaussian null model to the feature norms
//! `z = ||f||` of segments in its pseudo-normal videos. The server pools those
//! models into a mixture weighted by normal-segment counts. Inside every
//! pseudo-anomalous video the window of `ceil(beta * m)` segments with the
//! lowest mean mixture density becomes the anomalous region ([`spl_generate`]).
//! Later the model's own confidence scores refine those windows
//! ([`spl_update`]).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::VideoRecord;
use crate::stats::segment_norms;
use crate::vpl::VideoLabelSet;

pub const THETA_FLOOR: f64 = 1e-9;
/// Bytes of one `(gamma: f64, theta: f64, m0: u64)` upload.
pub const NULL_MODEL_WIRE_BYTES: usize = 24;

#[derive(Debug, Error, PartialEq)]
pub enum SplError {
    #[error("no null model: {0} normal segments (need at least 2)")]
    NoNullModel(usize),
    #[error("cannot build a mixture from zero components")]
    EmptyMixture,
    #[error("beta must lie in (0, 1], got {0}")]
    BadBeta(f64),
    #[error("weak label for unknown video {0}")]
    UnknownVideo(String),
    #[error("length mismatch: labels {labels}, scores {scores}")]
    LengthMismatch { labels: usize, scores: usize },
}

/// Scalar Gaussian over segment norms of pseudo-normal videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullGaussian {
    pub gamma: f64,
    /// Variance.
    pub theta: f64,
    pub m0: u64,
}

impl NullGaussian {
    pub fn from_norms(z: &[f64]) -> Result<Self, SplError> {
        let m0 = z.len();
        if m0 < 2 {
            return Err(SplError::NoNullModel(m0));
        }
        let gamma = z.iter().sum::<f64>() / m0 as f64;
        let theta = z.iter().map(|v| (v - gamma) * (v - gamma)).sum::<f64>() / (m0 - 1) as f64;
        Ok(Self {
            gamma,
            theta: theta.max(THETA_FLOOR),
            m0: m0 as u64,
        })
    }

    pub fn to_wire(&self) -> [u8; NULL_MODEL_WIRE_BYTES] {
        let mut out = [0u8; NULL_MODEL_WIRE_BYTES];
        out[..8].copy_from_slice(&self.gamma.to_le_bytes());
        out[8..16].copy_from_slice(&self.theta.to_le_bytes());
        out[16..].copy_from_slice(&self.m0.to_le_bytes());
        out
    }

    pub fn from_wire(bytes: &[u8; NULL_MODEL_WIRE_BYTES]) -> Self {
        let word = |i: usize| <[u8; 8]>::try_from(&bytes[i..i + 8]).unwrap();
        Self {
            gamma: f64::from_le_bytes(word(0)),
            theta: f64::from_le_bytes(word(8)),
            m0: u64::from_le_bytes(word(16)),
        }
    }
}

/// Fits the null model over all segments of videos with `yhat = 0`.
pub fn fit_null_gaussian<'a>(
    videos: impl IntoIterator<Item = &'a VideoRecord>,
    labels: &VideoLabelSet,
) -> Result<NullGaussian, SplError> {
    let z: Vec<f64> = videos
        .into_iter()
        .filter(|v| labels.get(&v.video_id) == Some(0))
        .flat_map(|v| segment_norms(v.features(), v.dim()))
        .collect();
    NullGaussian::from_norms(&z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerMixture {
    /// `(gamma, theta)` per component.
    pub components: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

/// One component per participant, weighted by its normal-segment count.
pub fn build_mixture(parts: &[NullGaussian]) -> Result<ServerMixture, SplError> {
    if parts.is_empty() {
        return Err(SplError::EmptyMixture);
    }
    let total: u64 = parts.iter().map(|p| p.m0).sum();
    Ok(ServerMixture {
        components: parts.iter().map(|p| (p.gamma, p.theta)).collect(),
        weights: parts.iter().map(|p| p.m0 as f64 / total as f64).collect(),
    })
}

pub fn gaussian_density(z: f64, mean: f64, var: f64) -> f64 {
    let d = z - mean;
    (-0.5 * d * d / var).exp() / (std::f64::consts::TAU * var).sqrt()
}

/// Mixture density at `z`, used as the normality score of a segment.
pub fn mixture_density(mix: &ServerMixture, z: f64) -> f64 {
    mix.components
        .iter()
        .zip(&mix.weights)
        .map(|(&(g, t), &w)| w * gaussian_density(z, g, t))
        .sum()
}

pub fn window_len(beta: f64, m: usize) -> usize {
    ((beta * m as f64).ceil() as usize).clamp(1, m)
}

fn check_beta(beta: f64) -> Result<(), SplError> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(SplError::BadBeta(beta))
    }
}

/// Start of the length-`w` window with the smallest sum (`lowest = true`) or
/// largest sum. Ties go to the smallest start.
pub fn best_window(values: &[f64], w: usize, lowest: bool) -> usize {
    let mut best = 0;
    let mut best_sum = f64::NAN;
    for (l, win) in values.windows(w).enumerate() {
        let s: f64 = win.iter().sum();
        let better = if lowest { s < best_sum } else { s > best_sum };
        if l == 0 || better {
            best = l;
            best_sum = s;
        }
    }
    best
}

fn window_mask(m: usize, start: usize, w: usize) -> Vec<u8> {
    (0..m).map(|j| u8::from((start..start + w).contains(&j))).collect()
}

/// Segment labels for one video from per-segment normality scores.
pub fn spl_generate_from_scores(p: &[f64], yhat: u8, beta: f64) -> Result<Vec<u8>, SplError> {
    check_beta(beta)?;
    let m = p.len();
    if yhat == 0 || m == 0 {
        return Ok(vec![0; m]);
    }
    let w = window_len(beta, m);
    Ok(window_mask(m, best_window(p, w, true), w))
}

/// Mode I: all zeros for a normal video, otherwise one window of
/// `ceil(beta * m)` ones where the mean mixture density is lowest.
pub fn spl_generate(video: &VideoRecord, yhat: u8, mix: &ServerMixture, beta: f64) -> Result<Vec<u8>, SplError> {
    check_beta(beta)?;
    if yhat == 0 {
        return Ok(vec![0; video.num_segments()]);
    }
    let p: Vec<f64> = segment_norms(video.features(), video.dim())
        .into_iter()
        .map(|z| mixture_density(mix, z))
        .collect();
    spl_generate_from_scores(&p, yhat, beta)
}

/// Mode II: finds the highest-confidence window `qt` and merges it with the
/// current labels. Overlap keeps only the intersection; otherwise the union.
pub fn spl_update(old: &[u8], scores: &[f64], beta: f64) -> Result<Vec<u8>, SplError> {
    check_beta(beta)?;
    if old.len() != scores.len() {
        return Err(SplError::LengthMismatch {
            labels: old.len(),
            scores: scores.len(),
        });
    }
    let m = old.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let w = window_len(beta, m);
    let qt = window_mask(m, best_window(scores, w, false), w);
    let overlaps = old.iter().zip(&qt).any(|(&y, &q)| y != 0 && q != 0);
    Ok(old
        .iter()
        .zip(&qt)
        .map(|(&y, &q)| {
            if overlaps {
                u8::from(y != 0 && q != 0)
            } else {
                u8::from(y != 0 || q != 0)
            }
        })
        .collect())
}

/// Segment labels keyed by video id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentLabelSet {
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl SegmentLabelSet {
    pub fn get(&self, video_id: &str) -> Option<&[u8]> {
        self.labels.get(video_id).map(Vec::as_slice)
    }

    pub fn num_positive(&self) -> usize {
        self.labels.values().flatten().filter(|&&b| b == 1).count()
    }
}

/// Per-segment confidence scores keyed by video id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidenceScores {
    pub scores: BTreeMap<String, Vec<f64>>,
}

/// Mode I applied to every video.
pub fn generate_all<'a>(
    videos: impl IntoIterator<Item = &'a VideoRecord>,
    vlabels: &VideoLabelSet,
    mix: &ServerMixture,
    beta: f64,
) -> Result<SegmentLabelSet, SplError> {
    let mut labels = BTreeMap::new();
    for v in videos {
        let yhat = vlabels.get(&v.video_id).unwrap_or(0);
        labels.insert(v.video_id.clone(), spl_generate(v, yhat, mix, beta)?);
    }
    Ok(SegmentLabelSet { labels })
}

/// Mode II over a label set. With `all_videos = false` only videos with
/// `yhat = 1` are refined.
pub fn update_all(
    labels: &SegmentLabelSet,
    vlabels: &VideoLabelSet,
    q: &ConfidenceScores,
    beta: f64,
    all_videos: bool,
) -> Result<SegmentLabelSet, SplError> {
    let mut out = labels.clone();
    for (id, seg) in out.labels.iter_mut() {
        if !all_videos && vlabels.get(id) != Some(1) {
            continue;
        }
        if let Some(scores) = q.scores.get(id) {
            *seg = spl_update(seg, scores, beta)?;
        }
    }
    Ok(out)
}

/// Overrides pseudo-labels with known weak video labels. Weakly normal videos
/// become all-zero; weakly anomalous videos keep non-empty segment labels or
/// get a freshly generated window.
pub fn correct_with_weak_labels<'a>(
    labels: &SegmentLabelSet,
    vlabels: &VideoLabelSet,
    weak: &BTreeMap<String, u8>,
    videos: impl IntoIterator<Item = &'a VideoRecord>,
    mix: &ServerMixture,
    beta: f64,
) -> Result<(SegmentLabelSet, VideoLabelSet), SplError> {
    let by_id: BTreeMap<&str, &VideoRecord> = videos.into_iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut seg = labels.clone();
    let mut vid = vlabels.clone();
    for (id, &w) in weak {
        let video = by_id.get(id.as_str()).ok_or_else(|| SplError::UnknownVideo(id.clone()))?;
        let current = seg
            .labels
            .get_mut(id)
            .ok_or_else(|| SplError::UnknownVideo(id.clone()))?;
        vid.labels.insert(id.clone(), w);
        if w == 0 {
            current.iter_mut().for_each(|b| *b = 0);
        } else if current.iter().all(|&b| b == 0) {
            *current = spl_generate(video, 1, mix, beta)?;
        }
    }
    Ok((seg, vid))
}
