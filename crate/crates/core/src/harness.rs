//! Frame-level evaluation and the plain-text dump formats.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetManifest, VideoRecord};
use crate::detector::{self, DetectorError, DetectorParams, Mode};
use crate::spl::SegmentLabelSet;
use crate::stats::VideoSummary;
use crate::vpl::VideoLabelSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: {positives} positive and {negatives} negative labels")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("test video {0} has no ground-truth frame labels")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScoreTrack {
    pub video_id: String,
    pub scores: Vec<f64>,
}

/// Every frame of segment `j` takes that segment's score.
pub fn expand_scores(segment_scores: &[f64], frames_per_segment: usize) -> Vec<f64> {
    segment_scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, frames_per_segment))
        .collect()
}

/// Rank-based ROC AUC (Mann-Whitney U) with tied scores sharing their mean
/// rank, which gives half credit to tied positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = idx[i..j].iter().filter(|&&k| labels[k] != 0).count();
        pos_rank_sum += mean_rank * tied_pos as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub num_pos: usize,
    pub num_neg: usize,
    pub tracks: Option<Vec<FrameScoreTrack>>,
}

/// Eval-mode segment scores for one video.
pub fn score_video(model: &DetectorParams, video: &VideoRecord) -> Result<Vec<f64>, DetectorError> {
    detector::forward(model, video.features(), Mode::Eval)
}

/// Scores every test segment, expands to frames, concatenates all videos in
/// manifest order and computes the micro-averaged frame AUC.
pub fn evaluate_model(model: &DetectorParams, test: &DatasetManifest, keep_tracks: bool) -> Result<EvalResult, EvalError> {
    let wide = model.wide();
    evaluate_with(test, keep_tracks, |v| {
        detector::forward_wide(&model.layout, &wide, v.features(), Mode::Eval)
    })
}

/// [`evaluate_model`] with an arbitrary per-video segment scorer.
pub fn evaluate_with<F>(test: &DatasetManifest, keep_tracks: bool, scorer: F) -> Result<EvalResult, EvalError>
where
    F: Fn(&VideoRecord) -> Result<Vec<f64>, DetectorError> + Sync,
{
    for v in &test.videos {
        if v.gt_frame_labels.is_none() {
            return Err(EvalError::MissingGroundTruth(v.video_id.clone()));
        }
    }
    let per_video: Vec<Vec<f64>> = test
        .videos
        .par_iter()
        .map(|v| scorer(v).map(|s| expand_scores(&s, v.frames_per_segment)))
        .collect::<Result<_, _>>()?;

    let scores: Vec<f64> = per_video.iter().flatten().copied().collect();
    let labels: Vec<u8> = test
        .videos
        .iter()
        .flat_map(|v| v.gt_frame_labels.as_deref().unwrap_or_default().iter().copied())
        .collect();
    let auc = roc_auc(&scores, &labels)?;
    let num_pos = labels.iter().filter(|&&l| l != 0).count();
    let tracks = keep_tracks.then(|| {
        test.videos
            .iter()
            .zip(per_video)
            .map(|(v, scores)| FrameScoreTrack {
                video_id: v.video_id.clone(),
                scores,
            })
            .collect()
    });
    Ok(EvalResult {
        auc,
        num_pos,
        num_neg: labels.len() - num_pos,
        tracks,
    })
}

/// `video_id<TAB>yhat` lines.
pub fn format_video_labels(labels: &VideoLabelSet) -> String {
    let mut s = String::new();
    for (id, y) in &labels.labels {
        let _ = writeln!(s, "{id}\t{y}");
    }
    s
}

/// `video_id<TAB>b,b,b,...` lines.
pub fn format_segment_labels(labels: &SegmentLabelSet) -> String {
    let mut s = String::new();
    for (id, bits) in &labels.labels {
        let joined: Vec<String> = bits.iter().map(u8::to_string).collect();
        let _ = writeln!(s, "{id}\t{}", joined.join(","));
    }
    s
}

/// `video_id<TAB>sigma<TAB>entropy` lines under a header.
pub fn format_summaries(summaries: &[VideoSummary]) -> String {
    let mut s = String::from("#video_id\tsigma\tentropy\n");
    for v in summaries {
        let _ = writeln!(s, "{}\t{}\t{}", v.video_id, v.sigma, v.entropy);
    }
    s
}

/// `video_id<TAB>s,s,s,...` frame-score lines.
pub fn format_tracks(tracks: &[FrameScoreTrack]) -> String {
    let mut s = String::new();
    for t in tracks {
        let joined: Vec<String> = t.scores.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}\t{}", t.video_id, joined.join(","));
    }
    s
}
