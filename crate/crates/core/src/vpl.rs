//! Video-level pseudo-labels: a two-component Gaussian mixture over the
//! per-video `[sigma, entropy]` summaries, with the higher mean-entropy cluster
//! declared anomalous (`1`) and the other normal (`0`).

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::dataset::VideoRecord;
use crate::rng;
use crate::stats::{self, StatsError, VideoSummary};

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-6;
/// Diagonal regulariser, relative to half the covariance trace.
pub const COV_REGULARIZATION: f64 = 1e-6;
const ABS_COV_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum VplError {
    #[error("need at least 2 videos to cluster, got {0}")]
    TooFewPoints(usize),
    #[error("video {video_id}: {source}")]
    Stats {
        video_id: String,
        #[source]
        source: StatsError,
    },
}

type Vec2 = [f64; 2];
type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub mean: Vec2,
    pub cov: Mat2,
    pub weight: f64,
}

/// Two-component GMM fitted in standardised coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm2 {
    pub components: [Component; 2],
    /// Per-coordinate `(mean, std)` used to standardise inputs.
    pub scaler: [(f64, f64); 2],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

fn det(c: &Mat2) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

fn log_gaussian(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    let d = det(cov);
    let dx = [x[0] - mean[0], x[1] - mean[1]];
    // inverse of a 2x2 applied as a quadratic form
    let q = (cov[1][1] * dx[0] * dx[0] - 2.0 * cov[0][1] * dx[0] * dx[1] + cov[0][0] * dx[1] * dx[1]) / d;
    -0.5 * q - 0.5 * d.ln() - std::f64::consts::TAU.ln()
}

fn regularize(mut cov: Mat2) -> Mat2 {
    let sym = 0.5 * (cov[0][1] + cov[1][0]);
    cov[0][1] = sym;
    cov[1][0] = sym;
    let eps = (COV_REGULARIZATION * (cov[0][0] + cov[1][1]) / 2.0).max(ABS_COV_FLOOR);
    cov[0][0] += eps;
    cov[1][1] += eps;
    cov
}

impl Gmm2 {
    pub fn standardize(&self, p: &Vec2) -> Vec2 {
        [
            (p[0] - self.scaler[0].0) / self.scaler[0].1,
            (p[1] - self.scaler[1].0) / self.scaler[1].1,
        ]
    }

    /// Posterior responsibilities of both components for a raw point.
    pub fn responsibilities(&self, p: &Vec2) -> [f64; 2] {
        let x = self.standardize(p);
        let l = self
            .components
            .map(|c| c.weight.ln() + log_gaussian(&x, &c.mean, &c.cov));
        let top = l[0].max(l[1]);
        let e = [(l[0] - top).exp(), (l[1] - top).exp()];
        let s = e[0] + e[1];
        [e[0] / s, e[1] / s]
    }

    /// Index of the max-responsibility component; ties go to component 0.
    pub fn assign(&self, p: &Vec2) -> usize {
        if self.degenerate {
            return 0;
        }
        let r = self.responsibilities(p);
        usize::from(r[1] > r[0])
    }

    /// The same mixture with component indices exchanged.
    pub fn swapped(&self) -> Self {
        let mut g = self.clone();
        g.components.swap(0, 1);
        g
    }
}

/// Fits a two-component GMM by EM.
///
/// Coordinates are standardised first. The first centre is a seeded uniform
/// pick, the second the point farthest from it; both components start from
/// the pooled covariance with equal weights. EM stops once the total
/// log-likelihood improves by less than [`TOLERANCE`] or after
/// [`MAX_ITERATIONS`].
pub fn fit_gmm2(points: &[Vec2], seed: u64) -> Result<Gmm2, VplError> {
    let n = points.len();
    if n < 2 {
        return Err(VplError::TooFewPoints(n));
    }
    let mut scaler = [(0.0, 1.0); 2];
    for (c, s) in scaler.iter_mut().enumerate() {
        let mean = points.iter().map(|p| p[c]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        *s = (mean, if std > 0.0 { std } else { 1.0 });
    }

    let first = points[0];
    if points.iter().all(|p| *p == first) {
        warn!("all {n} clustering points are identical; GMM fit is degenerate");
        let comp = Component {
            mean: [0.0, 0.0],
            cov: regularize([[0.0; 2]; 2]),
            weight: 0.5,
        };
        return Ok(Gmm2 {
            components: [comp, comp],
            scaler,
            log_likelihood: f64::NAN,
            iterations: 0,
            degenerate: true,
        });
    }

    let xs: Vec<Vec2> = points
        .iter()
        .map(|p| [(p[0] - scaler[0].0) / scaler[0].1, (p[1] - scaler[1].0) / scaler[1].1])
        .collect();

    let mut pick = rng::stream(&[seed, rng::tag::GMM]);
    let a = pick.random_range(0..n);
    let dist = |i: usize| (xs[i][0] - xs[a][0]).powi(2) + (xs[i][1] - xs[a][1]).powi(2);
    let b = (0..n).fold(a, |best, i| if dist(i) > dist(best) { i } else { best });

    let pooled = weighted_cov(&xs, &vec![1.0; n], &[0.0, 0.0]);
    let mut comps = [xs[a], xs[b]].map(|mean| Component {
        mean,
        cov: regularize(pooled),
        weight: 0.5,
    });

    let mut resp = vec![[0.0f64; 2]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        ll = 0.0;
        for (x, r) in xs.iter().zip(resp.iter_mut()) {
            let l = comps.map(|c| c.weight.ln() + log_gaussian(x, &c.mean, &c.cov));
            let top = l[0].max(l[1]);
            let e = [(l[0] - top).exp(), (l[1] - top).exp()];
            let s = e[0] + e[1];
            *r = [e[0] / s, e[1] / s];
            ll += top + s.ln();
        }

        for (k, comp) in comps.iter_mut().enumerate() {
            let w: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let nk: f64 = w.iter().sum();
            if nk < 1e-10 {
                // starved component keeps its shape
                comp.weight = 1e-12;
                continue;
            }
            let mean = [
                xs.iter().zip(&w).map(|(x, wi)| wi * x[0]).sum::<f64>() / nk,
                xs.iter().zip(&w).map(|(x, wi)| wi * x[1]).sum::<f64>() / nk,
            ];
            comp.mean = mean;
            comp.cov = regularize(weighted_cov(&xs, &w, &mean));
            comp.weight = nk / n as f64;
        }
        let total = comps[0].weight + comps[1].weight;
        comps.iter_mut().for_each(|c| c.weight /= total);

        if ll - prev_ll < TOLERANCE {
            break;
        }
        prev_ll = ll;
    }

    Ok(Gmm2 {
        components: comps,
        scaler,
        log_likelihood: ll,
        iterations,
        degenerate: false,
    })
}

fn weighted_cov(xs: &[Vec2], w: &[f64], mean: &Vec2) -> Mat2 {
    let total: f64 = w.iter().sum();
    let mut c = [[0.0; 2]; 2];
    for (x, &wi) in xs.iter().zip(w) {
        let d = [x[0] - mean[0], x[1] - mean[1]];
        c[0][0] += wi * d[0] * d[0];
        c[0][1] += wi * d[0] * d[1];
        c[1][1] += wi * d[1] * d[1];
    }
    c[1][0] = c[0][1];
    c.iter_mut().flatten().for_each(|v| *v /= total);
    c
}

/// Video-level pseudo-labels keyed by video id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VideoLabelSet {
    pub labels: BTreeMap<String, u8>,
}

impl VideoLabelSet {
    pub fn get(&self, video_id: &str) -> Option<u8> {
        self.labels.get(video_id).copied()
    }

    pub fn num_anomalous(&self) -> usize {
        self.labels.values().filter(|&&y| y == 1).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Assigns each video to its max-responsibility component and labels the
/// component with the larger mean entropy anomalous.
///
/// Equal mean entropies make the smaller cluster anomalous; if the clusters
/// are also the same size, the cluster that does not hold the smallest video
/// id is picked. A degenerate fit or an empty cluster labels everything normal.
pub fn assign_video_labels(gmm: &Gmm2, summaries: &[VideoSummary]) -> VideoLabelSet {
    let all_normal = || VideoLabelSet {
        labels: summaries.iter().map(|s| (s.video_id.clone(), 0)).collect(),
    };
    if gmm.degenerate {
        warn!("degenerate GMM fit: all {} videos labelled normal", summaries.len());
        return all_normal();
    }

    let assignment: Vec<usize> = summaries.iter().map(|s| gmm.assign(&s.point())).collect();
    let mut count = [0usize; 2];
    let mut entropy_sum = [0.0f64; 2];
    let mut min_id: [Option<&str>; 2] = [None, None];
    for (s, &k) in summaries.iter().zip(&assignment) {
        count[k] += 1;
        entropy_sum[k] += s.entropy;
        if min_id[k].is_none_or(|m| s.video_id.as_str() < m) {
            min_id[k] = Some(&s.video_id);
        }
    }
    if count[0] == 0 || count[1] == 0 {
        warn!("GMM placed every video in one cluster: all labelled normal");
        return all_normal();
    }

    let mean = [entropy_sum[0] / count[0] as f64, entropy_sum[1] / count[1] as f64];
    let anomalous = if mean[0] != mean[1] {
        usize::from(mean[1] > mean[0])
    } else if count[0] != count[1] {
        usize::from(count[1] < count[0])
    } else {
        usize::from(min_id[0] < min_id[1])
    };

    VideoLabelSet {
        labels: summaries
            .iter()
            .zip(&assignment)
            .map(|(s, &k)| (s.video_id.clone(), u8::from(k == anomalous)))
            .collect(),
    }
}

/// Outcome of the full video-level stage for one participant.
#[derive(Debug, Clone)]
pub struct VplOutcome {
    pub labels: VideoLabelSet,
    pub summaries: Vec<VideoSummary>,
    pub gmm: Gmm2,
}

/// Summaries, clustering and labelling for a set of videos. Videos are
/// processed in video-id order so the result does not depend on input order.
pub fn video_pseudo_labels<'a>(
    videos: impl IntoIterator<Item = &'a VideoRecord>,
    seed: u64,
) -> Result<VplOutcome, VplError> {
    let mut sorted: Vec<&VideoRecord> = videos.into_iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let summaries = sorted
        .iter()
        .map(|v| {
            stats::summarize_video(v).map_err(|source| VplError::Stats {
                video_id: v.video_id.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let points: Vec<Vec2> = summaries.iter().map(VideoSummary::point).collect();
    let gmm = fit_gmm2(&points, seed)?;
    let labels = assign_video_labels(&gmm, &summaries);
    Ok(VplOutcome {
        labels,
        summaries,
        gmm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n_each: usize, noise: f64, seed: u64) -> (Vec<Vec2>, Vec<usize>) {
        let mut r = rng::stream(&[seed]);
        let mut pts = Vec::new();
        let mut ids = Vec::new();
        for (blob, centre) in [[0.0, 0.0], [10.0, 10.0]].iter().enumerate() {
            for _ in 0..n_each {
                let dx: f64 = StandardNormal.sample(&mut r);
                let dy: f64 = StandardNormal.sample(&mut r);
                pts.push([centre[0] + noise * dx, centre[1] + noise * dy]);
                ids.push(blob);
            }
        }
        (pts, ids)
    }

    fn summary(id: &str, sigma: f64, entropy: f64) -> VideoSummary {
        VideoSummary {
            video_id: id.into(),
            sigma,
            entropy,
        }
    }

    #[test]
    fn separates_two_blobs_perfectly() {
        let (pts, truth) = blobs(50, 0.1, 3);
        let g = fit_gmm2(&pts, 1).unwrap();
        assert!(!g.degenerate);
        let pred: Vec<usize> = pts.iter().map(|p| g.assign(p)).collect();
        let agree = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(agree == 100 || agree == 0, "agreement {agree}");
        let w = g.components[0].weight + g.components[1].weight;
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let g = fit_gmm2(&[[1.0, 2.0]; 5], 0).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.assign(&[1.0, 2.0]), 0);
        let labels = assign_video_labels(&g, &[summary("a", 1.0, 2.0), summary("b", 1.0, 2.0)]);
        assert_eq!(labels.num_anomalous(), 0);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(matches!(fit_gmm2(&[[0.0, 0.0]], 0), Err(VplError::TooFewPoints(1))));
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let (pts, _) = blobs(30, 1.5, 9);
        let a = fit_gmm2(&pts, 42).unwrap();
        let b = fit_gmm2(&pts, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
    }

    #[test]
    fn higher_mean_entropy_cluster_is_anomalous() {
        let s = vec![
            summary("a", 0.0, 5.0),
            summary("b", 0.01, 5.0),
            summary("c", 0.02, 5.0),
            summary("d", 10.03, 2.0),
            summary("e", 10.04, 2.0),
            summary("f", 10.05, 2.0),
        ];
        let pts: Vec<Vec2> = s.iter().map(VideoSummary::point).collect();
        let g = fit_gmm2(&pts, 0).unwrap();
        let labels = assign_video_labels(&g, &s);
        for id in ["a", "b", "c"] {
            assert_eq!(labels.get(id), Some(1));
        }
        for id in ["d", "e", "f"] {
            assert_eq!(labels.get(id), Some(0));
        }
        assert_eq!(assign_video_labels(&g.swapped(), &s), labels);
    }

    #[test]
    fn entropy_tie_makes_smaller_cluster_anomalous() {
        let pts: Vec<Vec2> = vec![[0.0, 1.0], [0.01, 1.0], [0.02, 1.0], [10.0, 1.0], [10.01, 1.0]];
        let g = fit_gmm2(&pts, 0).unwrap();
        let s: Vec<VideoSummary> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| summary(&format!("v{i}"), p[0], p[1]))
            .collect();
        let labels = assign_video_labels(&g, &s);
        assert_eq!(labels.num_anomalous(), 2);
        assert_eq!(labels.get("v3"), Some(1));
        assert_eq!(labels.get("v4"), Some(1));
        assert_eq!(assign_video_labels(&g.swapped(), &s), labels);
    }
}
