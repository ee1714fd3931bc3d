//! Feature-level datasets: in-memory records, the on-disk manifest format and
//! the synthetic benchmark generator.
//!
//! On disk a dataset is a manifest plus one raw feature file per video
//! (`m * d` little-endian `f32`, row-major, no header) and an optional ground
//! truth file (`m * r` bytes, one 0/1 byte per frame). The manifest starts with
//! `#fedvad-manifest v1 d=<dim>` followed by one tab-separated record per video:
//!
//! ```text
//! video_id  feature_path  m  r  event  scene  weak  gt_path
//! ```
//!
//! Absent optionals are written as `-`. Paths are resolved relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng;

pub const MANIFEST_MAGIC: &str = "#fedvad-manifest v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("video {video_id}: expected feature dimension {expected}, found {found}")]
    DimensionMismatch {
        video_id: String,
        expected: usize,
        found: usize,
    },
    #[error("video {video_id}: non-finite feature value at segment {segment}")]
    NonFinite { video_id: String, segment: usize },
    #[error("video {video_id}: ground truth has {found} frames, expected {expected}")]
    GtLengthMismatch {
        video_id: String,
        expected: usize,
        found: usize,
    },
    #[error("video {video_id}: {message}")]
    InvalidRecord { video_id: String, message: String },
    #[error("duplicate video id {0}")]
    DuplicateId(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// One video: `m` segments of `d` features each, plus metadata.
///
/// `event_class`, `scene_class`, `weak_label` and `gt_frame_labels` are
/// benchmark metadata. The training pipeline only ever sees
/// [`VideoRecord::features`] through [`crate::federation`]'s participant
/// views.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    features: Vec<f32>,
    dim: usize,
    pub frames_per_segment: usize,
    pub event_class: Option<String>,
    pub scene_class: Option<String>,
    pub weak_label: Option<u8>,
    pub gt_frame_labels: Option<Vec<u8>>,
}

impl VideoRecord {
    /// Builds a record from row-major `m x dim` features and checks every
    /// record invariant.
    pub fn new(
        video_id: impl Into<String>,
        features: Vec<f32>,
        dim: usize,
        frames_per_segment: usize,
    ) -> Result<Self, DatasetError> {
        let video_id = video_id.into();
        let invalid = |message: &str| DatasetError::InvalidRecord {
            video_id: video_id.clone(),
            message: message.to_string(),
        };
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if frames_per_segment == 0 {
            return Err(invalid("frames per segment must be positive"));
        }
        if features.is_empty() {
            return Err(invalid("video has no segments"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(DatasetError::DimensionMismatch {
                video_id,
                expected: dim,
                found: features.len() % dim,
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                video_id,
                segment: pos / dim,
            });
        }
        Ok(Self {
            video_id,
            features,
            dim,
            frames_per_segment,
            event_class: None,
            scene_class: None,
            weak_label: None,
            gt_frame_labels: None,
        })
    }

    pub fn with_gt(mut self, gt: Vec<u8>) -> Result<Self, DatasetError> {
        let expected = self.num_frames();
        if gt.len() != expected {
            return Err(DatasetError::GtLengthMismatch {
                video_id: self.video_id,
                expected,
                found: gt.len(),
            });
        }
        if gt.iter().any(|&b| b > 1) {
            return Err(DatasetError::InvalidRecord {
                video_id: self.video_id,
                message: "ground truth bytes must be 0 or 1".into(),
            });
        }
        self.gt_frame_labels = Some(gt);
        Ok(self)
    }

    pub fn with_tags(
        mut self,
        event: Option<String>,
        scene: Option<String>,
        weak: Option<u8>,
    ) -> Self {
        self.event_class = event;
        self.scene_class = scene;
        self.weak_label = weak;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_segments(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.num_segments() * self.frames_per_segment
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn segment(&self, j: usize) -> &[f32] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn segments(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    /// Whether benchmark metadata marks this video anomalous: the weak label
    /// if present, otherwise any positive ground-truth frame.
    pub fn is_tagged_anomalous(&self) -> bool {
        match (self.weak_label, &self.gt_frame_labels) {
            (Some(w), _) => w == 1,
            (None, Some(gt)) => gt.contains(&1),
            (None, None) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub videos: Vec<VideoRecord>,
    pub feature_dim: usize,
    pub split_role: SplitRole,
}

impl DatasetManifest {
    pub fn new(
        videos: Vec<VideoRecord>,
        feature_dim: usize,
        split_role: SplitRole,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(videos.len());
        for v in &videos {
            if v.dim() != feature_dim {
                return Err(DatasetError::DimensionMismatch {
                    video_id: v.video_id.clone(),
                    expected: feature_dim,
                    found: v.dim(),
                });
            }
            if !seen.insert(v.video_id.as_str()) {
                return Err(DatasetError::DuplicateId(v.video_id.clone()));
            }
        }
        Ok(Self {
            videos,
            feature_dim,
            split_role,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn total_segments(&self) -> usize {
        self.videos.iter().map(VideoRecord::num_segments).sum()
    }
}

fn opt_field(s: &str) -> Option<&str> {
    (s != "-").then_some(s)
}

fn parse_header(line: &str) -> Option<usize> {
    let rest = line.strip_prefix(MANIFEST_MAGIC)?.trim();
    rest.strip_prefix("d=")?.parse().ok()
}

/// Reads a manifest and every feature / ground-truth file it references.
pub fn load_manifest(path: &Path, split_role: SplitRole) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();
    let dim = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                break parse_header(l).ok_or_else(|| DatasetError::Parse {
                    line: i + 1,
                    message: format!("expected header `{MANIFEST_MAGIC} d=<dim>`"),
                })?
            }
            None => {
                return Err(DatasetError::Parse {
                    line: 1,
                    message: "empty manifest".into(),
                })
            }
        }
    };
    if dim == 0 {
        return Err(DatasetError::Parse {
            line: 1,
            message: "feature dimension must be positive".into(),
        });
    }

    let mut videos = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        videos.push(parse_record(line, i + 1, dim, base)?);
    }
    DatasetManifest::new(videos, dim, split_role)
}

fn parse_record(line: &str, lineno: usize, dim: usize, base: &Path) -> Result<VideoRecord, DatasetError> {
    let parse_err = |message: String| DatasetError::Parse {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(parse_err(format!("expected 8 tab-separated fields, found {}", fields.len())));
    }
    let video_id = fields[0].to_string();
    let m: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(format!("bad segment count `{}`", fields[2])))?;
    let r: usize = fields[3]
        .parse()
        .map_err(|_| parse_err(format!("bad frames-per-segment `{}`", fields[3])))?;
    if m == 0 {
        return Err(parse_err("segment count must be positive".into()));
    }
    let weak = match opt_field(fields[6]) {
        None => None,
        Some("0") => Some(0),
        Some("1") => Some(1),
        Some(other) => return Err(parse_err(format!("bad weak label `{other}`"))),
    };

    let feature_path = base.join(fields[1]);
    let bytes = fs::read(&feature_path).map_err(io_err(&feature_path))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 % m != 0 {
        return Err(DatasetError::InvalidRecord {
            video_id,
            message: format!("feature file has {} bytes, not a multiple of 4*m", bytes.len()),
        });
    }
    let row_len = bytes.len() / 4 / m;
    if row_len != dim {
        return Err(DatasetError::DimensionMismatch {
            video_id,
            expected: dim,
            found: row_len,
        });
    }
    let features = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let record = VideoRecord::new(video_id, features, dim, r)?.with_tags(
        opt_field(fields[4]).map(str::to_string),
        opt_field(fields[5]).map(str::to_string),
        weak,
    );
    match opt_field(fields[7]) {
        None => Ok(record),
        Some(gt) => {
            let gt_path = base.join(gt);
            let gt = fs::read(&gt_path).map_err(io_err(&gt_path))?;
            record.with_gt(gt)
        }
    }
}

/// Writes `manifest.tsv`, `features/<id>.f32` and `gt/<id>.gt` under `dir`.
/// Returns the manifest path.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf, DatasetError> {
    let feat_dir = dir.join("features");
    let gt_dir = dir.join("gt");
    fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    if manifest.videos.iter().any(|v| v.gt_frame_labels.is_some()) {
        fs::create_dir_all(&gt_dir).map_err(io_err(&gt_dir))?;
    }

    let path = dir.join("manifest.tsv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    let mut text = format!("{MANIFEST_MAGIC} d={}\n", manifest.feature_dim);
    for v in &manifest.videos {
        let feat_rel = format!("features/{}.f32", v.video_id);
        let feat_path = dir.join(&feat_rel);
        let bytes: Vec<u8> = v.features.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&feat_path, bytes).map_err(io_err(&feat_path))?;

        let gt_rel = match &v.gt_frame_labels {
            Some(gt) => {
                let rel = format!("gt/{}.gt", v.video_id);
                let gt_path = dir.join(&rel);
                fs::write(&gt_path, gt).map_err(io_err(&gt_path))?;
                rel
            }
            None => "-".to_string(),
        };
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            v.video_id,
            feat_rel,
            v.num_segments(),
            v.frames_per_segment,
            v.event_class.as_deref().unwrap_or("-"),
            v.scene_class.as_deref().unwrap_or("-"),
            v.weak_label.map_or("-".to_string(), |w| w.to_string()),
            gt_rel,
        ));
    }
    out.write_all(text.as_bytes()).map_err(io_err(&path))?;
    out.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Parameters of the synthetic benchmark.
///
/// Every video draws an appearance offset with standard deviation
/// `appearance_scale` per dimension; its segments are that offset plus i.i.d.
/// Gaussian noise with standard deviation `noise_scale`. Each anomalous video
/// carries one contiguous window of `ceil(anomaly_window_fraction * m)`
/// segments multiplied by `1 + magnitude_shift`, so the per-dimension
/// magnitude rises by `magnitude_shift` baseline standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub anomaly_fraction: f64,
    pub feature_dim: usize,
    pub segments_range: (usize, usize),
    pub anomaly_window_fraction: f64,
    pub magnitude_shift: f64,
    pub noise_scale: f64,
    pub appearance_scale: f64,
    pub frames_per_segment: usize,
    pub num_event_classes: usize,
    pub num_scene_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 200,
            num_test_videos: 50,
            anomaly_fraction: 0.2,
            feature_dim: 64,
            segments_range: (24, 40),
            anomaly_window_fraction: 0.25,
            magnitude_shift: 3.0,
            noise_scale: 0.1,
            appearance_scale: 0.1,
            frames_per_segment: 16,
            num_event_classes: 4,
            num_scene_classes: 3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return bad("anomaly_fraction must lie in (0, 1)");
        }
        if self.anomalous_count(self.num_videos) == 0 {
            return bad("anomaly_fraction * num_videos must be at least 1");
        }
        if self.num_test_videos > 0 && self.anomalous_count(self.num_test_videos) == 0 {
            return bad("anomaly_fraction * num_test_videos must be at least 1");
        }
        if self.anomalous_count(self.num_videos) >= self.num_videos {
            return bad("at least one normal video is required");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        let (lo, hi) = self.segments_range;
        if lo < 3 || hi < lo {
            return bad("segments_range must satisfy 3 <= min <= max");
        }
        if !(self.anomaly_window_fraction > 0.0 && self.anomaly_window_fraction < 1.0) {
            return bad("anomaly_window_fraction must lie in (0, 1)");
        }
        if !(self.magnitude_shift.is_finite() && self.noise_scale > 0.0) {
            return bad("magnitude_shift must be finite and noise_scale positive");
        }
        if !(self.appearance_scale >= 0.0 && self.appearance_scale.is_finite()) {
            return bad("appearance_scale must be finite and non-negative");
        }
        if self.frames_per_segment == 0 || self.num_event_classes == 0 || self.num_scene_classes == 0 {
            return bad("frames_per_segment and class counts must be positive");
        }
        Ok(())
    }

    fn anomalous_count(&self, n: usize) -> usize {
        (self.anomaly_fraction * n as f64).round() as usize
    }
}

/// Generates the train and test manifests for `spec`. Output depends only on
/// the spec (including its seed).
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    spec.validate()?;
    let train = synthesize_split(spec, spec.num_videos, SplitRole::Train)?;
    let test = synthesize_split(spec, spec.num_test_videos, SplitRole::Test)?;
    Ok((train, test))
}

fn synthesize_split(spec: &SyntheticSpec, n: usize, role: SplitRole) -> Result<DatasetManifest, DatasetError> {
    let role_tag = match role {
        SplitRole::Train => rng::tag::SYNTH_TRAIN,
        SplitRole::Test => rng::tag::SYNTH_TEST,
    };
    let n_anomalous = spec.anomalous_count(n);

    // Pick which videos are anomalous with a partial Fisher-Yates shuffle.
    let mut pick = rng::stream(&[spec.seed, role_tag, rng::tag::SYNTH_PICK]);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n_anomalous {
        let j = pick.random_range(i..n);
        order.swap(i, j);
    }
    let mut anomalous = vec![false; n];
    for &i in &order[..n_anomalous] {
        anomalous[i] = true;
    }

    let mut event_counter = 0usize;
    let mut videos = Vec::with_capacity(n);
    for (i, &is_anomalous) in anomalous.iter().enumerate() {
        let event = is_anomalous.then(|| {
            let e = event_counter % spec.num_event_classes;
            event_counter += 1;
            format!("event{e}")
        });
        let scene = format!("scene{}", i % spec.num_scene_classes);
        let id = format!("{role}_{i:04}");
        let mut stream = rng::stream(&[spec.seed, role_tag, i as u64]);
        videos.push(synthesize_video(spec, id, is_anomalous, event, scene, &mut stream)?);
    }
    DatasetManifest::new(videos, spec.feature_dim, role)
}

fn synthesize_video(
    spec: &SyntheticSpec,
    video_id: String,
    anomalous: bool,
    event: Option<String>,
    scene: String,
    stream: &mut rng::StreamRng,
) -> Result<VideoRecord, DatasetError> {
    let d = spec.feature_dim;
    let m = stream.random_range(spec.segments_range.0..=spec.segments_range.1);
    let offset: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(stream);
            z * spec.appearance_scale
        })
        .collect();
    let mut rows: Vec<f64> = (0..m * d)
        .map(|k| {
            let z: f64 = StandardNormal.sample(stream);
            offset[k % d] + z * spec.noise_scale
        })
        .collect();

    let mut segment_labels = vec![0u8; m];
    if anomalous {
        let w = ((spec.anomaly_window_fraction * m as f64).ceil() as usize).clamp(1, m);
        let start = stream.random_range(0..=m - w);
        // per-dimension RMS goes from noise_scale to (1 + shift) * noise_scale
        let factor = 1.0 + spec.magnitude_shift;
        for j in start..start + w {
            rows[j * d..(j + 1) * d].iter_mut().for_each(|x| *x *= factor);
            segment_labels[j] = 1;
        }
    }

    let r = spec.frames_per_segment;
    let gt: Vec<u8> = segment_labels
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, r))
        .collect();
    let features = rows.into_iter().map(|x| x as f32).collect();
    VideoRecord::new(video_id, features, d, r)?
        .with_tags(event, Some(scene), Some(anomalous as u8))
        .with_gt(gt)
}
