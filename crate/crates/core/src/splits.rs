//! Participant partitions of a training manifest.
//!
//! Event and scene tags are benchmark metadata: they shape who holds which
//! videos, and are never read by training.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataset::{DatasetManifest, VideoRecord};
use crate::rng;

pub const SPLIT_MAGIC: &str = "#fedvad-split v1";

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("cannot split {videos} videos across {participants} participants")]
    TooManyParticipants { participants: usize, videos: usize },
    #[error("participant count must be at least 1")]
    NoParticipants,
    #[error("anomalous video {0} has no event class")]
    MissingEvent(String),
    #[error("video {0} has no scene class")]
    MissingScene(String),
    #[error("split line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("split does not partition the manifest: {0}")]
    NotAPartition(String),
    #[error("split file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    Random,
    Event,
    Scene,
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::Random => "random",
            SplitStrategy::Event => "event",
            SplitStrategy::Scene => "scene",
        })
    }
}

impl FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitStrategy::Random),
            "event" => Ok(SplitStrategy::Event),
            "scene" => Ok(SplitStrategy::Scene),
            other => Err(format!("unknown split strategy `{other}`")),
        }
    }
}

/// Video ids held by each participant, indexed by participant id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub participants: Vec<Vec<String>>,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn num_participants(&self) -> usize {
        self.participants.len()
    }

    /// Checks that every manifest video is held by exactly one participant.
    pub fn check_partition(&self, manifest: &DatasetManifest) -> Result<(), SplitError> {
        let mut seen = HashSet::new();
        for id in self.participants.iter().flatten() {
            if manifest.get(id).is_none() {
                return Err(SplitError::NotAPartition(format!("unknown video {id}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(SplitError::NotAPartition(format!("video {id} assigned twice")));
            }
        }
        if seen.len() != manifest.len() {
            return Err(SplitError::NotAPartition(format!(
                "{} of {} videos assigned",
                seen.len(),
                manifest.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{SPLIT_MAGIC} strategy={} seed={}\n", self.strategy, self.seed);
        for (pid, ids) in self.participants.iter().enumerate() {
            for id in ids {
                s.push_str(&format!("{pid}\t{id}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SplitError> {
        let perr = |line: usize, message: &str| SplitError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty split file"))?;
        let rest = header
            .strip_prefix(SPLIT_MAGIC)
            .ok_or_else(|| perr(1, "missing `#fedvad-split v1` header"))?;
        let mut strategy = None;
        let mut seed = 0;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("strategy", v)) => strategy = Some(v.parse().map_err(|e: String| perr(1, &e))?),
                Some(("seed", v)) => seed = v.parse().map_err(|_| perr(1, "bad seed"))?,
                _ => return Err(perr(1, &format!("unexpected header field `{kv}`"))),
            }
        }
        let strategy = strategy.ok_or_else(|| perr(1, "header lacks strategy"))?;

        let mut participants: Vec<Vec<String>> = Vec::new();
        for (i, line) in lines {
            if line.starts_with('#') {
                continue;
            }
            let (pid, vid) = line.split_once('\t').ok_or_else(|| perr(i + 1, "expected `participant<TAB>video`"))?;
            let pid: usize = pid.parse().map_err(|_| perr(i + 1, "bad participant id"))?;
            if pid >= participants.len() {
                participants.resize(pid + 1, Vec::new());
            }
            participants[pid].push(vid.to_string());
        }
        Ok(Self {
            participants,
            strategy,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SplitError> {
        fs::write(path, self.to_text()).map_err(|e| SplitError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SplitError> {
        let text = fs::read_to_string(path).map_err(|e| SplitError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

fn ids<'a>(videos: impl IntoIterator<Item = &'a VideoRecord>) -> Vec<String> {
    videos.into_iter().map(|v| v.video_id.clone()).collect()
}

/// Shuffles the manifest and deals anomalous then normal videos round-robin
/// with one running counter, so per-class counts differ by at most one.
/// `k = 1` returns the manifest order unchanged.
pub fn split_random(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitAssignment, SplitError> {
    if k == 0 {
        return Err(SplitError::NoParticipants);
    }
    if k > manifest.len() {
        return Err(SplitError::TooManyParticipants {
            participants: k,
            videos: manifest.len(),
        });
    }
    if k == 1 {
        return Ok(SplitAssignment {
            participants: vec![ids(&manifest.videos)],
            strategy: SplitStrategy::Random,
            seed,
        });
    }
    let mut order: Vec<&VideoRecord> = manifest.videos.iter().collect();
    order.shuffle(&mut rng::stream(&[seed, rng::tag::SPLIT]));
    let (anomalous, normal): (Vec<&VideoRecord>, Vec<&VideoRecord>) =
        order.into_iter().partition(|v| v.is_tagged_anomalous());

    let mut participants = vec![Vec::new(); k];
    for (slot, v) in anomalous.iter().chain(&normal).enumerate() {
        participants[slot % k].push(v.video_id.clone());
    }
    Ok(SplitAssignment {
        participants,
        strategy: SplitStrategy::Random,
        seed,
    })
}

/// Orders groups by descending size, then by name.
fn ordered_groups(groups: BTreeMap<String, Vec<String>>) -> Vec<Vec<String>> {
    let mut g: Vec<(String, Vec<String>)> = groups.into_iter().collect();
    g.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    g.into_iter().map(|(_, v)| v).collect()
}

/// One participant per anomalous event class; normal videos are dealt
/// round-robin over participants in descending class-size order.
pub fn split_by_event(manifest: &DatasetManifest) -> Result<SplitAssignment, SplitError> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut normal = Vec::new();
    for v in &manifest.videos {
        if v.is_tagged_anomalous() {
            let event = v.event_class.clone().ok_or_else(|| SplitError::MissingEvent(v.video_id.clone()))?;
            groups.entry(event).or_default().push(v.video_id.clone());
        } else {
            normal.push(v.video_id.clone());
        }
    }
    let mut participants = ordered_groups(groups);
    if participants.is_empty() {
        participants.push(Vec::new());
    }
    let k = participants.len();
    for (i, id) in normal.into_iter().enumerate() {
        participants[i % k].push(id);
    }
    Ok(SplitAssignment {
        participants,
        strategy: SplitStrategy::Event,
        seed: 0,
    })
}

/// One participant per scene class holding every video of that scene.
pub fn split_by_scene(manifest: &DatasetManifest) -> Result<SplitAssignment, SplitError> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for v in &manifest.videos {
        let scene = v.scene_class.clone().ok_or_else(|| SplitError::MissingScene(v.video_id.clone()))?;
        groups.entry(scene).or_default().push(v.video_id.clone());
    }
    Ok(SplitAssignment {
        participants: ordered_groups(groups),
        strategy: SplitStrategy::Scene,
        seed: 0,
    })
}

pub fn split(
    manifest: &DatasetManifest,
    strategy: SplitStrategy,
    k: usize,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    match strategy {
        SplitStrategy::Random => split_random(manifest, k, seed),
        SplitStrategy::Event => split_by_event(manifest),
        SplitStrategy::Scene => split_by_scene(manifest),
    }
}
