//! Simulated collaborative training.
//!
//! Every participant first derives its own video labels, fits a null model
//! and uploads `(gamma, theta, m0)`. The server answers with the pooled
//! mixture, from which participants generate segment labels. Then, for each
//! round, the server broadcasts the global parameters, each participant runs
//! `E` SGD iterations on its own data, returns the parameter delta and
//! (after the warm-up rounds) refines its segment labels from the local
//! model's confidence. The server applies `theta += lambda/K * sum(delta)`.
//!
//! Participants only touch their own data, through [`PrivateStore::open`],
//! which records who asked. Reductions always run in participant-id order
//! and every random stream is derived from `(seed, participant, round)`, so
//! results do not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::sync::{Arc, Mutex};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, FederationConfig};
use crate::dataset::{DatasetManifest, VideoRecord};
use crate::detector::{self, DetectorError, DetectorParams, GradientDelta, Layout, Mode, TrainBatch};
use crate::harness::{self, EvalError};
use crate::rng;
use crate::spl::{self, ConfidenceScores, NullGaussian, SegmentLabelSet, ServerMixture, SplError};
use crate::splits::SplitAssignment;
use crate::vpl::{self, VideoLabelSet, VplError};

pub type ParticipantId = usize;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no participant produced a null model")]
    NoNullModel,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("participant {0} holds no videos")]
    EmptyParticipant(ParticipantId),
    #[error("split references unknown video {0}")]
    UnknownVideo(String),
    #[error("split has {found} participants, config expects {expected}")]
    ParticipantCount { expected: usize, found: usize },
    #[error("delta layout mismatch: expected {expected}, got {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("no deltas to aggregate")]
    NoDeltas,
    #[error("participant {participant}: {source}")]
    Vpl {
        participant: ParticipantId,
        #[source]
        source: VplError,
    },
    #[error(transparent)]
    Spl(#[from] SplError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Counts of `(accessor, owner)` feature reads.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<BTreeMap<(ParticipantId, ParticipantId), u64>>,
}

impl AccessLog {
    fn record(&self, accessor: ParticipantId, owner: ParticipantId) {
        let mut e = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        *e.entry((accessor, owner)).or_default() += 1;
    }

    /// `(accessor, owner, count)` in ascending order.
    pub fn entries(&self) -> Vec<(ParticipantId, ParticipantId, u64)> {
        let e = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        e.iter().map(|(&(a, o), &c)| (a, o, c)).collect()
    }

    pub fn only_self_access(&self) -> bool {
        self.entries().iter().all(|&(a, o, _)| a == o)
    }
}

/// A participant's videos with benchmark metadata removed.
#[derive(Debug)]
pub struct PrivateStore {
    owner: ParticipantId,
    videos: Vec<VideoRecord>,
    log: Arc<AccessLog>,
}

impl PrivateStore {
    pub fn new(owner: ParticipantId, videos: Vec<VideoRecord>, log: Arc<AccessLog>) -> Self {
        let videos = videos
            .into_iter()
            .map(|mut v| {
                v.event_class = None;
                v.scene_class = None;
                v.weak_label = None;
                v.gt_frame_labels = None;
                v
            })
            .collect();
        Self { owner, videos, log }
    }

    pub fn owner(&self) -> ParticipantId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// The stored videos, logged against `requester`.
    pub fn open(&self, requester: ParticipantId) -> &[VideoRecord] {
        self.log.record(requester, self.owner);
        &self.videos
    }
}

/// Input for one simulated participant.
#[derive(Debug, Clone)]
pub struct ParticipantInput {
    pub id: ParticipantId,
    pub videos: Vec<VideoRecord>,
    /// Root of every random stream the participant uses.
    pub stream_seed: u64,
    /// Known video labels, used only when `use_weak_labels` is set.
    pub weak_labels: BTreeMap<String, u8>,
}

fn participant_seed(seed: u64, id: ParticipantId) -> u64 {
    rng::derive_seed(&[seed, id as u64])
}

fn participant_input(config: &FederationConfig, id: ParticipantId, videos: Vec<VideoRecord>) -> ParticipantInput {
    let weak_labels = if config.use_weak_labels {
        videos
            .iter()
            .filter_map(|v| v.weak_label.map(|w| (v.video_id.clone(), w)))
            .collect()
    } else {
        BTreeMap::new()
    };
    ParticipantInput {
        id,
        stream_seed: participant_seed(config.seed, id),
        videos,
        weak_labels,
    }
}

/// Resolves a split into per-participant inputs, in participant-id order.
pub fn participants_from_split(
    config: &FederationConfig,
    split: &SplitAssignment,
    train: &DatasetManifest,
) -> Result<Vec<ParticipantInput>, FederationError> {
    let index: HashMap<&str, &VideoRecord> = train.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    split
        .participants
        .iter()
        .enumerate()
        .map(|(id, ids)| {
            let videos = ids
                .iter()
                .map(|vid| {
                    index
                        .get(vid.as_str())
                        .map(|v| (*v).clone())
                        .ok_or_else(|| FederationError::UnknownVideo(vid.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(participant_input(config, id, videos))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Participant(ParticipantId),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    Auc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub round: usize,
    pub scope: Scope,
    pub metric: Metric,
    pub value: f64,
}

impl fmt::Display for ReportRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scope = match self.scope {
            Scope::Participant(p) => p.to_string(),
            Scope::Global => "global".to_string(),
        };
        let metric = match self.metric {
            Metric::Loss => "loss",
            Metric::Auc => "auc",
        };
        write!(f, "{}\t{}\t{}\t{}", self.round, scope, metric, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    /// 0 is the null-model exchange; training rounds count from 1.
    pub round: usize,
    pub participant: ParticipantId,
    pub upload: u64,
    pub download: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommsLedger {
    pub entries: Vec<LedgerEntry>,
}

impl CommsLedger {
    pub fn push(&mut self, round: usize, participant: ParticipantId, upload: u64, download: u64) {
        self.entries.push(LedgerEntry {
            round,
            participant,
            upload,
            download,
        });
    }

    pub fn total_upload(&self) -> u64 {
        self.entries.iter().map(|e| e.upload).sum()
    }

    pub fn total_download(&self) -> u64 {
        self.entries.iter().map(|e| e.download).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_upload() + self.total_download()
    }

    /// Upload plus download bytes per participant.
    pub fn per_participant(&self) -> BTreeMap<ParticipantId, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.participant).or_default() += e.upload + e.download;
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#round\tparticipant\tupload_bytes\tdownload_bytes\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.round, e.participant, e.upload, e.download);
        }
        for (p, b) in self.per_participant() {
            let _ = writeln!(s, "#participant_total\t{p}\t{b}");
        }
        let _ = writeln!(s, "#total\tupload={}\tdownload={}\tall={}", self.total_upload(), self.total_download(), self.total());
        s
    }
}

/// Ledger predicted from the payload layouts: a 24-byte null-model upload per
/// participant, then one parameter download and one delta upload of
/// `param_count(d) * 4` bytes per participant and round.
pub fn comms_accounting(config: &FederationConfig, d: usize) -> CommsLedger {
    let payload = (detector::param_count(d) * 4) as u64;
    let mut ledger = CommsLedger::default();
    for p in 0..config.participants {
        ledger.push(0, p, spl::NULL_MODEL_WIRE_BYTES as u64, 0);
    }
    for round in 1..=config.rounds {
        for p in 0..config.participants {
            ledger.push(round, p, payload, payload);
        }
    }
    ledger
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<ReportRecord>,
    pub ledger: CommsLedger,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("#round\tscope\tmetric\tvalue\n");
        for r in &self.records {
            let _ = writeln!(s, "{r}");
        }
        s
    }

    pub fn auc_by_round(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.metric == Metric::Auc)
            .map(|r| r.value)
            .collect()
    }

    pub fn final_auc(&self) -> Option<f64> {
        self.auc_by_round().last().copied()
    }
}

/// Full outcome of one training run.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: DetectorParams,
    pub access_log: Arc<AccessLog>,
    pub video_labels: Vec<VideoLabelSet>,
    pub segment_labels: Vec<SegmentLabelSet>,
}

/// `lambda * (sum(delta_k) / K)`, summed in ascending participant order.
pub fn aggregate_fedavg(
    deltas: &[(ParticipantId, GradientDelta)],
    lambda: f64,
) -> Result<Vec<f64>, FederationError> {
    let first = deltas.first().ok_or(FederationError::NoDeltas)?;
    let len = first.1.values.len();
    let mut ordered: Vec<&(ParticipantId, GradientDelta)> = deltas.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut sum = vec![0.0f64; len];
    for (_, d) in ordered {
        if d.values.len() != len {
            return Err(FederationError::LayoutMismatch {
                expected: len,
                found: d.values.len(),
            });
        }
        for (s, &v) in sum.iter_mut().zip(&d.values) {
            *s += f64::from(v);
        }
    }
    let k = deltas.len() as f64;
    Ok(sum.into_iter().map(|s| lambda * (s / k)).collect())
}

/// `theta + update`, rounded to `f32`.
pub fn apply_update(theta: &mut DetectorParams, update: &[f64]) -> Result<(), FederationError> {
    if update.len() != theta.values.len() {
        return Err(FederationError::LayoutMismatch {
            expected: theta.values.len(),
            found: update.len(),
        });
    }
    for (p, &u) in theta.values.iter_mut().zip(update) {
        *p = (f64::from(*p) + u) as f32;
    }
    Ok(())
}

struct Participant {
    id: ParticipantId,
    store: PrivateStore,
    stream_seed: u64,
    weak_labels: BTreeMap<String, u8>,
    video_labels: VideoLabelSet,
    segment_labels: SegmentLabelSet,
    null_model: Option<NullGaussian>,
}

impl Participant {
    fn video_stage(&mut self) -> Result<(), FederationError> {
        let videos = self.store.open(self.id);
        self.video_labels = if videos.len() < 2 {
            warn!("participant {}: fewer than 2 videos, all labelled normal", self.id);
            VideoLabelSet {
                labels: videos.iter().map(|v| (v.video_id.clone(), 0)).collect(),
            }
        } else {
            vpl::video_pseudo_labels(videos, rng::derive_seed(&[self.stream_seed, rng::tag::GMM]))
                .map_err(|source| FederationError::Vpl {
                    participant: self.id,
                    source,
                })?
                .labels
        };
        self.null_model = match spl::fit_null_gaussian(videos, &self.video_labels) {
            Ok(g) => Some(g),
            Err(e) => {
                warn!("participant {}: {e}; contributing no mixture component", self.id);
                None
            }
        };
        Ok(())
    }

    fn segment_stage(&mut self, mix: &ServerMixture, beta: f64) -> Result<(), FederationError> {
        let videos = self.store.open(self.id);
        self.segment_labels = spl::generate_all(videos, &self.video_labels, mix, beta)?;
        if !self.weak_labels.is_empty() {
            let (seg, vid) = spl::correct_with_weak_labels(
                &self.segment_labels,
                &self.video_labels,
                &self.weak_labels,
                videos,
                mix,
                beta,
            )?;
            self.segment_labels = seg;
            self.video_labels = vid;
        }
        Ok(())
    }

    /// `E` SGD iterations from `global`; returns the new parameters and the
    /// mean batch loss.
    fn local_train(
        &self,
        global: &DetectorParams,
        config: &FederationConfig,
        round: usize,
    ) -> Result<(DetectorParams, f64), FederationError> {
        let videos = self.store.open(self.id);
        let d = global.layout.dim;
        let samples: Vec<(&[f32], u8)> = videos
            .iter()
            .flat_map(|v| {
                let labels = self.segment_labels.get(&v.video_id).unwrap_or_default();
                v.segments().zip(labels.iter().copied())
            })
            .collect();
        let mut stream = rng::stream(&[self.stream_seed, rng::tag::LOCAL_TRAIN, round as u64]);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream);
        let mut cursor = 0;

        let mut params = global.clone();
        let mut loss_sum = 0.0;
        let bsz = config.batch_size.min(samples.len());
        for _ in 0..config.local_iters {
            let mut features = Vec::with_capacity(bsz * d);
            let mut labels = Vec::with_capacity(bsz);
            for _ in 0..bsz {
                if cursor == order.len() {
                    order.shuffle(&mut stream);
                    cursor = 0;
                }
                let (f, y) = samples[order[cursor]];
                features.extend_from_slice(f);
                labels.push(y);
                cursor += 1;
            }
            let mode = Mode::Train {
                dropout: config.dropout,
                seed: stream.random(),
            };
            let batch = TrainBatch { features, labels };
            let (loss, grad) = detector::loss_and_grad_wide(&params.layout, &params.wide(), &batch, config.l2_coeff, mode)?;
            detector::sgd_step_wide(&mut params, &grad, config.local_lr)?;
            loss_sum += loss;
        }
        Ok((params, loss_sum / config.local_iters as f64))
    }

    fn refine(&mut self, local: &DetectorParams, config: &FederationConfig) -> Result<(), FederationError> {
        let videos = self.store.open(self.id);
        let wide = local.wide();
        let mut q = ConfidenceScores::default();
        for v in videos {
            if config.plr_all_videos || self.video_labels.get(&v.video_id) == Some(1) {
                let scores = detector::forward_wide(&local.layout, &wide, v.features(), Mode::Eval)?;
                q.scores.insert(v.video_id.clone(), scores);
            }
        }
        self.segment_labels = spl::update_all(&self.segment_labels, &self.video_labels, &q, config.beta, config.plr_all_videos)?;
        Ok(())
    }
}

/// Server-side initial parameters.
pub fn initial_model(config: &FederationConfig, d: usize) -> DetectorParams {
    detector::init_params(d, rng::derive_seed(&[config.seed, rng::tag::INIT]))
}

/// Runs the collaborative protocol over explicit participant inputs with
/// server learning rate `lambda`.
pub fn run_participants(
    config: &FederationConfig,
    inputs: Vec<ParticipantInput>,
    feature_dim: usize,
    lambda: f64,
    test: Option<&DatasetManifest>,
) -> Result<RunOutcome, FederationError> {
    config.validate()?;
    if inputs.iter().all(|p| p.videos.is_empty()) {
        return Err(FederationError::EmptyTrainingSet);
    }
    if let Some(p) = inputs.iter().find(|p| p.videos.is_empty()) {
        return Err(FederationError::EmptyParticipant(p.id));
    }
    let log = Arc::new(AccessLog::default());
    let mut parts: Vec<Participant> = inputs
        .into_iter()
        .map(|p| Participant {
            id: p.id,
            store: PrivateStore::new(p.id, p.videos, Arc::clone(&log)),
            stream_seed: p.stream_seed,
            weak_labels: p.weak_labels,
            video_labels: VideoLabelSet::default(),
            segment_labels: SegmentLabelSet::default(),
            null_model: None,
        })
        .collect();
    parts.sort_by_key(|p| p.id);
    let k = parts.len();
    let mut ledger = CommsLedger::default();

    // Null models up, mixture down.
    parts.par_iter_mut().try_for_each(Participant::video_stage)?;
    let mut components = Vec::new();
    for p in &parts {
        if let Some(g) = p.null_model {
            let wire = g.to_wire();
            ledger.push(0, p.id, wire.len() as u64, 0);
            components.push(NullGaussian::from_wire(&wire));
        }
    }
    if components.is_empty() {
        return Err(FederationError::NoNullModel);
    }
    let mixture = spl::build_mixture(&components)?;
    parts
        .par_iter_mut()
        .try_for_each(|p| p.segment_stage(&mixture, config.beta))?;

    let mut global = initial_model(config, feature_dim);
    let payload = (global.values.len() * 4) as u64;
    let mut records = Vec::new();
    for round in 0..config.rounds {
        let results: Vec<(ParticipantId, GradientDelta, f64)> = parts
            .par_iter_mut()
            .map(|p| {
                let (local, loss) = p.local_train(&global, config, round)?;
                let delta = GradientDelta::between(&local, &global)?;
                if round >= config.plr_warmup_rounds {
                    p.refine(&local, config)?;
                }
                Ok((p.id, delta, loss))
            })
            .collect::<Result<_, FederationError>>()?;

        let mut deltas = Vec::with_capacity(k);
        for (id, delta, loss) in results {
            ledger.push(round + 1, id, payload, payload);
            records.push(ReportRecord {
                round: round + 1,
                scope: Scope::Participant(id),
                metric: Metric::Loss,
                value: loss,
            });
            deltas.push((id, delta));
        }
        let update = aggregate_fedavg(&deltas, lambda)?;
        apply_update(&mut global, &update)?;

        if let Some(test) = test {
            let auc = harness::evaluate_model(&global, test, false)?.auc;
            records.push(ReportRecord {
                round: round + 1,
                scope: Scope::Global,
                metric: Metric::Auc,
                value: auc,
            });
        }
    }

    Ok(RunOutcome {
        report: RunReport { records, ledger },
        model: global,
        access_log: log,
        video_labels: parts.iter().map(|p| p.video_labels.clone()).collect(),
        segment_labels: parts.iter().map(|p| p.segment_labels.clone()).collect(),
    })
}

/// Collaborative training over the participants of `split`.
pub fn run_collaborative(
    config: &FederationConfig,
    split: &SplitAssignment,
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
) -> Result<RunOutcome, FederationError> {
    if split.num_participants() != config.participants {
        return Err(FederationError::ParticipantCount {
            expected: config.participants,
            found: split.num_participants(),
        });
    }
    let inputs = participants_from_split(config, split, train)?;
    run_participants(config, inputs, train.feature_dim, config.server_lr, test)
}

/// One participant holding the whole training set, `lambda = 1`.
pub fn run_centralized(
    config: &FederationConfig,
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
) -> Result<RunOutcome, FederationError> {
    if train.is_empty() {
        return Err(FederationError::EmptyTrainingSet);
    }
    let input = participant_input(config, 0, train.videos.clone());
    run_participants(config, vec![input], train.feature_dim, 1.0, test)
}

/// Every participant trains alone (`K = 1`, `lambda = 1`) with its own
/// streams. Empty participants are skipped.
pub fn run_local(
    config: &FederationConfig,
    split: &SplitAssignment,
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
) -> Result<Vec<(ParticipantId, RunOutcome)>, FederationError> {
    let inputs = participants_from_split(config, split, train)?;
    let mut out = Vec::new();
    for input in inputs {
        if input.videos.is_empty() {
            warn!("participant {} holds no videos; skipped", input.id);
            continue;
        }
        let id = input.id;
        out.push((id, run_participants(config, vec![input], train.feature_dim, 1.0, test)?));
    }
    Ok(out)
}

/// Layout shared by every participant for feature width `d`.
pub fn model_layout(d: usize) -> Layout {
    Layout::new(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(v: &[f32]) -> GradientDelta {
        GradientDelta { values: v.to_vec() }
    }

    #[test]
    fn fedavg_arithmetic() {
        let agg = aggregate_fedavg(&[(0, delta(&[2.0])), (1, delta(&[4.0]))], 0.5).unwrap();
        assert_eq!(agg, vec![1.5]);
        let same = aggregate_fedavg(&[(0, delta(&[0.3, -1.7])), (1, delta(&[0.3, -1.7])), (2, delta(&[0.3, -1.7]))], 0.8).unwrap();
        let single = aggregate_fedavg(&[(0, delta(&[0.3, -1.7]))], 0.8).unwrap();
        assert_eq!(same, single);
        assert!(matches!(aggregate_fedavg(&[], 1.0), Err(FederationError::NoDeltas)));
        assert!(matches!(
            aggregate_fedavg(&[(0, delta(&[1.0])), (1, delta(&[1.0, 2.0]))], 1.0),
            Err(FederationError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn fedavg_ignores_arrival_order() {
        let ds: Vec<(ParticipantId, GradientDelta)> = (0..5)
            .map(|i| (i, delta(&[0.1 * i as f32 + 1e-7, 3.3 / (i as f32 + 1.0), -0.7])))
            .collect();
        let mut rev = ds.clone();
        rev.reverse();
        let a = aggregate_fedavg(&ds, 1.0).unwrap();
        let b = aggregate_fedavg(&rev, 1.0).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn closed_form_ledger() {
        let cfg = FederationConfig {
            participants: 5,
            rounds: 10,
            ..FederationConfig::default()
        };
        let ledger = comms_accounting(&cfg, 64);
        let per = 24 + 10 * 2 * 313_441 * 4;
        assert!(ledger.per_participant().values().all(|&b| b == per));
        assert_eq!(ledger.total(), 5 * per);
        let zero = comms_accounting(&FederationConfig { rounds: 0, ..cfg }, 64);
        assert_eq!(zero.total(), 5 * 24);
    }

    #[test]
    fn access_log_flags_foreign_reads() {
        let log = Arc::new(AccessLog::default());
        let store = PrivateStore::new(3, vec![], Arc::clone(&log));
        store.open(3);
        assert!(log.only_self_access());
        store.open(1);
        assert!(!log.only_self_access());
        assert_eq!(log.entries(), vec![(1, 3, 1), (3, 3, 1)]);
    }

    #[test]
    fn store_strips_benchmark_metadata() {
        let v = VideoRecord::new("a", vec![1.0; 4], 2, 2)
            .unwrap()
            .with_tags(Some("e".into()), Some("s".into()), Some(1))
            .with_gt(vec![1, 1, 0, 0])
            .unwrap();
        let store = PrivateStore::new(0, vec![v], Arc::new(AccessLog::default()));
        let seen = &store.open(0)[0];
        assert!(seen.event_class.is_none() && seen.scene_class.is_none());
        assert!(seen.weak_label.is_none() && seen.gt_frame_labels.is_none());
    }
}
