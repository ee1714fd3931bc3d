//! Federated, fully unsupervised video anomaly detection over pre-extracted
//! segment features.
//!
//! The pipeline runs in three stages per participant:
//!
//! 1. [`vpl`]: every video is summarised by `[sigma, entropy]` ([`stats`]) and a
//!    two-component GMM separates pseudo-normal from pseudo-anomalous videos.
//! 2. [`spl`]: each participant fits a Gaussian null model over segment feature
//!    norms of its pseudo-normal videos, the server pools them into a mixture,
//!    and a sliding window over mixture densities marks the anomalous region of
//!    every pseudo-anomalous video.
//! 3. [`federation`]: participants train the [`detector`] locally on those
//!    segment labels, the server averages their parameter deltas, and the labels
//!    are refined from the model's own confidence windows.
//!
//! [`harness`] evaluates frame-level ROC AUC and holds the text formats used
//! by the command line tool. [`splits`] builds the participant partitions.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod federation;
pub mod harness;
pub mod rng;
pub mod splits;
pub mod spl;
pub mod stats;
pub mod vpl;

pub use config::FederationConfig;
pub use dataset::{DatasetManifest, SplitRole, SyntheticSpec, VideoRecord};
pub use detector::{Gate, DetectorParams, GradientDelta, Layout, TrainBatch};
pub use federation::{CommsLedger, RunReport};
pub use harness::{EvalResult, FrameScoreTrack};
pub use spl::{NullGaussian, SegmentLabelSet, ServerMixture};
pub use splits::{SplitAssignment, SplitStrategy};
pub use stats::VideoSummary;
pub use vpl::{Gmm2, VideoLabelSet};
