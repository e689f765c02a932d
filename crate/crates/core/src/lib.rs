//! Weakly supervised open-set domain adaptation by collaborative
//! distribution alignment.
//!
//! Two domains each carry a handful of labels over partly overlapping known
//! classes plus an unknown class. A linear map per domain is learned so that
//! both domains align in a shared space, while pseudo-labels on the
//! unlabeled samples are refined in an outer loop.

pub mod classifier;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod pipeline;
pub mod protocols;
pub mod pseudo_label;

pub use classifier::{ClassifierConfig, ProbabilisticClassifier};
pub use domain::{
    ClassKey, DomainDataset, DomainId, EffectiveLabel, Hyperparams, LabelState, TransformPair,
    WorkingLabels,
};
pub use error::{CdaError, Result};
pub use losses::{LossBreakdown, Objective, Term};
pub use optimizer::{minimize, SolverSettings, SolverTrace, Termination};
pub use pipeline::{run, PipelineOutcome, PipelineSettings, PredictionResult};
pub use protocols::{GroundTruth, ProtocolSplit, SyntheticSpec};
