//! Continual post-training laboratory: small enumerable softmax policies,
//! supervised and policy-gradient updates over a stream of interfering tasks,
//! forgetting metrics, Fisher-information forgetting risk, and rollout-based
//! instance filtering.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod param;
pub mod policy;
pub mod rif;
pub mod risk;
pub mod seed;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use param::ParamVector;
pub use estimators::{EstimatorKind, GradEstimate};
pub use experiment::{ExperimentConfig, ReportTable, RunSlice};
pub use policy::{Policy, PolicyModel, Prompt, Response, TabularSoftmax, TinyMlp, Vocab};
pub use rif::{FilterConfig, FilterSummary};
pub use risk::{RiskConfig, RiskMode, RiskReport, ScoreBank, TraceConfig};
pub use task::{StreamConfig, TaskDataset, TaskStream};
pub use trainer::{Metrics, PerfMatrix, RunRecord};
