//! Query-driven explanations of aggregate queries.
//!
//! Past center-radius queries and their answers are quantized into location
//! and radius representatives, each cell gets a piecewise-linear model of the
//! answer as a function of the radius, and the resulting model explains (and
//! predicts) new queries without touching the underlying data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
mod error;
pub mod explainer;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod plr;
pub mod quantizer;
pub mod trainer;
pub mod workloadgen;

pub use dataset::{radius_grid, AggregateKind, AqAnswer, Dataset, ScalingParams};
pub use error::{Error, Result};
pub use explainer::{build_explanation, predict_answer, CurvePoint, ExplanationExport, ExplanationFunction, Prediction};
pub use geometry::{NormOrder, Point, Query};
pub use metrics::{evaluate, EvalOptions, EvaluationReport};
pub use model::{ExplanationModel, Hyperparams, ModelScaling, ModelStore, Snapshot};
pub use plr::{PlrConfig, PlrModel};
pub use quantizer::{KMeansConfig, SelectKConfig};
pub use trainer::{preprocess, Trainer};
pub use workloadgen::{Family, Workload, WorkloadSpec};
