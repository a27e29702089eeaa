//! Post-hoc out-of-distribution detection on exported penultimate features.
//!
//! The pipeline is: load features and the classifier head ([`tensor_io`]),
//! rectify activations ([`rectify`]), recompute logits and score
//! ([`scoring`]), and measure FPR95 / AUROC ([`metrics`]). The
//! [`variational`] module estimates the optimal rectifier `g*` from
//! histogram densities and checks its gap guarantee.

pub mod csvfmt;
pub mod error;
pub mod metrics;
pub mod rectify;
pub mod scoring;
pub mod tensor_io;
pub mod variational;

pub use error::{Error, Result};
pub use metrics::{auroc, evaluate, fpr_at_95_tpr, grid_search, EvalEntry, EvalReport, TuneGrid};
pub use rectify::{apply_rectifier, estimate_thresholds, RectifierSpec, ThresholdVector, Variant};
pub use scoring::{ScoreMethod, ScoreVector};
pub use tensor_io::{ClassifierHead, FeatureSet, Matrix, Role, RunData};
