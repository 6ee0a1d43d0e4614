//! Retrieval-augmented grasp force prediction.
//!
//! A pool of past grasps (object image, description, mass, minimum
//! slip-free force) is embedded once; for a new object the most similar
//! experiences are put in front of a multimodal model that answers with a
//! force in newtons. Baselines, a synthetic ground-truth oracle and
//! cross-validated evaluation live alongside.

pub mod evaluation;
pub mod gateway;
pub mod oracle;
pub mod pool;
pub mod predictors;
pub mod prompting;
pub mod retrieval;

pub use evaluation::{Outcome, MetricBlock, EvalReport};
pub use pool::{ExperienceRecord, Pool};
pub use predictors::{BackendKind, ForcePrediction};
