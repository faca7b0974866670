//! Wheel-vehicle ownership prediction from detection boxes.
//!
//! Pipeline: [`synthgen`] scenes → [`prior`] fitted on pair geometry →
//! [`graph`] per scene → [`relnet`] embeddings → cosine matching, trained by
//! [`training`] and scored against the IoU [`baseline`] by [`eval`].

pub mod baseline;
pub mod eval;
pub mod graph;
pub mod neural;
pub mod prior;
pub mod relnet;
pub mod render;
pub mod scene;
pub mod synthgen;
pub mod training;

pub use baseline::{iou, logic_assign};
pub use eval::{compare, score_predictions, score_split, Comparison, EvalReport, SplitReport};
pub use graph::{build_graph, GraphConfig, RelGraph};
pub use prior::{fit_prior, pair_geometry, PairKind, PriorModel};
pub use relnet::{match_pairs, InputMode, NodeInputs, RelNet, RelNetConfig};
pub use scene::{DetBox, ObjectClass, OwnershipPrediction, Scene};
pub use synthgen::{generate, Difficulty, GenConfig};
pub use training::{train, TrainConfig};
