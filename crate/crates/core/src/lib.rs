//! Item recommendation constrained by logical queries over a knowledge graph.
//!
//! The crate answers a user's logical requirement (projections,
//! intersections and unions over KG relations) jointly with the user's
//! preference, either exactly by traversal ([`oracle`]) or approximately with
//! learned query embeddings and a multi-task mixture-of-experts head
//! ([`model`], [`train`]). [`dataset`] builds benchmark instances whose test
//! answers need held-out edges, and [`eval`] ranks items and reports
//! hit@K / ndcg@K per query shape.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the pipeline uses.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod kg;
pub mod model;
pub mod oracle;
pub mod query;
pub mod scalar;
pub mod sets;
pub mod synthetic;
pub mod train;

pub use dataset::{build_dataset, Dataset, DatasetConfig, SplitName};
pub use eval::{evaluate, EvalReport, TargetMode};
pub use kg::{load_graph, split_edges, EntityId, KgError, KgSplit, KnowledgeGraph, RelationId, Triple, Vocab};
pub use model::{ModelConfig, Task, Variant};
pub use query::{classify_shape, parse_query, serialize_query, AnswerSets, RecInstance, QueryNode, QueryShape};
pub use scalar::Scalar;
pub use sets::IdSet;
pub use train::TrainConfig;

pub type Tensor = autodiff::Tensor<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Gradients = autodiff::Gradients<f64>;
pub type Tape<'p> = autodiff::Tape<'p, f64>;
pub type Model = model::RecModel<f64>;
pub type TrainOutcome = train::TrainOutcome<f64>;
