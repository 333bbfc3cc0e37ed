//! Multi-series forecasting with disentangled global and local dynamics.
//!
//! The model is a convolutional-Transformer encoder-decoder. A global feature
//! encoder routes short-term convolution features through a vector-quantized
//! codebook shared by every series; a local feature encoder reuses the same
//! trunk but has the parameters of its last attention block generated, per
//! window, by a hypernetwork from a stochastic context variable that is
//! trained with contrastive multi-horizon coding. The decoder attends over
//! both encoder outputs to produce multi-step forecasts, transductively (on
//! series seen in training) or inductively (on series never trained on).
//!
//! Module map:
//! - [`graph`]: reverse-mode autodiff tape all forward passes are built on
//! - [`data`]: panels, window construction, splits, synthetic generation
//! - [`nets`]: causal convolution stacks and attention blocks
//! - [`vq`]: codebook, nearest-neighbor quantization, straight-through
//! - [`context`]: context posterior, contrastive and KL objectives
//! - [`paramgen`]: hypernetwork generating the local last-block parameters
//! - [`model`]: full assembly, losses, ablation variants, forecasting
//! - [`training`]: mini-batch loop, Adam, evaluation protocols
//! - [`metrics`]: MAPE / WAPE / SMAPE reports
//! - [`checkpoint`]: binary checkpoint container

pub mod checkpoint;
pub mod context;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod paramgen;
pub mod training;
pub mod vq;
pub(crate) mod rng;

pub use checkpoint::Checkpoint;
pub use context::ContextPosterior;
pub use data::{DatasetSplits, SeriesCollection, SyntheticSpec, WindowConfig, WindowSample};
pub use graph::{Graph, NodeId};
pub use metrics::MetricsReport;
pub use model::{LossBreakdown, ModelConfig, Variant};
pub use nets::{ParameterSet, SequenceTensor};
pub use training::TrainConfig;
pub use vq::Codebook;
