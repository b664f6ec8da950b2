//! Stacked deconvolutional networks for semantic segmentation: tensors and
//! differentiable ops, a static compute graph, the SDN architecture,
//! training, analysis and data handling.

pub mod analyzer;
pub mod builder;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod sdn;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use analyzer::ArchReport;
pub use data::{Dataset, Sample};
pub use error::{Error, Result};
pub use graph::{ComputeGraph, Feed, Network, NodeId, Param};
pub use layers::{BlockConfig, EncoderConfig, EncoderKind, SkipTap};
pub use metrics::EvalAccumulator;
pub use ops::Mode;
pub use sdn::{SdnConfig, SdnModel, SupervisionHead};
pub use tensor::{LabelMap, Scalar, Shape4, Tensor4};
pub use trainer::TrainConfig;
