//! moe-lens core: the `MOEL` checkpoint container, a minimal
//! Mixture-of-Experts forward engine with two-stage all-expert tracing,
//! synthetic model generators, and the static (weight) and dynamic
//! (behaviour) expert analyses.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod report;
pub mod store;
pub mod synth;

pub use analysis::{
    EntityLabel, Metric, Projection, RegressionReport, ReorderReport, SimilarityMatrix,
};
pub use dynamics::{ActivationRatio, RankCountMatrix, RoutingLog};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{
    Activation, Corpus, Expert, GateParams, GatingOrder, LayerTrace, LayerWeights, ModelConfig,
    MoeModel, TokenTrace, WhichMatrix,
};
pub use store::{read_checkpoint, write_checkpoint, Checkpoint, Tensor, TensorMeta};
pub use synth::{SynthMode, SynthSpec};
