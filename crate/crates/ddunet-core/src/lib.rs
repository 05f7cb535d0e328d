//! Self-contained engine for lightweight binary cloud segmentation: a small
//! tensor/autodiff core, the dual-dynamic U-Net model built on it, losses and
//! metrics, dataset plumbing, and a trainer.

pub mod blocks;
pub mod data;
pub mod dmsc;
pub mod dwbg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use init::Initializer;
pub use loss::LossWeights;
pub use metrics::{Aggregation, MetricsReport};
pub use model::{binarize_logits, DdunetConfig, DdunetModel, Mode, ModelVariant};
pub use ops::BnMode;
pub use params::{Collect, ParamStore, TensorRole};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
pub use trainer::{evaluate, predict_to_dir, train, EvalConfig, TrainConfig};
