//! Transformer classifiers trained with weighted sampling and grouped
//! layer-wise learning-rate decay.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use data::{ParagraphRecord, Vocabulary};
pub use ensemble::{Predictions, RunReport};
pub use error::{Error, Result};
pub use model::{Classifier, ModelConfig, Subtask};
pub use tensor::{Param, ParamId, ParamRole, ParamStore, Tensor};
pub use trainer::RunConfig;
