//! Layers, losses, miniature model builders and the tagged parameter
//! registry that every masking decision keys on.

mod layers;
mod loss;
mod model;
mod registry;

pub use layers::{
    batch_norm_apply, batch_norm_forward, layer_norm_forward, BatchStats, ForwardMode, NormState,
    DEFAULT_BN_MOMENTUM, DEFAULT_NORM_EPS,
};
pub use loss::{accuracy_count, cross_entropy_ls, LOGIT_NORM_GUARD};
pub use model::{build_model, Architecture, Evaluation, Forward, Model, ModelSpec, TrainableScope};
pub use registry::{norm_fraction, ParamTag, ParamView, Registry};
