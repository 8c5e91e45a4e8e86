//! Single-scale graph-attention MIL network and the multi-scale ensemble.

mod checkpoint;
mod ensemble;
mod network;
mod params;

pub use checkpoint::{Checkpoint, ScaleModel, CHECKPOINT_VERSION};
pub use ensemble::{multiscale_ensemble, UNIFORM_WEIGHTS};
pub use network::{
    aggregate, attention_pool, backward_single_scale, class_feature, cross_entropy, deepgcn_block,
    forward_single_scale, fuse_and_classify, graph_conv, softmax2, tile_probabilities, Backward, ScaleOutput,
    LAYER_NORM_EPS,
};
pub use params::{GcnBlock, ModelConfig, ModelParams, TensorRef};
