//! The segmentation network: residual U-Net backbone, class-aware kernel
//! controller and dynamic head.

pub mod checkpoint;
pub mod head;
pub mod layers;
pub mod model;
pub mod real;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use head::{
    apply_dynamic_head, encode_task, generate_kernels, global_average_pool, ClassVector,
    DynamicKernels, HeadShape,
};
pub use model::{
    backbone_forward, backward_pass, forward, forward_logits, forward_pass, init_params, sigmoid,
    Layout, ModelParams, NetworkConfig,
};
pub use real::Real;
pub use tensor::Tensor;
