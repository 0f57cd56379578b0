//! Deterministic forward pass.

pub mod ops;
pub mod params;
pub mod reference;
mod tensor;

pub use ops::{
    eval_layer, eval_window, flow_stack, is_windowed, forward_conv, forward_fc, temporal_pyramid, FlowFn,
    FrameDifference,
};
pub use params::{generate_layer_params, BatchNormStats, LayerParams, ModelParams};
pub use reference::{
    run_clip, run_clip_trace, run_frames, run_reference, ClipSpec, LayerTrace, Outputs,
};
pub use tensor::Tensor;
