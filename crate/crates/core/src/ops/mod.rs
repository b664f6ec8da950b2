//! Primitive differentiable operations. Each forward function has a
//! matching backward function; the graph engine in [`crate::graph`] wires
//! them together.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod pool;
mod resize;

pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, conv2d_output_shape, conv_out_len, deconv2d,
    deconv2d_backward, deconv2d_direct, deconv2d_output_shape, deconv_out_len, ConvAttrs,
    ConvGrads,
};
pub use elementwise::{
    concat_backward, concat_channels, dropout, dropout_backward, eltwise_add, relu, relu_backward,
};
pub use loss::{softmax_ce_loss, softmax_channels};
pub use norm::{batch_norm, batch_norm_backward, BnAttrs, BnCache, BnGrads, RunningStats};
pub use pool::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, PoolAttrs};
pub use resize::{bilinear_resize, bilinear_resize_backward};

/// Whether batch norm uses batch statistics and dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
