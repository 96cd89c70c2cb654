//! Layer kernels: forward and backward for every operation the model family
//! uses. All functions are pure and generic over the element type.

mod activation;
mod conv;
mod drop_path;
mod linear;
mod norm;
mod pool;

pub use activation::{
    channel_scale, channel_scale_backward, gelu, gelu_backward, normal_cdf, relu, relu_backward, sigmoid,
    sigmoid_backward, swap_channel_freq,
};
pub(crate) use activation::sigmoid_scalar;
pub use conv::{conv2d, conv2d_backward, conv2d_counted, pointwise, ConvGrads, ConvSpec, MacTally};
pub use drop_path::{apply_factors, drop_path, drop_path_with_mask};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{
    batch_norm2d, batch_norm2d_backward, layer_norm_channels, layer_norm_channels_backward, AffineGrads,
    BnSaved, BnUpdate, LnSaved, NormParams, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use pool::{avg_pool2x2, avg_pool2x2_backward, global_pool, global_pool_backward, PoolMode};
