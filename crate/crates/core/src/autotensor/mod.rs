//! Dense tensors with hand-written forward and backward passes for the U-Net layers.

mod adam;
mod conv;
mod gradcheck;
mod layers;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv3d_backward, conv3d_backward_padded, conv3d_forward, conv3d_forward_padded, ConvGrads};
pub use gradcheck::{gradcheck, layer_gradchecks, relative_error, Coordinate, GradcheckReport, GRADCHECK_EPS};
pub use layers::{
    concat_channels, maxpool2_spatial_backward, maxpool2_spatial_forward, mse_loss_backward, mse_loss_forward, relu_backward, relu_forward,
    split_channels, upsample2_nearest_backward, upsample2_nearest_forward, MaxPool,
};
pub use tensor::{Parameter, Real, Tensor};
