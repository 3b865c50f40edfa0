//! Small lyncean fully convolutional network trained from scratch on CPU.

mod checkpoint;
mod infer;
mod network;
mod ops;
mod tensor;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use infer::{segment, Segmentation};
pub use network::{
    init_network, is_head_parameter, EncoderBlock, ForwardCache, Gradients, Granularity, Network, NetworkConfig, Param,
    INPUT_CHANNELS,
};
pub use ops::{
    bce_loss, bilinear_kernel, bilinear_upsample, conv2d_backward, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, sigmoid,
    upsample_geometry, ConvGrads, Pooled, BCE_EPS,
};
pub use tensor::Tensor;
pub use train::{encode_input, loss_and_logit_grad, pair_input, predict_mask, sgd_step, train, TrainConfig};
