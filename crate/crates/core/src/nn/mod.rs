//! Sequential feed-forward networks with dense and convolutional layers,
//! fixed rotation layers, softmax cross-entropy and Adam.

mod adam;
mod arch;
mod layer;
mod loss;
mod network;
mod tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use arch::{build_network, ArchSpec};
pub use layer::{Conv2d, Dense, Layer, ParamRole};
pub use loss::{argmax, softmax, softmax_in_place, softmax_xent_grad};
pub use network::{
    BackwardOptions, ForwardCache, GradientSet, Network, ParamLayout, TensorSpec, HEAD_INIT_STD,
};
pub use tensor::{Activations, Shape, Tensor4};
