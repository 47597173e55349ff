//! From-scratch 3D neural network stack: tensors, layer kernels with
//! analytic backward passes, naive reference oracles, and the
//! deeply-supervised encoder-decoder network.

pub mod layers;
pub mod network;
pub mod reference;
pub mod tensor;

pub use network::{build_network, load_weights, save_weights, Network, NetworkConfig, NetworkOutputs};
pub use tensor::{Scalar, Tensor5};
