//! Minimal trainable convolutional classifier with exact reverse-mode gradients.

mod loss;
mod network;
mod optim;
mod real;

pub use loss::{argmax, cross_entropy, cross_entropy_grad, softmax};
pub use network::{
    build_mnist_net, mnist_architecture, Backward, BatchGrads, Conv, ConvGrad, Gradients, Layer,
    LayerSpec, Network,
};
pub use optim::{sgd_step, Sgd, TrainConfig};
pub use real::Real;
