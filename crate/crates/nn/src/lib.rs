//! Small reverse-mode autodiff engine for CPU convolutional networks.
//!
//! Everything is NCHW `f32`. Convolutions are lowered to im2col + sgemm.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Penalty, Reduction, Var};
pub use layers::{load_module, BatchNorm2d, Conv2d, ConvTranspose2d, Init};
pub use optim::{Adam, AdamConfig};
pub use param::{join, Module, Param, ParamKey};
pub use tensor::{Shape, Tensor};
