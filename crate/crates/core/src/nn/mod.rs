//! The small set of differentiable layers the network needs, written out by
//! hand with explicit backward passes, plus SGD and a finite-difference
//! gradient checker.

mod gradcheck;
mod layers;
mod optim;

pub use gradcheck::{finite_diff_check, GradReport};
pub use layers::{
    adaptive_maxpool, conv_out_dim, maxpool, maxpool_backward, relu, relu_backward, softmax, softmax_ce, Conv2d,
    ConvGrads, Linear, LinearGrads, PoolIndex,
};
pub use optim::{ParamGroup, Sgd, SgdConfig};
