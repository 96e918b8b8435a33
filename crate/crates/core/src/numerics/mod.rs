//! Differentiable-computation core shared by the encoders and the fusion
//! head: parameter storage, dense and activation primitives, the Bernoulli
//! cross-entropy loss, Adam, and a central-difference gradient checker.

mod adam;
pub mod checkpoint;
mod gradcheck;
pub mod hexfloat;
mod ops;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, DEFAULT_EPS};
pub use ops::{
    dense_backward, dense_forward, log_sigmoid, logsumexp, matvec_acc, matvec_t_acc, outer_acc,
    sigmoid, sigmoid_xent_loss, softmax, softplus,
};
pub use params::{glorot_limit, Gradients, LossValue, Param, ParamId, ParamStore};
