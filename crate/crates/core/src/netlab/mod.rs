//! Finite random networks: sampling, forward passes and exact Jacobians
//! under every normalization mode.

pub mod backprop;
pub mod forward;
pub mod params;

pub use backprop::{
    empirical_backward_order_params, finite_diff_check, jacobian, jacobian_of, loss, loss_and_grad,
    output_jacobian, reversed_fim_direct, vjp, EmpiricalBackward, JacobianBlock,
};
pub use forward::{forward, outputs, ForwardTrace, NormStats};
pub use params::{init_params, layer_widths, moments, Batch, Params, SampleMoments};
