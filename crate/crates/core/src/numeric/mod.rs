//! Dense tensors, reverse-mode differentiation and fixed-step ODE integrators.

pub mod autodiff;
pub mod ode;
pub mod tensor;

pub use autodiff::{finite_diff_grad, grad, max_relative_error, program, value, Gradients, ScalarProgram, Tape, Var};
pub use ode::{integrate, integrate_observed, rk4_step, OdeState, Solver};
pub use tensor::Tensor;
