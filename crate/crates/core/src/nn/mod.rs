//! Minimal tensor and reverse-mode autodiff engine for 3D conv nets.

pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

#[cfg(test)]
mod gradcheck;

pub use kernels::ConvGeom;
pub use params::{kaiming_normal, uniform, Param, ParamId, ParamStore};
pub use real::{gemm, Layout, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sigmoid, Tensor};
