//! Slice-level compute kernels. Everything here works on raw row-major
//! buffers; shape validation happens in the autodiff op layer.

pub mod broadcast;
pub mod conv;
pub mod gemm;
pub mod layout;
pub mod norm;
pub mod pool;
