//! A hierarchical vision backbone with a pluggable token mixer, built on a
//! small tape-based autodiff engine.

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod element;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod kernels;
pub mod mixers;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
