//! Dense arrays, named parameters and a reverse-mode tape.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::{one_hot, resize_bilinear, DType, NdArray, Scalar};
pub use graph::{Gradients, Graph, PatchGeometry, Var};
pub use params::{Group, ParamEntry, ParamStore};
