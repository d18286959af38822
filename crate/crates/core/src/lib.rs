pub mod dataio;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod masking;
pub mod model;
pub mod objective;
pub mod params;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{precision, set_precision, Precision, Tensor};
