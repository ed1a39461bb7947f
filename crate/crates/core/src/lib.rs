pub mod adam;
pub mod approx;
pub mod capture;
pub mod container;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod span;
pub mod synth;
pub mod tensor;

pub use container::Container;
pub use error::{Error, FormatError, Result};
pub use model::{ModelConfig, TransformerModel};
pub use span::Span;
pub use tensor::Tensor;
