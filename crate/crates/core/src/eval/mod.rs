pub mod analysis;
pub mod dataset;
pub mod idx;
pub mod probe;
