pub mod ablation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod matching;
pub mod model;
pub mod tensor;
pub mod training;

pub use ablation::{AblationSpec, Variant};
pub use error::{Error, Result};
pub use model::{ModelDims, ParameterSet};
