pub mod digest;
pub mod error;
pub mod fedsim;
pub mod fxp;
pub mod lut;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod proof;
pub mod sampler;
pub mod commit;
pub mod dataset;
pub mod tensor;

pub use digest::{Digest, Hasher};
pub use error::{Error, Result, Threat};
pub use fxp::{ErrorBudget, FxpFormat, FxpValue, OpTally};
pub use tensor::Tensor;
