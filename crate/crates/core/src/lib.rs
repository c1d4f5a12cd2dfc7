mod bytes;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod modality;
pub mod numeric;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::{Modality, TaskType};
pub use numeric::{Graph, Tensor, Var};
