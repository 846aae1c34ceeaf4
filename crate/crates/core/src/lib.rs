pub mod content_filter;
pub mod encoder;
pub mod error;
pub mod instruction_filter;
pub mod patching;
pub mod pipeline;
pub mod pnm;
pub mod synthdoc;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
