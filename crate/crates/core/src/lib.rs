pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod matching;
pub mod pairing;
pub mod par;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
