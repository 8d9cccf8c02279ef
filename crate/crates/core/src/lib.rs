pub mod datapipe;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod io;
pub mod model;
pub mod oracle;
pub mod pretrain;
pub mod reward;
pub mod rlhf;
pub mod rng;
pub mod sft;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
