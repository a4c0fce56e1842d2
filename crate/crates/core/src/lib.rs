pub mod ablate;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod config;
pub mod kv;
pub mod llm;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod vision;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub use vocab::{TokenSequence, Vocab};
