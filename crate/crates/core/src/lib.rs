pub mod backbone;
pub mod codec;
pub mod distill;
pub mod error;
pub mod flow;
pub mod harness;
pub mod kvcache;
pub mod masking;
pub mod optim;
pub mod oracle;
pub mod session;
pub mod tensor;

pub use error::{Error, Result};
