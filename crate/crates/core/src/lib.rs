pub mod augmentation;
pub mod checkpoint;
pub mod conv;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod model_zoo;
pub mod optim;
pub mod par;
pub mod signal_io;
pub mod tcn;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
