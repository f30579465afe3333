pub mod arm;
pub mod data;
pub mod error;
pub mod gates;
pub mod harness;
pub mod lifecycle;
pub mod net;
pub mod tensor;

pub use error::{NpnError, Result};
