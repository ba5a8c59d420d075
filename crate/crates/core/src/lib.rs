//! Trains small networks, records the full optimization trajectory and
//! measures how well each update lines up with the direction to the final
//! iterate.

pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod optim;
pub mod regularity;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
