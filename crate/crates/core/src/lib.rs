//! Desk-scale laboratory comparing chain-of-thought and self-cascade
//! speech translation on a synthetic micro-world.

pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod synthworld;
pub mod training;
pub mod vocab;

pub use error::{LabError, Result};
