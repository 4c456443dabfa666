pub mod error;
pub mod geometry;
pub mod segmentation;
pub mod classify;
pub mod kinematics;
pub mod mapping;
pub mod planning;
pub mod servo;

pub use error::{Error, Result};
pub mod sim;
