//! Fully-connected networks and the Adam optimizer.

mod adam;
mod network;

pub use adam::{Adam, AdamConfig, RowAdam};
pub use network::{BoundNetwork, FcNetwork, Layer, Role};
