mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use elementwise::{broadcast_shape, sigmoid, softplus, softplus_inv, sum_to_shape};
pub use shape::{concat, PadMode};
