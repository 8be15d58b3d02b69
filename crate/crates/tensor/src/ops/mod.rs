mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
mod norm;
mod sample;
mod shape;

pub use elementwise::broadcast_shape;
