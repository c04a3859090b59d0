//! Parameterized and structural layers with hand-derived backward passes.
//!
//! Every layer offers a pure `forward` (no state touched), a caching
//! `forward_train`, and a `backward` that consumes the cache, overwrites the
//! layer's parameter gradients and returns the input gradient.

mod conv;
mod linear;
mod pool;

pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use pool::{Flatten, MaxPool2d};
