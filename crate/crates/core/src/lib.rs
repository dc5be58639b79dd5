#![no_std]
extern crate alloc;

pub mod episode;
pub mod error;
pub mod eval;
pub mod fps;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod warm;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
