pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod checkpoint;
pub mod checks;
pub mod params;
pub mod rle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/perturbation.md")]
    mod perturbation {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/determinism.md")]
    mod determinism {}
}
