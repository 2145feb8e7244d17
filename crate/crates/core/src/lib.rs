pub mod components;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod masking;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    pub mod decomposition {}
    #[doc = include_str!("../../../book/src/grouping.md")]
    pub mod grouping {}
    #[doc = include_str!("../../../book/src/masks.md")]
    pub mod masks {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/ingestion.md")]
    pub mod ingestion {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
