pub mod error;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod observables;
pub mod process;
pub mod specfun;
pub mod wigner;

pub use error::{Error, FieldError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/wigner.md")]
    mod wigner {}
    #[doc = include_str!("../../../book/src/observables.md")]
    mod observables {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/process.md")]
    mod process {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/caveats.md")]
    mod caveats {}
}
