//! Nonlocal one-phase Stefan problems: melting and freezing driven by the
//! fractional Laplacian, solved through obstacle problems and cross-checked
//! against stable-process Monte Carlo.
//!
//! The guide in `book/` walks through each module; its snippets run as doctests.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fracops;
pub mod grid;
pub mod mc;
pub mod obstacle;
pub mod quad;
pub mod stefan;
pub mod valprops;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
    #[doc = include_str!("../../../book/src/obstacle.md")]
    mod obstacle {}
    #[doc = include_str!("../../../book/src/stefan.md")]
    mod stefan {}
    #[doc = include_str!("../../../book/src/particles.md")]
    mod particles {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
}
