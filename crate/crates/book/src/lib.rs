//! The chapters of `book/` compiled as documentation, so that
//! `cargo test --doc` runs every code block in the guide.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/two_step.md")]
pub mod two_step {}
#[doc = include_str!("../../../book/src/gabor.md")]
pub mod gabor {}
#[doc = include_str!("../../../book/src/interpretability.md")]
pub mod interpretability {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
