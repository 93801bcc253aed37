//! The guide's chapters, included as docs so their listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/admm.md")]
pub mod admm {}

#[doc = include_str!("../../../book/src/closed-loop.md")]
pub mod closed_loop {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
