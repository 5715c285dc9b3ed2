//! Bell-inequality diagnostics for entangling links in small quantum
//! networks.
//!
//! The crate builds linear cluster states under configurable noise models,
//! evaluates two-setting full-correlation Bell expressions on every qubit
//! sub-grouping, and fits noise parameters so each network link gets a
//! quality figure. See the `book/` guide for worked examples.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod quantum;
pub mod wwzb;

pub use error::{Error, Result};

// Run every code snippet in the book as a doctest so the guide and the
// crate cannot drift apart.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/states-and-channels.md")]
    pub mod states_and_channels {}
    #[doc = include_str!("../../../book/src/bell-inequalities.md")]
    pub mod bell_inequalities {}
    #[doc = include_str!("../../../book/src/noise-models.md")]
    pub mod noise_models {}
    #[doc = include_str!("../../../book/src/grouping-diagnostics.md")]
    pub mod grouping_diagnostics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub mod command_line {}
}
