//! Continual prediction of notification attendance from phone-usage event
//! streams.

pub mod encode;
pub mod error;
pub mod eval;
pub mod events;
pub mod features;
pub mod gbt;
pub mod pipeline;
pub mod rnn;
pub mod sequencing;
pub mod stats;
pub mod synthgen;
pub mod weighting;

pub use error::{Error, Result};

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/weighting.md")]
    mod weighting {}
    #[doc = include_str!("../../../book/src/sequencing.md")]
    mod sequencing {}
    #[doc = include_str!("../../../book/src/gbt.md")]
    mod gbt {}
    #[doc = include_str!("../../../book/src/rnn.md")]
    mod rnn {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
