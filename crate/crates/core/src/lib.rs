//! Continual-learning benchmark for dense segmentation.
//!
//! The crate is organised around the life cycle of one experiment:
//!
//! * [`scenarios`] builds task streams (domain-, class-, and
//!   organ-incremental) from synthetic generators or an on-disk manifest;
//! * [`segmodel`] is the differentiable encoder–decoder segmenter;
//! * [`buffers`] holds replay memory and its provenance accounting;
//! * [`strategies`] implements the continual-learning methods as hooks
//!   around a plain SGD loop;
//! * [`metrics`] turns the accuracy matrix into the summary metrics;
//! * [`harness`] runs configured experiments, sweeps, and reports.

pub mod buffers;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod scenarios;
pub mod seeding;
pub mod segmodel;
pub mod strategies;

pub use error::{Error, Result};

/// The guide's chapters, compiled so that their examples run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/scenarios.md")]
    pub struct Scenarios;
    #[doc = include_str!("../../../book/src/segmodel.md")]
    pub struct Segmodel;
    #[doc = include_str!("../../../book/src/buffers.md")]
    pub struct Buffers;
    #[doc = include_str!("../../../book/src/strategies.md")]
    pub struct Strategies;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/harness.md")]
    pub struct Harness;
    #[doc = include_str!("../../../book/src/acceptance.md")]
    pub struct Acceptance;
}
