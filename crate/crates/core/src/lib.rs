//! Point-supervised small-target segmentation testbed: a detector is trained
//! end-to-end against affinity targets propagated in-batch from single-pixel
//! annotations, with stabilizer axes, drift diagnostics, synthetic scenes,
//! detection metrics, and checkpoint soups.

pub mod affinity;
pub mod detector;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod pnm;
pub mod soup;
pub mod stabilizers;
pub mod synthgen;
pub mod tape;

pub use error::{Error, Result};
