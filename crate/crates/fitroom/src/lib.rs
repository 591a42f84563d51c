//! fitroom — a virtual-fitting-room toolkit: fashion-item annotation
//! ingestion, detection geometry and loss heads, pixel-space neural style
//! transfer with analytic gradients, detection metrics (mAP / ASDR), and
//! mask-guided compositing.
//!
//! The crate is a library plus a `fitroom` CLI. All operations are pure
//! functions of their inputs and safe to call concurrently on distinct
//! data.

pub mod annotations;
pub mod compositor;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nst;
pub mod pipeline;
pub mod raster;

pub use error::{Error, Result};
