//! Spatio-temporal forecasting with a frozen graph backbone adapted by a
//! residual temporal prompt network.

pub mod backbone;
pub mod diffengine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod shiftlab;
pub mod stdata;
pub mod suite;

pub use error::{Error, Result};
