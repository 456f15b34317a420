//! Dyadic models of the two-weight inequality for the Hilbert transform.

pub mod analysis;
pub mod caps;
pub mod checks;
pub mod constants;
pub mod corpus;
pub mod error;
pub mod forms;
pub mod gen;
pub mod grid;
pub mod haar;
pub mod io;
pub mod linalg;
pub mod measure;
pub mod sizelemma;
pub mod sum;

pub use error::{Error, Result};
pub use grid::{DyadicInterval, GridConfig};
pub use measure::{AtomicMeasure, MeasurePair, TruncationWindow};
