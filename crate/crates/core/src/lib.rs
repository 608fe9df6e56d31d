//! Open-set classification of spectral samples trained from labeled known
//! classes and an unlabeled, contaminated "wild" set.
//!
//! Unknown-class rejection is cast as one positive-unlabeled task per known
//! class. A truncated (Taylor) BCE bounds the gradient weight of wild
//! samples, and confidence-weighted losses on a second network restore it
//! for samples that look unknown.

pub mod confidence;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod numerics;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
