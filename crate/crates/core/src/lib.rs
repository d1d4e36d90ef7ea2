//! Face anti-spoofing with multi-view slot attention over class-text
//! embeddings and multi-text patch alignment.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod mtpa;
pub mod mvs;
pub mod nn;
pub mod params;
pub mod text_bank;

pub use error::{Error, Result};
pub use model::{MvpFas, ModelConfig};
