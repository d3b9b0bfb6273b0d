//! SSMamba: selective-scan state-space vision backbone with local
//! perception residual embeddings, masked-image pretraining and a
//! multi-task MIL head, on a small self-contained autodiff engine.

pub mod autodiff;
pub mod backbone;
pub mod check;
pub mod dms;
pub mod error;
pub mod gradcam;
pub mod imageops;
pub mod io;
pub mod lpr;
pub mod mamim;
pub mod metrics;
pub mod mil;
pub mod nn;
pub mod params;
pub mod scan;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
