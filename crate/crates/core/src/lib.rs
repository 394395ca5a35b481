//! Multi-spectral leaf anomaly segmentation.
//!
//! The crate covers the whole pipeline: band-ordered reflectance rasters
//! ([`spectral`], [`raster_io`]), polygon annotations ([`annotation`]), a
//! synthetic plate generator with exact ground truth ([`synth`]), the
//! segmentation network ([`model`]) and training, metrics and reporting
//! ([`train`]).

pub mod annotation;
pub mod error;
pub mod model;
pub mod raster_io;
pub mod spectral;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/bands.md")]
    mod bands {}
    #[doc = include_str!("../../../book/src/annotations.md")]
    mod annotations {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
