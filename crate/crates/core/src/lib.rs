//! Two-stage Laplacian-pyramid neural style transfer.

pub mod archive;
pub mod base_net;
pub mod detail_net;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod image;
pub mod losses;
pub mod optim;
pub mod params;
pub mod plot;
pub mod pyramid;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
