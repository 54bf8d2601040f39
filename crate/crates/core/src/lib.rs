//! Content-adaptive tone-curve retouching guided by attribute text.

pub mod app;
pub mod attributes;
pub mod autodiff;
pub mod curves;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod style;
pub mod synth;
pub mod training;

pub use error::{Error, ImageError, Result, ShapeError};
pub use image::Image;
