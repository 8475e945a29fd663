//! View-adaptive Gaussian splatting.

pub mod autodiff;
pub mod geometry;
pub mod gradients;
pub mod image;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod raster;
pub mod splat;
pub mod synth;
pub mod train;
pub mod view_adapt;
