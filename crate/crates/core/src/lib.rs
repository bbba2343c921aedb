//! Surfel-Gaussian splatting, point-cloud structured latents, and cascaded
//! flow matching, sized to run and verify on a single CPU core.

pub mod autodiff;
pub mod checks;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod nets;
pub mod surfel;
pub mod synthetic;
