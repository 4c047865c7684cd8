//! Minimal differentiable-computation substrate: flat parameter vectors with
//! named segments, dense networks with exact hand-derived backprop, an Adam
//! optimizer, and a central finite-difference helper that serves as the
//! gradient oracle in tests.

mod adam;
mod fd;
mod net;
mod params;

pub use adam::AdamState;
pub use fd::central_diff_grad;
pub use net::{Activation, DenseNet, NetCache};
pub use params::{ParamVector, Segment};
