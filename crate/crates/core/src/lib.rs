//! Region-of-attraction certificates for discrete-time plants in feedback with
//! neural-network controllers, using integral quadratic constraints on the
//! shifted activations.

pub mod bounds;
pub mod filters;
pub mod model;
pub mod multipliers;
pub mod roa;
pub mod sdp;
pub mod sim;
