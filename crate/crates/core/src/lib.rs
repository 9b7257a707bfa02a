//! Adversarial patch and clothing-texture attacks against person detectors,
//! the patch defenses they are evaluated against, and the metrics used to
//! score both.

pub mod model;
pub mod transforms;
pub mod optim;
pub mod toyworld;
pub mod gateway;
pub mod evaluation;
pub mod defenses;
pub mod attacks;
pub mod harness;
