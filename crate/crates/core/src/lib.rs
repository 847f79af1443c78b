//! Anti-windup compensator synthesis: smoothed closed-loop simulation, gradient
//! training of controller gains, and LMI certification of invariant ellipsoids.

pub mod certify;
pub mod config;
pub mod design;
pub mod error;
pub mod fixtures;
pub mod matrix;
pub mod model;
pub mod sim;
pub mod train;

pub use certify::{certify, verify_certificate, CertifiedEllipsoid, Certification, CertifyOptions, ShapeRefSet};
pub use design::{evaluate_controller, run_design, DesignConfig, DesignReport};
pub use error::{Error, Result};
pub use model::{assemble_closed_loop, ClosedLoopSystem, ControllerGains, PlantModel, SaturationMode, SmoothingParam};
