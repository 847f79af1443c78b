//! Reference data for the two-input unstable benchmark plant.
//!
//! `C_p` is the identity (full state measurement) and the initial controller applies
//! `D_c` to the measured output.

use nalgebra::{DMatrix, DVector};

use crate::certify::ShapeRefSet;
use crate::model::{ControllerGains, PlantModel};

/// Reported sizes of competing designs. They come from a different optimization
/// problem and are only printed for comparison, never asserted against.
pub const BASELINE_ALPHAS: &[(&str, f64)] = &[
    ("modified sector condition, |E_c|^2 <= 100", 36.6119),
    ("modified sector condition, unconstrained", 71.72),
    ("iterative LMI, |E_c|^2 <= 10000", 40.4398),
    ("iterative LMI, second reference set", 8.4737),
];

/// Size measure reported for the best trained controller on the first reference set.
pub const REPORTED_FINAL_ALPHA: f64 = 82.858;

/// Initial condition on the boundary of the reported ellipsoid.
pub const BOUNDARY_INITIAL_STATE: [f64; 4] = [-43.48, -66.78, 0.0, 0.0];

fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, c, d])
}

pub fn plant() -> PlantModel {
    PlantModel::new(m2(0.1, 0.0, 0.0, -0.1), m2(1.5, 4.0, 1.2, 3.0), DMatrix::identity(2, 2))
        .expect("fixture plant is consistent")
}

/// Initial controller, `E_c = 0`.
pub fn initial_gains() -> ControllerGains {
    ControllerGains::new(
        DMatrix::zeros(2, 2),
        m2(-1.0, 0.0, 0.0, -1.0),
        m2(0.3333, 0.0, 0.0, -0.1),
        m2(-3.3333, 0.0, 0.0, 1.0),
        DMatrix::zeros(2, 2),
    )
    .expect("fixture gains are consistent")
}

/// Trained controller reported for stage 17 of the first example.
pub fn final_gains() -> ControllerGains {
    ControllerGains::new(
        m2(-0.9134, 0.5888, -0.4153, -1.5813),
        m2(-1.2601, -0.2081, 0.3309, -0.6955),
        m2(-0.1852, 0.6730, 0.2955, -0.4372),
        m2(-3.9034, -0.3487, -0.8045, 0.2136),
        m2(-0.0195, 1.5041, 0.4874, -1.3736),
    )
    .expect("fixture gains are consistent")
}

/// Single-vertex reference set `(0.6, 0.4, 0, 0)`.
pub fn reference_set_1() -> ShapeRefSet {
    ShapeRefSet::new(vec![DVector::from_row_slice(&[0.6, 0.4, 0.0, 0.0])]).unwrap()
}

/// Two-vertex reference set `{(1, 1, 0, 0), (1, -1, 0, 0)}`.
pub fn reference_set_2() -> ShapeRefSet {
    ShapeRefSet::new(vec![
        DVector::from_row_slice(&[1.0, 1.0, 0.0, 0.0]),
        DVector::from_row_slice(&[1.0, -1.0, 0.0, 0.0]),
    ])
    .unwrap()
}
