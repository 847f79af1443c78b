//! Plant, controller and closed-loop models, plus the saturation nonlinearities.
//!
//! The closed loop is kept in the compact form
//! `dx/dt = (A - BF) x + B sat(F x)` with joint state `x = [x_p; x_c]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, expect_shape};

/// Default smoothing parameter for the differentiable saturation.
pub const DEFAULT_ZETA: f64 = 1e-6;

/// Open-loop plant `dx_p/dt = A_p x_p + B_p sat(u)`, `y = C_p x_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlantRaw", into = "PlantRaw")]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantRaw {
    #[serde(rename = "A_p", with = "matrix::rows")]
    a: DMatrix<f64>,
    #[serde(rename = "B_p", with = "matrix::rows")]
    b: DMatrix<f64>,
    #[serde(rename = "C_p", with = "matrix::rows")]
    c: DMatrix<f64>,
}

impl TryFrom<PlantRaw> for PlantModel {
    type Error = Error;
    fn try_from(raw: PlantRaw) -> Result<Self> {
        PlantModel::new(raw.a, raw.b, raw.c)
    }
}

impl From<PlantModel> for PlantRaw {
    fn from(p: PlantModel) -> Self {
        PlantRaw { a: p.a, b: p.b, c: p.c }
    }
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("plant has zero states".into()));
        }
        expect_shape("A_p", &a, n, n)?;
        let m = b.ncols();
        expect_shape("B_p", &b, n, m)?;
        let l = c.nrows();
        expect_shape("C_p", &c, l, n)?;
        if m == 0 || l == 0 {
            return Err(Error::InvalidArgument("plant needs at least one input and one output".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    /// Plant state dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Output dimension.
    pub fn l(&self) -> usize {
        self.c.nrows()
    }
}

/// Dynamic output-feedback controller with anti-windup gain:
///
/// ```text
/// dx_c/dt = A_c x_c + B_c y + E_c (sat(u) - u)
///       u = C_c x_c + D_c y
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainsRaw", into = "GainsRaw")]
pub struct ControllerGains {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsRaw {
    #[serde(rename = "A_c", with = "matrix::rows")]
    a: DMatrix<f64>,
    #[serde(rename = "B_c", with = "matrix::rows")]
    b: DMatrix<f64>,
    #[serde(rename = "C_c", with = "matrix::rows")]
    c: DMatrix<f64>,
    #[serde(rename = "D_c", with = "matrix::rows")]
    d: DMatrix<f64>,
    #[serde(rename = "E_c", with = "matrix::rows")]
    e: DMatrix<f64>,
}

impl TryFrom<GainsRaw> for ControllerGains {
    type Error = Error;
    fn try_from(raw: GainsRaw) -> Result<Self> {
        ControllerGains::new(raw.a, raw.b, raw.c, raw.d, raw.e)
    }
}

impl From<ControllerGains> for GainsRaw {
    fn from(g: ControllerGains) -> Self {
        GainsRaw { a: g.a, b: g.b, c: g.c, d: g.d, e: g.e }
    }
}

impl ControllerGains {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
    ) -> Result<Self> {
        let nc = a.nrows();
        if nc == 0 {
            return Err(Error::InvalidArgument("controller has zero states".into()));
        }
        expect_shape("A_c", &a, nc, nc)?;
        let l = b.ncols();
        expect_shape("B_c", &b, nc, l)?;
        let m = c.nrows();
        expect_shape("C_c", &c, m, nc)?;
        expect_shape("D_c", &d, m, l)?;
        expect_shape("E_c", &e, nc, m)?;
        Ok(Self { a, b, c, d, e })
    }

    pub fn zeros(nc: usize, m: usize, l: usize) -> Self {
        Self {
            a: DMatrix::zeros(nc, nc),
            b: DMatrix::zeros(nc, l),
            c: DMatrix::zeros(m, nc),
            d: DMatrix::zeros(m, l),
            e: DMatrix::zeros(nc, m),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn nc(&self) -> usize {
        self.a.nrows()
    }

    /// Same controller with the anti-windup gain replaced.
    pub fn with_anti_windup(&self, e: DMatrix<f64>) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone(), e)
    }

    /// Same controller with `E_c = 0`.
    pub fn without_anti_windup(&self) -> Self {
        let mut g = self.clone();
        g.e.fill(0.0);
        g
    }

    pub fn check_compatible(&self, plant: &PlantModel) -> Result<()> {
        if self.c.nrows() != plant.m() {
            return Err(Error::dims("C_c rows (inputs)", plant.m(), self.c.nrows()));
        }
        if self.d.nrows() != plant.m() || self.d.ncols() != plant.l() {
            return Err(Error::dims("D_c", format!("{}x{}", plant.m(), plant.l()), matrix::shape(&self.d)));
        }
        if self.b.ncols() != plant.l() {
            return Err(Error::dims("B_c columns (outputs)", plant.l(), self.b.ncols()));
        }
        if self.e.ncols() != plant.m() {
            return Err(Error::dims("E_c columns (inputs)", plant.m(), self.e.ncols()));
        }
        Ok(())
    }
}

/// Smoothing parameter of the differentiable saturation; always positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SmoothingParam(f64);

impl SmoothingParam {
    pub fn new(zeta: f64) -> Result<Self> {
        if zeta.is_finite() && zeta > 0.0 {
            Ok(Self(zeta))
        } else {
            Err(Error::InvalidArgument(format!("smoothing parameter must be positive, got {zeta}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for SmoothingParam {
    fn default() -> Self {
        Self(DEFAULT_ZETA)
    }
}

impl TryFrom<f64> for SmoothingParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SmoothingParam> for f64 {
    fn from(z: SmoothingParam) -> f64 {
        z.0
    }
}

/// Which saturation the closed-loop vector field uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaturationMode {
    Exact,
    Smooth(SmoothingParam),
}

#[inline]
pub fn sat_scalar(u: f64) -> f64 {
    u.clamp(-1.0, 1.0)
}

#[inline]
pub fn smooth_sat_scalar(u: f64, zeta: f64) -> f64 {
    0.5 * ((zeta + (u + 1.0) * (u + 1.0)).sqrt() - (zeta + (u - 1.0) * (u - 1.0)).sqrt())
}

#[inline]
pub fn smooth_sat_derivative_scalar(u: f64, zeta: f64) -> f64 {
    let p = u + 1.0;
    let q = u - 1.0;
    0.5 * (p / (zeta + p * p).sqrt() - q / (zeta + q * q).sqrt())
}

/// Component-wise unit saturation.
pub fn saturate(u: &DVector<f64>) -> DVector<f64> {
    u.map(sat_scalar)
}

pub fn smooth_saturate(u: &DVector<f64>, zeta: SmoothingParam) -> DVector<f64> {
    u.map(|v| smooth_sat_scalar(v, zeta.0))
}

/// Component-wise derivative of [`smooth_saturate`]; lies in `(0, 1]`.
pub fn smooth_saturate_derivative(u: &DVector<f64>, zeta: SmoothingParam) -> DVector<f64> {
    u.map(|v| smooth_sat_derivative_scalar(v, zeta.0))
}

/// Closed loop in compact form, assembled from a plant and controller gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    f: DMatrix<f64>,
    a_minus_bf: DMatrix<f64>,
    n: usize,
    nc: usize,
}

impl ClosedLoopSystem {
    /// Build directly from `(A, B, F)` with the plant/controller split `n + nc`.
    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>, f: DMatrix<f64>, n: usize) -> Result<Self> {
        let dim = a.nrows();
        if n > dim {
            return Err(Error::dims("plant split", format!("<= {dim}"), n));
        }
        expect_shape("A", &a, dim, dim)?;
        let m = b.ncols();
        expect_shape("B", &b, dim, m)?;
        expect_shape("F", &f, m, dim)?;
        let a_minus_bf = &a - &b * &f;
        Ok(Self { a, b, f, a_minus_bf, n, nc: dim - n })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }
    /// `A - BF`, the vector field with every input fully saturated-out.
    pub fn a_minus_bf(&self) -> &DMatrix<f64> {
        &self.a_minus_bf
    }
    pub fn dim(&self) -> usize {
        self.n + self.nc
    }
    pub fn plant_dim(&self) -> usize {
        self.n
    }
    pub fn controller_dim(&self) -> usize {
        self.nc
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Assemble `A = [[A_p + B_p D_c C_p, B_p C_c], [B_c C_p, A_c]]`, `B = [B_p; E_c]`,
/// `F = [D_c C_p, C_c]`.
pub fn assemble_closed_loop(plant: &PlantModel, gains: &ControllerGains) -> Result<ClosedLoopSystem> {
    gains.check_compatible(plant)?;
    let (ap, bp, cp) = (plant.a(), plant.b(), plant.c());
    let dc_cp = gains.d() * cp;
    let a = matrix::block2x2(
        &(ap + bp * &dc_cp),
        &(bp * gains.c()),
        &(gains.b() * cp),
        gains.a(),
    );
    let n = plant.n();
    let nc = gains.nc();
    let m = plant.m();
    let mut b = DMatrix::zeros(n + nc, m);
    b.view_mut((0, 0), (n, m)).copy_from(bp);
    b.view_mut((n, 0), (nc, m)).copy_from(gains.e());
    let mut f = DMatrix::zeros(m, n + nc);
    f.view_mut((0, 0), (m, n)).copy_from(&dc_cp);
    f.view_mut((0, n), (m, nc)).copy_from(gains.c());
    ClosedLoopSystem::from_matrices(a, b, f, n)
}

/// `(A - BF) x + B sat(F x)` with exact or smoothed saturation.
pub fn closed_loop_rhs(sys: &ClosedLoopSystem, x: &DVector<f64>, mode: SaturationMode) -> Result<DVector<f64>> {
    if x.len() != sys.dim() {
        return Err(Error::dims("state vector", sys.dim(), x.len()));
    }
    Ok(rhs_unchecked(sys, x, mode))
}

pub(crate) fn rhs_unchecked(sys: &ClosedLoopSystem, x: &DVector<f64>, mode: SaturationMode) -> DVector<f64> {
    let u = &sys.f * x;
    let s = match mode {
        SaturationMode::Exact => saturate(&u),
        SaturationMode::Smooth(z) => smooth_saturate(&u, z),
    };
    &sys.a_minus_bf * x + &sys.b * s
}
