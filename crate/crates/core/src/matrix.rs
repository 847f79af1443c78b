//! Small dense-matrix helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Serde adapter storing a `DMatrix` as a list of rows.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `DVector` as a flat list.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidArgument("matrix has no rows".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::InvalidArgument("matrix has no columns".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!(
            "ragged matrix: row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

pub fn expect_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dims(name, format!("{rows}x{cols}"), shape(m)));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().unwrap()
}

/// Quadratic form `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Stack `[[a, b], [c, d]]`.
pub fn block2x2(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r0, c0) = a.shape();
    let (r1, c1) = d.shape();
    let mut out = DMatrix::zeros(r0 + r1, c0 + c1);
    out.view_mut((0, 0), (r0, c0)).copy_from(a);
    out.view_mut((0, c0), (r0, c1)).copy_from(b);
    out.view_mut((r0, 0), (r1, c0)).copy_from(c);
    out.view_mut((r0, c0), (r1, c1)).copy_from(d);
    out
}
