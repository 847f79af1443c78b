//! Semidefinite programs in linear-matrix-inequality form and a bundled
//! interior-point backend.
//!
//! A program is
//!
//! ```text
//! minimize    cᵀy
//! subject to  G_k(y) = C_k + Σ_i y_i A_{k,i} ⪰ 0,   k = 1..K
//! ```
//!
//! with symmetric `C_k`, `A_{k,i}`. Any conic solver that accepts this form can be
//! plugged in through [`ConicBackend`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One symmetric affine block `C + Σ y_i A_i`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub label: String,
    pub constant: DMatrix<f64>,
    /// Sparse list of `(variable index, coefficient matrix)`.
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    /// `Σ y_i A_i` without the constant.
    pub fn linear_part(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.size(), self.size());
        for (i, a) in &self.terms {
            out += a * y[*i];
        }
        out
    }

    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        &self.constant + self.linear_part(y)
    }
}

/// `minimize cᵀy` subject to a list of LMI blocks.
#[derive(Debug, Clone)]
pub struct LmiProgram {
    pub objective: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl LmiProgram {
    pub fn num_variables(&self) -> usize {
        self.objective.len()
    }

    /// Smallest eigenvalue over all blocks at `y`.
    pub fn min_slack(&self, y: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| crate::matrix::min_sym_eigenvalue(&b.evaluate(y)))
            .fold(f64::INFINITY, f64::min)
    }

    fn validate(&self) -> Result<()> {
        let p = self.num_variables();
        for b in &self.blocks {
            let k = b.size();
            if b.constant.ncols() != k {
                return Err(Error::dims(format!("block {}", b.label), "square", crate::matrix::shape(&b.constant)));
            }
            for (i, a) in &b.terms {
                if *i >= p {
                    return Err(Error::InvalidArgument(format!("block {} references variable {i} of {p}", b.label)));
                }
                if a.shape() != (k, k) {
                    return Err(Error::dims(format!("block {} term {i}", b.label), format!("{k}x{k}"), crate::matrix::shape(a)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Strictly feasible point (meaningless when infeasible).
    pub y: DVector<f64>,
    pub objective: f64,
    /// Upper bound on `cᵀy - p*` from the final barrier parameter.
    pub gap_bound: f64,
    pub newton_steps: usize,
}

pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, program: &LmiProgram) -> Result<SdpSolution>;
}

/// Primal log-barrier path following with a phase-I feasibility search.
///
/// All variables are kept in the ball `‖y‖² ≤ radius_sq`, which makes every
/// centering problem bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSolver {
    /// Stop once `gap_bound ≤ rel_gap·|cᵀy| + abs_gap`.
    pub rel_gap: f64,
    pub abs_gap: f64,
    pub radius_sq: f64,
    /// Barrier parameter growth per outer iteration.
    pub growth: f64,
    pub max_newton: usize,
}

impl Default for BarrierSolver {
    fn default() -> Self {
        Self {
            rel_gap: 1e-9,
            abs_gap: 1e-15,
            radius_sq: 1e12,
            growth: 20.0,
            max_newton: 20_000,
        }
    }
}

const MAX_BARRIER_T: f64 = 1e20;

/// Working form: variables `y` plus an optional phase-I shift `s` added to every block.
struct Barrier<'a> {
    prog: &'a LmiProgram,
    radius_sq: f64,
    phase_one: bool,
}

struct Factored {
    inverses: Vec<DMatrix<f64>>,
    logdets: Vec<f64>,
    ball_slack: f64,
}

impl Barrier<'_> {
    fn nvars(&self) -> usize {
        self.prog.num_variables() + usize::from(self.phase_one)
    }

    /// Barrier weight `ϑ`: sum of block sizes plus one for the ball.
    fn weight(&self) -> f64 {
        self.prog.blocks.iter().map(|b| b.size()).sum::<usize>() as f64 + 1.0
    }

    fn block_value(&self, k: usize, z: &[f64]) -> DMatrix<f64> {
        let b = &self.prog.blocks[k];
        let mut g = b.evaluate(z);
        if self.phase_one {
            let s = z[self.prog.num_variables()];
            for i in 0..g.nrows() {
                g[(i, i)] += s;
            }
        }
        g
    }

    fn factor(&self, z: &[f64]) -> Option<Factored> {
        let p = self.prog.num_variables();
        let ball_slack = self.radius_sq - z[..p].iter().map(|v| v * v).sum::<f64>();
        if ball_slack <= 0.0 {
            return None;
        }
        let mut inverses = Vec::with_capacity(self.prog.blocks.len());
        let mut logdets = Vec::with_capacity(self.prog.blocks.len());
        for k in 0..self.prog.blocks.len() {
            let g = self.block_value(k, z);
            let chol = Cholesky::<f64, Dyn>::new(g)?;
            let l = chol.l_dirty();
            let mut ld = 0.0;
            for i in 0..l.nrows() {
                let d = l[(i, i)];
                if !(d > 0.0) {
                    return None;
                }
                ld += 2.0 * d.ln();
            }
            logdets.push(ld);
            inverses.push(chol.inverse());
        }
        Some(Factored { inverses, logdets, ball_slack })
    }

    /// Gradient and Hessian of `-Σ log det G_k - log(R - ‖y‖²)`.
    fn derivatives(&self, z: &[f64], f: &Factored) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.prog.num_variables();
        let q = self.nvars();
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for (k, block) in self.prog.blocks.iter().enumerate() {
            let ginv = &f.inverses[k];
            let mut ws: Vec<(usize, DMatrix<f64>)> = block.terms.iter().map(|(i, a)| (*i, ginv * a)).collect();
            if self.phase_one {
                ws.push((p, ginv.clone()));
            }
            for (a, (i, wi)) in ws.iter().enumerate() {
                grad[*i] -= wi.trace();
                for (j, wj) in ws.iter().skip(a) {
                    // tr(Wi Wj)
                    let v = wi.component_mul(&wj.transpose()).sum();
                    hess[(*i, *j)] += v;
                    if i != j {
                        hess[(*j, *i)] += v;
                    }
                }
            }
        }
        let r = f.ball_slack;
        for i in 0..p {
            grad[i] += 2.0 * z[i] / r;
            hess[(i, i)] += 2.0 / r;
            for j in 0..p {
                hess[(i, j)] += 4.0 * z[i] * z[j] / (r * r);
            }
        }
        (grad, hess)
    }

    fn cost_vector(&self) -> DVector<f64> {
        if self.phase_one {
            let mut c = DVector::zeros(self.nvars());
            c[self.prog.num_variables()] = 1.0;
            c
        } else {
            self.prog.objective.clone()
        }
    }

    fn log_barrier(f: &Factored) -> f64 {
        -f.logdets.iter().sum::<f64>() - f.ball_slack.ln()
    }

    /// Damped Newton centering for `t·cᵀz + φ(z)`. Returns steps taken.
    ///
    /// In phase I the loop also exits as soon as the shift becomes negative.
    fn center(&self, z: &mut DVector<f64>, t: f64, budget: usize) -> Result<usize> {
        let c = self.cost_vector();
        let p = self.prog.num_variables();
        let mut f = self
            .factor(z.as_slice())
            .ok_or_else(|| Error::Solver("centering started outside the barrier domain".into()))?;
        for step in 0..budget.max(1) {
            let (g, h) = self.derivatives(z.as_slice(), &f);
            let grad = &c * t + g;
            let dz = newton_direction(&h, &grad)?;
            let decrement = -grad.dot(&dz);
            if !decrement.is_finite() {
                return Err(Error::Solver("non-finite Newton decrement".into()));
            }
            if decrement <= 2e-10 {
                return Ok(step);
            }
            let slope = t * c.dot(&dz);
            let base = Self::log_barrier(&f);
            let mut a = 1.0;
            loop {
                let trial = &*z + &dz * a;
                if let Some(ft) = self.factor(trial.as_slice()) {
                    // cost change computed directly to avoid cancellation at large t
                    let delta = a * slope + (Self::log_barrier(&ft) - base);
                    if delta <= -0.25 * a * decrement {
                        *z = trial;
                        f = ft;
                        // progress below rounding of the merit value: as centered as it gets
                        if -delta <= 1e-14 * (t * c.dot(z)).abs().max(base.abs()) {
                            return Ok(step + 1);
                        }
                        break;
                    }
                }
                a *= 0.5;
                if a < 1e-14 {
                    // numerically centered
                    return Ok(step);
                }
            }
            if self.phase_one && z[p] < 0.0 {
                return Ok(step + 1);
            }
        }
        Ok(budget)
    }
}

/// Solve `H d = -g` with symmetric diagonal scaling.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = g.len();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let v = h[(i, i)];
            if v > 0.0 && v.is_finite() { v.sqrt() } else { 1.0 }
        })
        .collect();
    let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] / (d[i] * d[j]));
    let gs = DVector::from_fn(n, |i, _| -g[i] / d[i]);
    let sol = match Cholesky::new(hs.clone()) {
        Some(ch) => ch.solve(&gs),
        None => hs
            .lu()
            .solve(&gs)
            .ok_or_else(|| Error::Solver("singular Newton system".into()))?,
    };
    Ok(DVector::from_fn(n, |i, _| sol[i] / d[i]))
}

impl BarrierSolver {
    /// Find a strictly feasible point, or prove infeasibility.
    fn phase_one(&self, prog: &LmiProgram, steps: &mut usize) -> Result<Option<DVector<f64>>> {
        let p = prog.num_variables();
        let zero = vec![0.0; p];
        let worst = prog.min_slack(&zero);
        if worst > 0.0 {
            return Ok(Some(DVector::zeros(p)));
        }
        let barrier = Barrier { prog, radius_sq: self.radius_sq, phase_one: true };
        let mut z = DVector::zeros(p + 1);
        z[p] = 1.0 - worst;
        let weight = barrier.weight();
        let mut t = 1.0;
        loop {
            *steps += barrier.center(&mut z, t, self.max_newton.saturating_sub(*steps))?;
            if z[p] < 0.0 {
                return Ok(Some(z.rows(0, p).into_owned()));
            }
            // on the central path the optimal shift is at least s - ϑ/t
            if z[p] - weight / t > 0.0 {
                return Ok(None);
            }
            if *steps >= self.max_newton || t > MAX_BARRIER_T {
                return Err(Error::Solver(format!(
                    "feasibility search inconclusive (shift {:.3e}, barrier t {t:.1e})",
                    z[p]
                )));
            }
            t *= self.growth;
        }
    }
}

impl ConicBackend for BarrierSolver {
    fn name(&self) -> &str {
        "log-barrier interior point"
    }

    fn solve(&self, prog: &LmiProgram) -> Result<SdpSolution> {
        prog.validate()?;
        let mut steps = 0;
        let p = prog.num_variables();
        let Some(mut y) = self.phase_one(prog, &mut steps)? else {
            return Ok(SdpSolution {
                status: SolveStatus::Infeasible,
                y: DVector::zeros(p),
                objective: f64::NAN,
                gap_bound: f64::INFINITY,
                newton_steps: steps,
            });
        };
        let barrier = Barrier { prog, radius_sq: self.radius_sq, phase_one: false };
        let weight = barrier.weight();
        let mut t = 1.0;
        loop {
            let used = barrier.center(&mut y, t, self.max_newton.saturating_sub(steps))?;
            steps += used;
            let obj = prog.objective.dot(&y);
            let gap = weight / t;
            if gap <= self.rel_gap * obj.abs() + self.abs_gap || t > MAX_BARRIER_T {
                // the ball's multiplier is 1/(t·slack); a non-negligible λ·R means the
                // objective keeps improving as the bound is relaxed
                let slack = self.radius_sq - y.norm_squared();
                if self.radius_sq / (t * slack) > 1e-3 * obj.abs().max(1.0) {
                    return Err(Error::Solver(
                        "optimum pressed against the variable bound; problem is likely unbounded".into(),
                    ));
                }
                return Ok(SdpSolution {
                    status: SolveStatus::Optimal,
                    y,
                    objective: obj,
                    gap_bound: gap,
                    newton_steps: steps,
                });
            }
            if steps >= self.max_newton {
                return Err(Error::Solver(format!("Newton budget exhausted at barrier t {t:.1e}")));
            }
            t *= self.growth;
        }
    }
}
