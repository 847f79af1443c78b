//! Fixed-step RK4 simulation of the closed loop and the trajectory-energy loss.
//!
//! The running cost `∫‖x‖² dt` is integrated as one extra state, so the loss shares
//! the state's RK4 grid and order.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::max_asymmetry;
use crate::model::{rhs_unchecked, ClosedLoopSystem, SaturationMode};

/// Default integration step.
pub const DEFAULT_STEP: f64 = 1e-2;

/// Trajectories whose sup-norm exceeds this are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Recorded closed-loop trajectory on the RK4 grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Unsaturated controller output `u = F x`.
    pub inputs: Vec<DVector<f64>>,
    /// Accumulated `∫₀ᵗ ‖x‖² ds`.
    pub running_loss: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has the initial point")
    }

    pub fn final_loss(&self) -> f64 {
        *self.running_loss.last().expect("trajectory has the initial point")
    }

    /// Write `t,x1,...,xN,u1,...,um,loss` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let nx = self.states.first().map_or(0, |x| x.len());
        let nu = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=nx).map(|i| format!("x{i}")));
        header.extend((1..=nu).map(|i| format!("u{i}")));
        header.push("loss".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt17(self.times[k])];
            row.extend(self.states[k].iter().map(|&v| fmt17(v)));
            row.extend(self.inputs[k].iter().map(|&v| fmt17(v)));
            row.push(fmt17(self.running_loss[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Horizon and saturation model for a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub horizon: f64,
    pub mode: SaturationMode,
}

impl LossSpec {
    pub fn new(horizon: f64, mode: SaturationMode) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, mode })
    }
}

/// Grid `0, h, 2h, ..., horizon`; a final partial step is shortened to land on `horizon`.
pub fn time_grid(horizon: f64, step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let steps = (horizon / step - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..steps).map(|i| i as f64 * step).collect();
    grid.push(horizon);
    Ok(grid)
}

fn check_state(sys: &ClosedLoopSystem, x: &DVector<f64>) -> Result<()> {
    if x.len() != sys.dim() {
        return Err(Error::dims("initial state", sys.dim(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    Ok(())
}

fn diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// One RK4 step of the state augmented with the running cost.
fn rk4_step(sys: &ClosedLoopSystem, x: &DVector<f64>, h: f64, mode: SaturationMode) -> (DVector<f64>, f64) {
    let k1 = rhs_unchecked(sys, x, mode);
    let l1 = x.norm_squared();
    let x2 = x + &k1 * (0.5 * h);
    let k2 = rhs_unchecked(sys, &x2, mode);
    let l2 = x2.norm_squared();
    let x3 = x + &k2 * (0.5 * h);
    let k3 = rhs_unchecked(sys, &x3, mode);
    let l3 = x3.norm_squared();
    let x4 = x + &k3 * h;
    let k4 = rhs_unchecked(sys, &x4, mode);
    let l4 = x4.norm_squared();
    let dx = (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    (x + dx, h / 6.0 * (l1 + 2.0 * (l2 + l3) + l4))
}

fn walk(
    sys: &ClosedLoopSystem,
    x0: &DVector<f64>,
    grid: &[f64],
    mode: SaturationMode,
    mut visit: impl FnMut(f64, &DVector<f64>, f64),
) -> Result<(DVector<f64>, f64)> {
    let mut x = x0.clone();
    let mut loss = 0.0;
    visit(grid[0], &x, loss);
    for w in grid.windows(2) {
        let (next, dl) = rk4_step(sys, &x, w[1] - w[0], mode);
        if diverged(&next) || !dl.is_finite() {
            return Err(Error::Divergence { time: w[1], index: None });
        }
        x = next;
        loss += dl;
        visit(w[1], &x, loss);
    }
    Ok((x, loss))
}

/// Integrate the closed loop from `x0` over `[0, horizon]` with fixed-step RK4.
pub fn integrate(
    sys: &ClosedLoopSystem,
    x0: &DVector<f64>,
    horizon: f64,
    step: f64,
    mode: SaturationMode,
) -> Result<Trajectory> {
    check_state(sys, x0)?;
    let grid = time_grid(horizon, step)?;
    let mut traj = Trajectory {
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        inputs: Vec::with_capacity(grid.len()),
        running_loss: Vec::with_capacity(grid.len()),
    };
    walk(sys, x0, &grid, mode, |t, x, l| {
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(sys.f() * x);
        traj.running_loss.push(l);
    })?;
    Ok(traj)
}

/// `∫₀^horizon ‖x‖² dt` for one initial state, without recording the path.
pub fn trajectory_loss(
    sys: &ClosedLoopSystem,
    x0: &DVector<f64>,
    horizon: f64,
    step: f64,
    mode: SaturationMode,
) -> Result<f64> {
    check_state(sys, x0)?;
    let grid = time_grid(horizon, step)?;
    Ok(walk(sys, x0, &grid, mode, |_, _, _| {})?.1)
}

/// Sample mean of the trajectory energy over a batch of initial states.
///
/// Trajectories run in parallel; the mean is reduced in index order so the result
/// does not depend on scheduling.
pub fn batch_loss(sys: &ClosedLoopSystem, batch: &[DVector<f64>], spec: LossSpec, step: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x0)| trajectory_loss(sys, x0, spec.horizon, step, spec.mode).map_err(|e| e.with_index(i)))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Quadratic Lyapunov function `xᵀ P x`.
pub fn lyapunov_value(p: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    if p.nrows() != p.ncols() || p.nrows() != x.len() {
        return Err(Error::dims("Lyapunov matrix", format!("{0}x{0}", x.len()), crate::matrix::shape(p)));
    }
    let asym = max_asymmetry(p);
    if asym > 1e-9 {
        return Err(Error::InvalidArgument(format!("Lyapunov matrix is not symmetric (|P - Pᵀ| = {asym:.3e})")));
    }
    Ok(x.dot(&(p * x)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::{assemble_closed_loop, SmoothingParam};

    fn scalar_system(a: f64) -> ClosedLoopSystem {
        ClosedLoopSystem::from_matrices(
            DMatrix::from_element(1, 1, a),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            1,
        )
        .unwrap()
    }

    #[test]
    fn grid_lands_on_horizon() {
        let g = time_grid(20.0, 0.01).unwrap();
        assert_eq!(g.len(), 2001);
        assert_eq!(*g.last().unwrap(), 20.0);
        let g = time_grid(1.05, 0.1).unwrap();
        assert_eq!(g.len(), 12);
        assert!((g[11] - g[10] - 0.05).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn frozen_dynamics_accumulate_linearly() {
        let sys = scalar_system(0.0);
        let x0 = DVector::from_element(1, 3.0);
        let traj = integrate(&sys, &x0, 2.0, 0.1, SaturationMode::Exact).unwrap();
        for (t, l) in traj.times.iter().zip(&traj.running_loss) {
            assert!((l - 9.0 * t).abs() < 1e-12);
        }
        assert!(traj.states.iter().all(|x| x[0] == 3.0));
    }

    #[test]
    fn boundary_state_converges_under_final_gains() {
        let sys = assemble_closed_loop(&fixtures::plant(), &fixtures::final_gains()).unwrap();
        let x0 = DVector::from_row_slice(&fixtures::BOUNDARY_INITIAL_STATE);
        let traj = integrate(&sys, &x0, 40.0, DEFAULT_STEP, SaturationMode::Exact).unwrap();
        // independent numpy RK4 at the same step: ‖x(40)‖/‖x(0)‖ = 0.0120931982547
        // (the slowest linear mode is -0.140, so the decay is slow)
        let ratio = traj.final_state().norm() / x0.norm();
        assert!((ratio - 0.0120931982547).abs() < 1e-9, "{ratio}");
        let late = integrate(&sys, &x0, 60.0, DEFAULT_STEP, SaturationMode::Exact).unwrap();
        assert!(late.final_state().norm() < 1e-3 * x0.norm());
    }

    #[test]
    fn batch_of_scalar_decays() {
        let sys = scalar_system(-1.0);
        let horizon = 3.0;
        let batch = vec![DVector::from_element(1, 2.0), DVector::from_element(1, -0.5)];
        let spec = LossSpec::new(horizon, SaturationMode::Exact).unwrap();
        let got = batch_loss(&sys, &batch, spec, 1e-3).unwrap();
        let closed = |x0: f64| x0 * x0 / 2.0 * (1.0 - (-2.0 * horizon).exp());
        let expected = (closed(2.0) + closed(-0.5)) / 2.0;
        assert!((got - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn batch_of_copies_equals_single() {
        let sys = assemble_closed_loop(&fixtures::plant(), &fixtures::final_gains()).unwrap();
        let x0 = DVector::from_row_slice(&[3.0, -2.0, 0.0, 0.0]);
        let spec = LossSpec::new(2.0, SaturationMode::Smooth(SmoothingParam::default())).unwrap();
        let single = batch_loss(&sys, std::slice::from_ref(&x0), spec, 0.01).unwrap();
        let many = batch_loss(&sys, &vec![x0; 7], spec, 0.01).unwrap();
        assert!((single - many).abs() <= 1e-14 * single);
        let zero = batch_loss(&sys, &[DVector::zeros(4)], spec, 0.01).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let sys = scalar_system(-1.0);
        let spec = LossSpec::new(1.0, SaturationMode::Exact).unwrap();
        assert!(batch_loss(&sys, &[], spec, 0.1).is_err());
    }

    #[test]
    fn divergence_is_reported_with_index() {
        let sys = scalar_system(5.0);
        let spec = LossSpec::new(20.0, SaturationMode::Exact).unwrap();
        let batch = vec![DVector::zeros(1), DVector::from_element(1, 1.0)];
        match batch_loss(&sys, &batch, spec, 0.01) {
            Err(Error::Divergence { time, index }) => {
                assert_eq!(index, Some(1));
                assert!(time > 5.0 && time < 6.0, "blew up at {time}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn lyapunov_examples() {
        let p = DMatrix::identity(2, 2);
        assert_eq!(lyapunov_value(&p, &DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(lyapunov_value(&p, &DVector::from_row_slice(&[3.0, 4.0])).unwrap(), 25.0);
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(lyapunov_value(&skew, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn running_loss_monotone_and_matches_trapezoid() {
        let sys = assemble_closed_loop(&fixtures::plant(), &fixtures::final_gains()).unwrap();
        let x0 = DVector::from_row_slice(&[-20.0, -30.0, 0.0, 0.0]);
        let traj = integrate(&sys, &x0, 10.0, 0.01, SaturationMode::Exact).unwrap();
        assert!(traj.running_loss.windows(2).all(|w| w[1] >= w[0]));
        let trap: f64 = (1..traj.len())
            .map(|k| 0.5 * (traj.times[k] - traj.times[k - 1]) * (traj.states[k].norm_squared() + traj.states[k - 1].norm_squared()))
            .sum();
        let rel = (trap - traj.final_loss()).abs() / traj.final_loss();
        assert!(rel < 1e-3, "relative gap {rel}");
    }

    #[test]
    fn csv_layout() {
        let sys = assemble_closed_loop(&fixtures::plant(), &fixtures::final_gains()).unwrap();
        let traj = integrate(&sys, &DVector::zeros(4), 0.05, 0.01, SaturationMode::Exact).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,x3,x4,u1,u2,loss");
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 6);
        assert!(rows[1].starts_with("1.0000000000000000e-2,"));
    }

    #[test]
    fn smoothing_gap_shrinks_with_zeta() {
        let sys = assemble_closed_loop(&fixtures::plant(), &fixtures::final_gains()).unwrap();
        let x0 = DVector::from_row_slice(&[-10.0, 8.0, 0.0, 0.0]);
        let exact = integrate(&sys, &x0, 20.0, 0.01, SaturationMode::Exact).unwrap();
        let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|&z| {
                let mode = SaturationMode::Smooth(SmoothingParam::new(z).unwrap());
                let sm = integrate(&sys, &x0, 20.0, 0.01, mode).unwrap();
                (sm.final_state() - exact.final_state()).norm()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}
