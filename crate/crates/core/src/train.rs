//! Gradient training of the controller gains through the unfolded closed loop.
//!
//! Gradients come from the forward sensitivity system `S' = J_x S + J_θ`, integrated
//! on the same RK4 grid as the state. Applying RK4 to the augmented system gives the
//! exact derivative of the discretized loss.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{smooth_sat_derivative_scalar, smooth_sat_scalar, ControllerGains, PlantModel, SmoothingParam};
use crate::sim::{fmt17, time_grid, DIVERGENCE_LIMIT};

/// Gradient norm above which the step is rescaled.
pub const DEFAULT_CLIP_NORM: f64 = 1e3;
pub const DEFAULT_EPOCHS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainBlock {
    Ac,
    Bc,
    Cc,
    Dc,
    Ec,
}

impl GainBlock {
    pub const ALL: [GainBlock; 5] = [GainBlock::Ac, GainBlock::Bc, GainBlock::Cc, GainBlock::Dc, GainBlock::Ec];
}

/// Packing order of the flat parameter vector: `A_c, B_c, C_c, D_c, E_c`, each row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainLayout {
    pub nc: usize,
    pub m: usize,
    pub l: usize,
}

impl GainLayout {
    pub fn of(g: &ControllerGains) -> Self {
        Self { nc: g.nc(), m: g.c().nrows(), l: g.b().ncols() }
    }

    pub fn shape(&self, block: GainBlock) -> (usize, usize) {
        match block {
            GainBlock::Ac => (self.nc, self.nc),
            GainBlock::Bc => (self.nc, self.l),
            GainBlock::Cc => (self.m, self.nc),
            GainBlock::Dc => (self.m, self.l),
            GainBlock::Ec => (self.nc, self.m),
        }
    }

    pub fn offset(&self, block: GainBlock) -> usize {
        GainBlock::ALL
            .iter()
            .take_while(|&&b| b != block)
            .map(|&b| {
                let (r, c) = self.shape(b);
                r * c
            })
            .sum()
    }

    pub fn len(&self) -> usize {
        let (nc, m, l) = (self.nc, self.m, self.l);
        nc * nc + nc * l + m * nc + m * l + nc * m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, block: GainBlock, row: usize, col: usize) -> usize {
        let (_, c) = self.shape(block);
        self.offset(block) + row * c + col
    }

    /// Inverse of [`GainLayout::index`].
    pub fn locate(&self, idx: usize) -> (GainBlock, usize, usize) {
        let mut rest = idx;
        for b in GainBlock::ALL {
            let (r, c) = self.shape(b);
            if rest < r * c {
                return (b, rest / c, rest % c);
            }
            rest -= r * c;
        }
        panic!("gain index {idx} out of range {}", self.len());
    }
}

/// Flat trainable parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVector {
    pub layout: GainLayout,
    pub values: DVector<f64>,
}

impl GainVector {
    pub fn pack(g: &ControllerGains) -> Self {
        let layout = GainLayout::of(g);
        let mut values = Vec::with_capacity(layout.len());
        for m in [g.a(), g.b(), g.c(), g.d(), g.e()] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    values.push(m[(i, j)]);
                }
            }
        }
        Self { layout, values: DVector::from_vec(values) }
    }

    pub fn unpack(&self) -> Result<ControllerGains> {
        if self.values.len() != self.layout.len() {
            return Err(Error::dims("gain vector", self.layout.len(), self.values.len()));
        }
        let block = |b: GainBlock| {
            let (r, c) = self.layout.shape(b);
            let off = self.layout.offset(b);
            DMatrix::from_row_slice(r, c, &self.values.as_slice()[off..off + r * c])
        };
        ControllerGains::new(
            block(GainBlock::Ac),
            block(GainBlock::Bc),
            block(GainBlock::Cc),
            block(GainBlock::Dc),
            block(GainBlock::Ec),
        )
    }

    /// Euclidean norm of the entries belonging to one block.
    pub fn block_norm(&self, block: GainBlock) -> f64 {
        let (r, c) = self.layout.shape(block);
        let off = self.layout.offset(block);
        self.values.as_slice()[off..off + r * c].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Row-major dense copy for the inner loops.
struct Dense {
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { cols: m.ncols(), data }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Smoothed closed loop plus its sensitivity equations.
///
/// Augmented state layout: `[x (N) | ℓ | S (N×P row-major) | ∂ℓ/∂θ (P)]`.
struct SensitivityKernel {
    ap: Dense,
    bp: Dense,
    cp: Dense,
    ac: Dense,
    bc: Dense,
    cc: Dense,
    dc: Dense,
    ec: Dense,
    zeta: f64,
    layout: GainLayout,
    n: usize,
}

struct Scratch {
    y: Vec<f64>,
    u: Vec<f64>,
    sig: Vec<f64>,
    dsig: Vec<f64>,
    dy: Vec<f64>,
    du: Vec<f64>,
}

impl SensitivityKernel {
    fn new(plant: &PlantModel, gains: &ControllerGains, zeta: SmoothingParam) -> Result<Self> {
        gains.check_compatible(plant)?;
        Ok(Self {
            ap: Dense::from(plant.a()),
            bp: Dense::from(plant.b()),
            cp: Dense::from(plant.c()),
            ac: Dense::from(gains.a()),
            bc: Dense::from(gains.b()),
            cc: Dense::from(gains.c()),
            dc: Dense::from(gains.d()),
            ec: Dense::from(gains.e()),
            zeta: zeta.get(),
            layout: GainLayout::of(gains),
            n: plant.n(),
        })
    }

    fn dim(&self) -> usize {
        self.n + self.layout.nc
    }

    fn params(&self) -> usize {
        self.layout.len()
    }

    fn augmented_len(&self) -> usize {
        let (nx, p) = (self.dim(), self.params());
        nx + 1 + nx * p + p
    }

    fn scratch(&self) -> Scratch {
        let p = self.params();
        let (l, m) = (self.layout.l, self.layout.m);
        Scratch {
            y: vec![0.0; l],
            u: vec![0.0; m],
            sig: vec![0.0; m],
            dsig: vec![0.0; m],
            dy: vec![0.0; l * p],
            du: vec![0.0; m * p],
        }
    }

    fn derivative(&self, z: &[f64], dz: &mut [f64], s: &mut Scratch) {
        let n = self.n;
        let nc = self.layout.nc;
        let (m, l) = (self.layout.m, self.layout.l);
        let nx = n + nc;
        let p = self.params();
        let x = &z[..nx];
        let (xp, xc) = x.split_at(n);
        let sens = &z[nx + 1..nx + 1 + nx * p];

        for k in 0..l {
            s.y[k] = (0..n).map(|j| self.cp.at(k, j) * xp[j]).sum();
        }
        for i in 0..m {
            let u = (0..l).map(|k| self.dc.at(i, k) * s.y[k]).sum::<f64>()
                + (0..nc).map(|k| self.cc.at(i, k) * xc[k]).sum::<f64>();
            s.u[i] = u;
            s.sig[i] = smooth_sat_scalar(u, self.zeta);
            s.dsig[i] = smooth_sat_derivative_scalar(u, self.zeta);
        }

        // state
        for r in 0..n {
            dz[r] = (0..n).map(|k| self.ap.at(r, k) * xp[k]).sum::<f64>()
                + (0..m).map(|i| self.bp.at(r, i) * s.sig[i]).sum::<f64>();
        }
        for r in 0..nc {
            dz[n + r] = (0..nc).map(|k| self.ac.at(r, k) * xc[k]).sum::<f64>()
                + (0..l).map(|k| self.bc.at(r, k) * s.y[k]).sum::<f64>()
                + (0..m).map(|i| self.ec.at(r, i) * (s.sig[i] - s.u[i])).sum::<f64>();
        }
        dz[nx] = x.iter().map(|v| v * v).sum();

        // dY = C_p S_p, dU = D_c dY + C_c S_c + ∂u/∂θ
        for k in 0..l {
            for j in 0..p {
                s.dy[k * p + j] = (0..n).map(|q| self.cp.at(k, q) * sens[q * p + j]).sum();
            }
        }
        for i in 0..m {
            for j in 0..p {
                s.du[i * p + j] = (0..l).map(|k| self.dc.at(i, k) * s.dy[k * p + j]).sum::<f64>()
                    + (0..nc).map(|k| self.cc.at(i, k) * sens[(n + k) * p + j]).sum::<f64>();
            }
            for k in 0..nc {
                s.du[i * p + self.layout.index(GainBlock::Cc, i, k)] += xc[k];
            }
            for k in 0..l {
                s.du[i * p + self.layout.index(GainBlock::Dc, i, k)] += s.y[k];
            }
        }

        let ds = &mut dz[nx + 1..nx + 1 + nx * p];
        for r in 0..n {
            for j in 0..p {
                ds[r * p + j] = (0..n).map(|k| self.ap.at(r, k) * sens[k * p + j]).sum::<f64>()
                    + (0..m).map(|i| self.bp.at(r, i) * s.dsig[i] * s.du[i * p + j]).sum::<f64>();
            }
        }
        for r in 0..nc {
            for j in 0..p {
                ds[(n + r) * p + j] = (0..nc).map(|k| self.ac.at(r, k) * sens[(n + k) * p + j]).sum::<f64>()
                    + (0..l).map(|k| self.bc.at(r, k) * s.dy[k * p + j]).sum::<f64>()
                    + (0..m).map(|i| self.ec.at(r, i) * (s.dsig[i] - 1.0) * s.du[i * p + j]).sum::<f64>();
            }
            for k in 0..nc {
                ds[(n + r) * p + self.layout.index(GainBlock::Ac, r, k)] += xc[k];
            }
            for k in 0..l {
                ds[(n + r) * p + self.layout.index(GainBlock::Bc, r, k)] += s.y[k];
            }
            for i in 0..m {
                ds[(n + r) * p + self.layout.index(GainBlock::Ec, r, i)] += s.sig[i] - s.u[i];
            }
        }

        let dg = &mut dz[nx + 1 + nx * p..];
        for j in 0..p {
            dg[j] = 2.0 * (0..nx).map(|r| x[r] * sens[r * p + j]).sum::<f64>();
        }
    }

    /// Loss and its gradient for one initial state.
    fn trajectory(&self, x0: &DVector<f64>, grid: &[f64]) -> Result<(f64, Vec<f64>)> {
        let nx = self.dim();
        if x0.len() != nx {
            return Err(Error::dims("initial state", nx, x0.len()));
        }
        let len = self.augmented_len();
        let mut z = vec![0.0; len];
        z[..nx].copy_from_slice(x0.as_slice());
        let mut k = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
        let mut tmp = vec![0.0; len];
        let mut s = self.scratch();
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            self.derivative(&z, &mut k[0], &mut s);
            for i in 0..len {
                tmp[i] = z[i] + 0.5 * h * k[0][i];
            }
            self.derivative(&tmp, &mut k[1], &mut s);
            for i in 0..len {
                tmp[i] = z[i] + 0.5 * h * k[1][i];
            }
            self.derivative(&tmp, &mut k[2], &mut s);
            for i in 0..len {
                tmp[i] = z[i] + h * k[2][i];
            }
            self.derivative(&tmp, &mut k[3], &mut s);
            for i in 0..len {
                z[i] += h / 6.0 * (k[0][i] + 2.0 * (k[1][i] + k[2][i]) + k[3][i]);
            }
            if z[..nx].iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) || !z[nx].is_finite() {
                return Err(Error::Divergence { time: w[1], index: None });
            }
        }
        Ok((z[nx], z[len - self.params()..].to_vec()))
    }
}

/// Mean trajectory energy over `batch` under the smoothed closed loop, and its
/// gradient with respect to every controller gain (packed as a [`GainVector`]).
pub fn loss_and_gradient(
    plant: &PlantModel,
    gains: &ControllerGains,
    batch: &[DVector<f64>],
    horizon: f64,
    zeta: SmoothingParam,
    step: f64,
) -> Result<(f64, GainVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let kernel = SensitivityKernel::new(plant, gains, zeta)?;
    let grid = time_grid(horizon, step)?;
    let per_state: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x0)| kernel.trajectory(x0, &grid).map_err(|e| e.with_index(i)))
        .collect();
    let p = kernel.params();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(p);
    for r in per_state {
        let (l, g) = r?;
        loss += l;
        for j in 0..p {
            grad[j] += g[j];
        }
    }
    let scale = 1.0 / batch.len() as f64;
    Ok((loss * scale, GainVector { layout: kernel.layout, values: grad * scale }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, first_moment: DVector::zeros(len), second_moment: DVector::zeros(len), steps: 0 }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(state: &mut AdamState, theta: &mut DVector<f64>, grad: &DVector<f64>) -> Result<()> {
    if theta.len() != grad.len() || state.first_moment.len() != grad.len() {
        return Err(Error::dims("Adam gradient", theta.len(), grad.len()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.first_moment[i] = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        state.second_moment[i] = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        theta[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Hyperparameters of one incremental training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub horizon: f64,
    pub epochs: usize,
    pub zeta: SmoothingParam,
    pub step: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// No epoch produced a finite loss; `gains` are the stage's starting gains.
    Failed,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub gains: ControllerGains,
    pub status: StageStatus,
    /// Batch loss before each successful update.
    pub loss_history: Vec<f64>,
    pub gradient_norm_history: Vec<f64>,
    /// Epochs whose trajectories diverged; each one reverts the gains and halves the step size.
    pub diverged_epochs: usize,
}

impl StageResult {
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,grad_norm")?;
        for (e, (l, g)) in self.loss_history.iter().zip(&self.gradient_norm_history).enumerate() {
            writeln!(w, "{},{},{}", e + 1, fmt17(*l), fmt17(*g))?;
        }
        Ok(())
    }
}

/// Train on a fixed batch for `cfg.epochs` Adam iterations, starting from `initial`.
pub fn run_stage(
    plant: &PlantModel,
    initial: &ControllerGains,
    batch: &[DVector<f64>],
    cfg: &StageConfig,
) -> Result<StageResult> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("a stage needs at least one epoch".into()));
    }
    let mut theta = GainVector::pack(initial);
    let mut adam = AdamState::new(cfg.adam, theta.values.len());
    let mut last_good: Option<DVector<f64>> = None;
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut gradient_norm_history = Vec::with_capacity(cfg.epochs);
    let mut diverged_epochs = 0;

    for _ in 0..cfg.epochs {
        let gains = theta.unpack()?;
        match loss_and_gradient(plant, &gains, batch, cfg.horizon, cfg.zeta, cfg.step) {
            Ok((loss, grad)) => {
                last_good = Some(theta.values.clone());
                let norm = grad.values.norm();
                loss_history.push(loss);
                gradient_norm_history.push(norm);
                let mut g = grad.values;
                if norm > cfg.clip_norm {
                    g *= cfg.clip_norm / norm;
                }
                adam_step(&mut adam, &mut theta.values, &g)?;
            }
            Err(Error::Divergence { .. }) => {
                diverged_epochs += 1;
                match &last_good {
                    Some(v) => {
                        theta.values = v.clone();
                        adam.config.learning_rate *= 0.5;
                    }
                    // the starting gains themselves diverge; re-evaluating them is pointless
                    None => break,
                }
            }
            Err(e) => return Err(e),
        }
    }

    if loss_history.is_empty() {
        return Ok(StageResult {
            gains: initial.clone(),
            status: StageStatus::Failed,
            loss_history,
            gradient_norm_history,
            diverged_epochs,
        });
    }
    Ok(StageResult {
        gains: theta.unpack()?,
        status: StageStatus::Completed,
        loss_history,
        gradient_norm_history,
        diverged_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn stage(horizon: f64, epochs: usize) -> StageConfig {
        StageConfig {
            horizon,
            epochs,
            zeta: SmoothingParam::default(),
            step: 0.01,
            adam: AdamConfig::default(),
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }

    #[test]
    fn layout_length_for_fixture() {
        let layout = GainLayout::of(&fixtures::final_gains());
        assert_eq!(layout.len(), 20);
        assert_eq!(layout.index(GainBlock::Ec, 1, 1), 19);
        assert_eq!(layout.locate(19), (GainBlock::Ec, 1, 1));
        assert_eq!(layout.locate(4), (GainBlock::Bc, 0, 0));
    }

    #[test]
    fn origin_batch_has_zero_loss_and_gradient() {
        let (loss, grad) = loss_and_gradient(
            &fixtures::plant(),
            &fixtures::final_gains(),
            &[DVector::zeros(4)],
            2.0,
            SmoothingParam::default(),
            0.01,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let plant = fixtures::plant();
        let gains = fixtures::final_gains();
        let batch = vec![
            DVector::from_row_slice(&[3.0, -4.0, 0.0, 0.0]),
            DVector::from_row_slice(&[-1.0, 2.0, 0.5, 0.0]),
        ];
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let z = SmoothingParam::default();
        let (l1, g1) = loss_and_gradient(&plant, &gains, &batch, 3.0, z, 0.01).unwrap();
        let (l2, g2) = loss_and_gradient(&plant, &gains, &doubled, 3.0, z, 0.01).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1);
        assert!((&g1.values - &g2.values).amax() <= 1e-12 * g1.values.amax());
    }

    #[test]
    fn loss_agrees_with_simulator() {
        use crate::model::{assemble_closed_loop, SaturationMode};
        use crate::sim::{batch_loss, LossSpec};
        let plant = fixtures::plant();
        let gains = fixtures::final_gains();
        let batch = vec![DVector::from_row_slice(&[-20.0, 15.0, 0.0, 0.0])];
        let z = SmoothingParam::default();
        let (loss, _) = loss_and_gradient(&plant, &gains, &batch, 5.0, z, 0.01).unwrap();
        let sys = assemble_closed_loop(&plant, &gains).unwrap();
        let reference = batch_loss(&sys, &batch, LossSpec::new(5.0, SaturationMode::Smooth(z)).unwrap(), 0.01).unwrap();
        assert!((loss - reference).abs() <= 1e-10 * reference);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = AdamState::new(AdamConfig::default(), 3);
        let mut theta = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        adam_step(&mut st, &mut theta, &DVector::zeros(3)).unwrap();
        assert_eq!(theta, DVector::from_row_slice(&[1.0, -2.0, 3.0]));
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut st = AdamState::new(AdamConfig::default(), 1);
        let mut theta = DVector::from_element(1, 0.0);
        adam_step(&mut st, &mut theta, &DVector::from_element(1, 1.0)).unwrap();
        // m̂ = 1, v̂ = 1  →  θ' = -0.01 / (1 + 1e-8)
        assert!((theta[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let mut theta = DVector::zeros(2);
        let g = DVector::from_row_slice(&[0.3, -5.0]);
        adam_step(&mut st, &mut theta, &g).unwrap();
        let first = theta.clone();
        adam_step(&mut st, &mut theta, &g).unwrap();
        assert!(first[0] < 0.0 && theta[0] < first[0]);
        assert!(first[1] > 0.0 && theta[1] > first[1]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut st = AdamState::new(AdamConfig::default(), 1);
        let mut theta = DVector::zeros(1);
        assert!(adam_step(&mut st, &mut theta, &DVector::from_element(1, f64::NAN)).is_err());
    }

    #[test]
    fn stage_on_origin_keeps_gains() {
        let g = fixtures::initial_gains();
        let res = run_stage(&fixtures::plant(), &g, &[DVector::zeros(4)], &stage(1.0, 1)).unwrap();
        assert_eq!(res.gains, g);
        assert_eq!(res.status, StageStatus::Completed);
        assert_eq!(res.loss_history, vec![0.0]);
    }

    #[test]
    fn stage_reduces_loss_and_is_deterministic() {
        let plant = fixtures::plant();
        let batch = vec![
            DVector::from_row_slice(&[2.0, 1.5, 0.0, 0.0]),
            DVector::from_row_slice(&[-1.0, -2.5, 0.0, 0.0]),
        ];
        let cfg = stage(2.0, 10);
        let a = run_stage(&plant, &fixtures::initial_gains(), &batch, &cfg).unwrap();
        let b = run_stage(&plant, &fixtures::initial_gains(), &batch, &cfg).unwrap();
        assert_eq!(a.loss_history.len(), 10);
        assert!(a.loss_history.last().unwrap() < &a.loss_history[0]);
        assert_eq!(a.gains, b.gains);
        assert_eq!(a.loss_history, b.loss_history);
        let mut log = Vec::new();
        a.write_log(&mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 11);
    }

    #[test]
    fn stage_fails_when_start_diverges() {
        // zero gains leave the unstable plant mode free; a large start blows up
        let plant = PlantModel::new(
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let g = ControllerGains::zeros(1, 1, 1);
        let res = run_stage(&plant, &g, &[DVector::from_row_slice(&[1.0, 0.0])], &stage(20.0, 5)).unwrap();
        assert_eq!(res.status, StageStatus::Failed);
        assert_eq!(res.gains, g);
        assert!(res.loss_history.is_empty());
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(vals in proptest::collection::vec(-10.0f64..10.0, 20)) {
            let layout = GainLayout::of(&fixtures::final_gains());
            let v = GainVector { layout, values: DVector::from_vec(vals) };
            let g = v.unpack().unwrap();
            prop_assert_eq!(GainVector::pack(&g), v);
        }

        #[test]
        fn locate_inverts_index(idx in 0usize..20) {
            let layout = GainLayout::of(&fixtures::final_gains());
            let (b, r, c) = layout.locate(idx);
            prop_assert_eq!(layout.index(b, r, c), idx);
        }
    }
}
