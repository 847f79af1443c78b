//! The staged design loop: certify the initial controller, sample the shell around its
//! ellipsoid, train on growing horizons and keep the best certified stage.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{certify, Certification, CertifiedEllipsoid, CertifyOptions, ShapeRefSet, VerificationReport};
use crate::error::{Error, Result};
use crate::model::{assemble_closed_loop, saturate, ControllerGains, PlantModel, SaturationMode, SmoothingParam};
use crate::sim::{fmt17, integrate, DEFAULT_STEP};
use crate::train::{run_stage, AdamConfig, StageConfig, StageStatus, DEFAULT_CLIP_NORM, DEFAULT_EPOCHS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Draws below this acceptance rate mean the mask and shell barely intersect.
const MIN_ACCEPTANCE: f64 = 1e-4;
const MIN_ATTEMPTS_BEFORE_GIVING_UP: usize = 10_000;

/// Allowed sign patterns on the plant coordinates, e.g. `["++", "--"]` for the
/// first and third quadrants. Zero counts as either sign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct QuadrantMask {
    patterns: Vec<Vec<bool>>, // true = non-negative
}

impl QuadrantMask {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::InvalidArgument("quadrant mask needs at least one pattern".into()));
        }
        let mut parsed = Vec::with_capacity(patterns.len());
        for p in patterns {
            let p = p.as_ref();
            let signs = p
                .chars()
                .map(|c| match c {
                    '+' => Ok(true),
                    '-' => Ok(false),
                    _ => Err(Error::InvalidArgument(format!("sign pattern {p:?} may only contain '+' and '-'"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if signs.is_empty() || parsed.first().is_some_and(|f: &Vec<bool>| f.len() != signs.len()) {
                return Err(Error::InvalidArgument(format!("sign pattern {p:?} has inconsistent length")));
            }
            parsed.push(signs);
        }
        Ok(Self { patterns: parsed })
    }

    pub fn first_and_third() -> Self {
        Self::new(&["++", "--"]).expect("valid pattern")
    }

    pub fn width(&self) -> usize {
        self.patterns[0].len()
    }

    pub fn admits(&self, xp: &[f64]) -> bool {
        self.patterns
            .iter()
            .any(|p| p.iter().zip(xp).all(|(&pos, &v)| if pos { v >= 0.0 } else { v <= 0.0 }))
    }
}

impl TryFrom<Vec<String>> for QuadrantMask {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<QuadrantMask> for Vec<String> {
    fn from(m: QuadrantMask) -> Self {
        m.patterns
            .iter()
            .map(|p| p.iter().map(|&s| if s { '+' } else { '-' }).collect())
            .collect()
    }
}

/// How the controller coordinates of sampled initial states are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerStateSampling {
    /// `x_c(0) = 0`: uniform over the shell's slice through the plant subspace.
    #[default]
    Zero,
    /// Uniform over the full shell.
    Free,
}

/// Uniform samples from `{x : 1 < xᵀPx ≤ β²}` admitted by `mask`.
pub fn sample_shell<R: Rng + ?Sized>(
    p: &DMatrix<f64>,
    plant_dim: usize,
    beta: f64,
    count: usize,
    mask: Option<&QuadrantMask>,
    controller_state: ControllerStateSampling,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if !(beta > 1.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("shell factor must exceed 1, got {beta}")));
    }
    let n = p.nrows();
    if p.ncols() != n || plant_dim == 0 || plant_dim > n {
        return Err(Error::dims("shell matrix", format!("square, at least {plant_dim} rows"), format!("{}x{}", n, p.ncols())));
    }
    if let Some(m) = mask {
        if m.width() != plant_dim {
            return Err(Error::dims("quadrant mask", plant_dim, m.width()));
        }
    }
    let d = match controller_state {
        ControllerStateSampling::Zero => plant_dim,
        ControllerStateSampling::Free => n,
    };
    let sub = p.view((0, 0), (d, d)).clone_owned();
    // P = LLᵀ, x = β L⁻ᵀ v maps the unit ball onto {xᵀPx ≤ β²}
    let chol = sub
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("shell matrix is not positive definite".into()))?;
    let lt = chol.l().transpose();

    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        let dir = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let radius = rng.random::<f64>().powf(1.0 / d as f64);
        let v = dir * (beta * radius / norm);
        let xs = lt.solve_upper_triangular(&v).expect("triangular factor is nonsingular");
        let mut x = DVector::zeros(n);
        x.rows_mut(0, d).copy_from(&xs);
        let level = crate::matrix::quad_form(p, &x);
        let admitted = level > 1.0 && level <= beta * beta && mask.is_none_or(|m| m.admits(&x.as_slice()[..plant_dim]));
        if admitted {
            out.push(x);
        } else if attempts >= MIN_ATTEMPTS_BEFORE_GIVING_UP {
            let rate = out.len() as f64 / attempts as f64;
            if rate < MIN_ACCEPTANCE {
                return Err(Error::SamplerStarved { rate, attempts });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Final training horizon `T`; stage k trains on `kT/N`.
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub stages: usize,
    #[serde(rename = "J")]
    pub batch: usize,
    pub beta: f64,
    pub zeta: SmoothingParam,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub step: f64,
    pub quadrant_mask: Option<QuadrantMask>,
    pub controller_state: ControllerStateSampling,
    pub clip_norm: f64,
}

impl DesignConfig {
    /// The first numerical example's hyperparameters.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            horizon: 20.0,
            stages: 20,
            batch: 10,
            beta: 10.0,
            zeta: SmoothingParam::default(),
            learning_rate: AdamConfig::default().learning_rate,
            epochs: DEFAULT_EPOCHS,
            seed,
            step: DEFAULT_STEP,
            quadrant_mask: None,
            controller_state: ControllerStateSampling::Zero,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("T must be positive");
        }
        if self.stages == 0 {
            return bad("N must be at least 1");
        }
        if self.batch == 0 {
            return bad("J must be at least 1");
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return bad("beta must exceed 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn stage_horizon(&self, k: usize) -> f64 {
        k as f64 * self.horizon / self.stages as f64
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `gains`.
pub fn gains_hash(gains: &ControllerGains) -> String {
    let bytes = serde_json::to_vec(gains).expect("gains always serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageCertification {
    Certified,
    Infeasible,
    /// Solver or verification failure; see `error`.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub k: usize,
    pub horizon: f64,
    pub training: StageStatus,
    pub start_hash: String,
    pub end_hash: String,
    pub gains: ControllerGains,
    pub loss_history: Vec<f64>,
    pub gradient_norm_history: Vec<f64>,
    pub diverged_epochs: usize,
    pub certification: StageCertification,
    pub alpha: Option<f64>,
    pub verification: Option<VerificationReport>,
    pub error: Option<String>,
    /// Best α after this stage.
    pub alpha_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub schema_version: u32,
    pub config: DesignConfig,
    pub alpha0: f64,
    pub initial_gains: ControllerGains,
    pub initial_certificate: CertifiedEllipsoid,
    pub stages: Vec<StageRecord>,
    pub alpha_max: f64,
    /// Stage that produced the winner; `None` when no stage beat the initial controller.
    pub winning_stage: Option<usize>,
    pub winning_gains: ControllerGains,
    pub winning_certificate: CertifiedEllipsoid,
}

impl DesignReport {
    /// `α_max` after each stage, starting with `α₀`.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        std::iter::once(self.alpha0).chain(self.stages.iter().map(|s| s.alpha_max)).collect()
    }

    /// `stage,alpha,alpha_max`; stage 0 is the initial controller, uncertified stages leave alpha empty.
    pub fn write_alpha_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stage,alpha,alpha_max")?;
        writeln!(w, "0,{},{}", fmt17(self.alpha0), fmt17(self.alpha0))?;
        for s in &self.stages {
            let a = s.alpha.map(fmt17).unwrap_or_default();
            writeln!(w, "{},{},{}", s.k, a, fmt17(s.alpha_max))?;
        }
        Ok(())
    }

    pub fn write_loss_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stage,epoch,loss,grad_norm")?;
        for s in &self.stages {
            for (e, (l, g)) in s.loss_history.iter().zip(&s.gradient_norm_history).enumerate() {
                writeln!(w, "{},{},{},{}", s.k, e + 1, fmt17(*l), fmt17(*g))?;
            }
        }
        Ok(())
    }
}

/// Run the staged design. `observe` is called after every stage.
pub fn run_design_with(
    plant: &PlantModel,
    initial: &ControllerGains,
    reference: &ShapeRefSet,
    cfg: &DesignConfig,
    certify_opts: &CertifyOptions,
    mut observe: impl FnMut(&StageRecord),
) -> Result<DesignReport> {
    cfg.validate()?;
    initial.check_compatible(plant)?;
    let gains0 = initial.without_anti_windup();
    let sys0 = assemble_closed_loop(plant, &gains0)?;
    let cert0 = match certify(&sys0, reference, certify_opts)? {
        Certification::Certified(c) => *c,
        Certification::Infeasible => {
            return Err(Error::Infeasible);
        }
    };
    let alpha0 = cert0.alpha;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stage_cfg = |k: usize| StageConfig {
        horizon: cfg.stage_horizon(k),
        epochs: cfg.epochs,
        zeta: cfg.zeta,
        step: cfg.step,
        adam: AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() },
        clip_norm: cfg.clip_norm,
    };

    let mut current = gains0.clone();
    let mut best = (alpha0, None, gains0.clone(), cert0.clone());
    let mut stages = Vec::with_capacity(cfg.stages);
    for k in 1..=cfg.stages {
        let batch = sample_shell(
            &cert0.p,
            plant.n(),
            cfg.beta,
            cfg.batch,
            cfg.quadrant_mask.as_ref(),
            cfg.controller_state,
            &mut rng,
        )?;
        let start_hash = gains_hash(&current);
        let sc = stage_cfg(k);
        let trained = run_stage(plant, &current, &batch, &sc)?;

        let (certification, cert, error) = match assemble_closed_loop(plant, &trained.gains)
            .and_then(|sys| certify(&sys, reference, certify_opts))
        {
            Ok(Certification::Certified(c)) => (StageCertification::Certified, Some(*c), None),
            Ok(Certification::Infeasible) => (StageCertification::Infeasible, None, None),
            Err(e) => (StageCertification::Failed, None, Some(e.to_string())),
        };
        let alpha = cert.as_ref().map(|c| c.alpha);
        if let (Some(a), Some(c)) = (alpha, &cert) {
            if a > best.0 {
                best = (a, Some(k), trained.gains.clone(), c.clone());
            }
        }
        let record = StageRecord {
            k,
            horizon: sc.horizon,
            training: trained.status,
            start_hash,
            end_hash: gains_hash(&trained.gains),
            gains: trained.gains.clone(),
            loss_history: trained.loss_history,
            gradient_norm_history: trained.gradient_norm_history,
            diverged_epochs: trained.diverged_epochs,
            certification,
            alpha,
            verification: cert.and_then(|c| c.verification),
            error,
            alpha_max: best.0,
        };
        observe(&record);
        stages.push(record);
        current = trained.gains;
    }

    let (alpha_max, winning_stage, winning_gains, winning_certificate) = best;
    Ok(DesignReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        alpha0,
        initial_gains: gains0,
        initial_certificate: cert0,
        stages,
        alpha_max,
        winning_stage,
        winning_gains,
        winning_certificate,
    })
}

pub fn run_design(
    plant: &PlantModel,
    initial: &ControllerGains,
    reference: &ShapeRefSet,
    cfg: &DesignConfig,
    certify_opts: &CertifyOptions,
) -> Result<DesignReport> {
    run_design_with(plant, initial, reference, cfg, certify_opts, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub converging: bool,
    /// Time at which the divergence guard tripped.
    pub diverged_at: Option<f64>,
    pub initial_norm: f64,
    pub final_norm: f64,
    /// `∫‖x‖² dt` up to the horizon (or the divergence time).
    pub energy: f64,
    /// `max_t ‖σ(u)‖∞`; never above 1.
    pub max_applied_input: f64,
    pub max_commanded_input: f64,
    /// Grid points where the commanded input exceeds the actuator limit.
    pub saturated_samples: usize,
    pub samples: usize,
}

/// Simulate one initial state and summarize it. Divergence is reported, not raised.
pub fn evaluate_controller(
    plant: &PlantModel,
    gains: &ControllerGains,
    x0: &DVector<f64>,
    horizon: f64,
    mode: SaturationMode,
    step: f64,
) -> Result<ControllerSummary> {
    let sys = assemble_closed_loop(plant, gains)?;
    let initial_norm = x0.norm();
    match integrate(&sys, x0, horizon, step, mode) {
        Ok(traj) => {
            let mut max_applied: f64 = 0.0;
            let mut max_commanded: f64 = 0.0;
            let mut saturated = 0;
            for u in &traj.inputs {
                max_applied = max_applied.max(saturate(u).amax());
                let c = u.amax();
                max_commanded = max_commanded.max(c);
                if c > 1.0 {
                    saturated += 1;
                }
            }
            let final_norm = traj.final_state().norm();
            Ok(ControllerSummary {
                converging: final_norm <= 0.5 * initial_norm,
                diverged_at: None,
                initial_norm,
                final_norm,
                energy: traj.final_loss(),
                max_applied_input: max_applied,
                max_commanded_input: max_commanded,
                saturated_samples: saturated,
                samples: traj.len(),
            })
        }
        Err(Error::Divergence { time, .. }) => Ok(ControllerSummary {
            converging: false,
            diverged_at: Some(time),
            initial_norm,
            final_norm: f64::INFINITY,
            energy: f64::INFINITY,
            max_applied_input: 1.0,
            max_commanded_input: f64::INFINITY,
            saturated_samples: 0,
            samples: 0,
        }),
        Err(e) => Err(e),
    }
}
