//! Contractive-invariance certification of the saturated closed loop.
//!
//! For fixed gains the size-maximization problem is convex after the substitution
//! `Q = P⁻¹` (level normalized to one), `Z = H Q`, `γ = 1/α²`:
//!
//! ```text
//! minimize γ subject to
//!   [[γ, x̃ᵢᵀ], [x̃ᵢ, Q]] ⪰ 0                              every reference vertex
//!   (A-BF)Q + B diag(ν) F Q + B (I - diag(ν)) Z + (·)ᵀ ⪯ -εI   every ν ∈ {0,1}^m
//!   [[1, Zᵢ], [Zᵢᵀ, Q]] ⪰ 0                              every row of Z
//!   Q ⪰ εI
//! ```
//!
//! Returned certificates are re-checked by [`verify_certificate`] using plain
//! symmetric eigenvalue computations, independent of the solver.

pub mod sdp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, max_sym_eigenvalue, min_sym_eigenvalue, quad_form, symmetrize};
use crate::model::ClosedLoopSystem;
use sdp::{BarrierSolver, ConicBackend, LmiBlock, LmiProgram, SolveStatus};

/// Default strictness margin replacing the strict Lyapunov inequality.
pub const DEFAULT_STRICTNESS: f64 = 1e-6;
/// Required negativity of the Lyapunov blocks, checked in the `P⁻¹(·)P⁻¹` form.
pub const LYAPUNOV_TOL: f64 = 1e-9;
/// Allowed excess in the input-bound and containment conditions.
pub const BOUND_TOL: f64 = 1e-8;

/// Polyhedral shape reference set given by its vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRefRaw", into = "ShapeRefRaw")]
pub struct ShapeRefSet {
    vertices: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeRefRaw {
    vertices: Vec<Vec<f64>>,
}

impl TryFrom<ShapeRefRaw> for ShapeRefSet {
    type Error = Error;
    fn try_from(raw: ShapeRefRaw) -> Result<Self> {
        Self::new(raw.vertices.into_iter().map(DVector::from_vec).collect())
    }
}

impl From<ShapeRefSet> for ShapeRefRaw {
    fn from(s: ShapeRefSet) -> Self {
        ShapeRefRaw { vertices: s.vertices.iter().map(|v| v.as_slice().to_vec()).collect() }
    }
}

impl ShapeRefSet {
    pub fn new(vertices: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = vertices.first() else {
            return Err(Error::InvalidArgument("shape reference set needs at least one vertex".into()));
        };
        let dim = first.len();
        for (i, v) in vertices.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::dims(format!("reference vertex {i}"), dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("reference vertex {i}")));
            }
        }
        if vertices.iter().all(|v| v.iter().all(|&x| x == 0.0)) {
            return Err(Error::InvalidArgument("shape reference set has no nonzero vertex".into()));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Every vertex multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.vertices.iter().map(|v| v * c).collect())
    }
}

/// Element of `{0,1}^m` choosing rows of `F` (1) or `H` (0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexSelector(Vec<u8>);

impl VertexSelector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("selector entry {bad} is not 0 or 1")));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// All `2^m` selectors, in binary counting order.
pub fn enumerate_selectors(m: usize) -> Vec<VertexSelector> {
    (0..1usize << m)
        .map(|code| VertexSelector((0..m).map(|i| ((code >> i) & 1) as u8).collect()))
        .collect()
}

/// `M(ν, F, H) = diag(ν) F + (I - diag(ν)) H`.
pub fn vertex_matrix(nu: &VertexSelector, f: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.shape() != h.shape() {
        return Err(Error::dims("H", matrix::shape(f), matrix::shape(h)));
    }
    if nu.len() != f.nrows() {
        return Err(Error::dims("selector", f.nrows(), nu.len()));
    }
    let mut out = h.clone();
    for (i, &b) in nu.bits().iter().enumerate() {
        if b == 1 {
            out.row_mut(i).copy_from(&f.row(i));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockKind {
    Containment { vertex: usize },
    Lyapunov { selector: VertexSelector },
    InputBound { row: usize },
    LowerBound,
}

/// The α-maximization problem for one closed loop, in LMI form over
/// `y = (upper triangle of Q row by row, Z row-major, γ)`.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    sys: ClosedLoopSystem,
    reference: ShapeRefSet,
    strictness: f64,
    program: LmiProgram,
    kinds: Vec<BlockKind>,
}

impl SdpProblem {
    pub fn program(&self) -> &LmiProgram {
        &self.program
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn system(&self) -> &ClosedLoopSystem {
        &self.sys
    }

    pub fn reference(&self) -> &ShapeRefSet {
        &self.reference
    }

    pub fn strictness(&self) -> f64 {
        self.strictness
    }

    fn dims(&self) -> (usize, usize) {
        (self.sys.dim(), self.sys.input_dim())
    }

    pub fn num_variables(&self) -> usize {
        let (n, m) = self.dims();
        n * (n + 1) / 2 + m * n + 1
    }

    /// Pack `(Q, Z, γ)` into the decision vector; `Q` is read from its upper triangle.
    pub fn pack(&self, q: &DMatrix<f64>, z: &DMatrix<f64>, gamma: f64) -> DVector<f64> {
        let (n, m) = self.dims();
        let mut y = Vec::with_capacity(self.num_variables());
        for i in 0..n {
            for j in i..n {
                y.push(q[(i, j)]);
            }
        }
        for i in 0..m {
            for j in 0..n {
                y.push(z[(i, j)]);
            }
        }
        y.push(gamma);
        DVector::from_vec(y)
    }

    pub fn unpack(&self, y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, f64) {
        let (n, m) = self.dims();
        let mut q = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                q[(i, j)] = y[k];
                q[(j, i)] = y[k];
                k += 1;
            }
        }
        let mut z = DMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                z[(i, j)] = y[k];
                k += 1;
            }
        }
        (q, z, y[k])
    }

    /// Every constraint block evaluated at `(Q, Z, γ)`.
    pub fn blocks_at(&self, q: &DMatrix<f64>, z: &DMatrix<f64>, gamma: f64) -> Vec<DMatrix<f64>> {
        let y = self.pack(q, z, gamma);
        self.program.blocks.iter().map(|b| b.evaluate(y.as_slice())).collect()
    }

    /// Linear part only (constants dropped).
    pub fn linear_blocks_at(&self, q: &DMatrix<f64>, z: &DMatrix<f64>, gamma: f64) -> Vec<DMatrix<f64>> {
        let y = self.pack(q, z, gamma);
        self.program.blocks.iter().map(|b| b.linear_part(y.as_slice())).collect()
    }
}

/// Block values of the reformulated constraints at one point; `with_constant`
/// toggles the parts that do not depend on `(Q, Z, γ)`.
fn assemble_blocks(
    sys: &ClosedLoopSystem,
    reference: &ShapeRefSet,
    eps: f64,
    q: &DMatrix<f64>,
    z: &DMatrix<f64>,
    gamma: f64,
    with_constant: bool,
) -> Vec<DMatrix<f64>> {
    let n = sys.dim();
    let m = sys.input_dim();
    let c = if with_constant { 1.0 } else { 0.0 };
    let mut out = Vec::new();
    for v in reference.vertices() {
        let mut blk = DMatrix::zeros(n + 1, n + 1);
        blk[(0, 0)] = gamma;
        blk.view_mut((1, 1), (n, n)).copy_from(q);
        for i in 0..n {
            blk[(0, i + 1)] = c * v[i];
            blk[(i + 1, 0)] = c * v[i];
        }
        out.push(blk);
    }
    let lq = sys.a_minus_bf() * q;
    let fq = sys.f() * q;
    for nu in enumerate_selectors(m) {
        let mut x = lq.clone();
        for (i, &b) in nu.bits().iter().enumerate() {
            let row = if b == 1 { fq.row(i).into_owned() } else { z.row(i).into_owned() };
            x += sys.b().column(i) * row;
        }
        let mut blk = -(&x + x.transpose());
        for i in 0..n {
            blk[(i, i)] -= c * eps;
        }
        out.push(blk);
    }
    for i in 0..m {
        let mut blk = DMatrix::zeros(n + 1, n + 1);
        blk[(0, 0)] = c;
        blk.view_mut((1, 1), (n, n)).copy_from(q);
        for j in 0..n {
            blk[(0, j + 1)] = z[(i, j)];
            blk[(j + 1, 0)] = z[(i, j)];
        }
        out.push(blk);
    }
    let mut lower = q.clone();
    for i in 0..n {
        lower[(i, i)] -= c * eps;
    }
    out.push(lower);
    out
}

/// Emit the α-maximization problem for `sys` against `reference`.
pub fn build_sdp(sys: &ClosedLoopSystem, reference: &ShapeRefSet, strictness: f64) -> Result<SdpProblem> {
    if !(strictness.is_finite() && strictness > 0.0) {
        return Err(Error::InvalidArgument(format!("strictness must be positive, got {strictness}")));
    }
    if reference.dim() != sys.dim() {
        return Err(Error::dims("reference vertices", sys.dim(), reference.dim()));
    }
    let n = sys.dim();
    let m = sys.input_dim();
    let mut kinds: Vec<BlockKind> = (0..reference.vertices().len())
        .map(|vertex| BlockKind::Containment { vertex })
        .collect();
    kinds.extend(enumerate_selectors(m).into_iter().map(|selector| BlockKind::Lyapunov { selector }));
    kinds.extend((0..m).map(|row| BlockKind::InputBound { row }));
    kinds.push(BlockKind::LowerBound);

    let zero_q = DMatrix::zeros(n, n);
    let zero_z = DMatrix::zeros(m, n);
    let constants = assemble_blocks(sys, reference, strictness, &zero_q, &zero_z, 0.0, true);
    let mut blocks: Vec<LmiBlock> = constants
        .into_iter()
        .zip(&kinds)
        .map(|(constant, kind)| LmiBlock { label: format!("{kind:?}"), constant, terms: Vec::new() })
        .collect();

    let mut var = 0;
    let mut push_terms = |q: &DMatrix<f64>, z: &DMatrix<f64>, g: f64, var: usize| {
        for (blk, coeff) in blocks
            .iter_mut()
            .zip(assemble_blocks(sys, reference, strictness, q, z, g, false))
        {
            if coeff.iter().any(|&v| v != 0.0) {
                blk.terms.push((var, coeff));
            }
        }
    };
    for i in 0..n {
        for j in i..n {
            let mut q = zero_q.clone();
            q[(i, j)] = 1.0;
            q[(j, i)] = 1.0;
            push_terms(&q, &zero_z, 0.0, var);
            var += 1;
        }
    }
    for i in 0..m {
        for j in 0..n {
            let mut z = zero_z.clone();
            z[(i, j)] = 1.0;
            push_terms(&zero_q, &z, 0.0, var);
            var += 1;
        }
    }
    push_terms(&zero_q, &zero_z, 1.0, var);
    var += 1;

    let mut objective = DVector::zeros(var);
    objective[var - 1] = 1.0;
    Ok(SdpProblem {
        sys: sys.clone(),
        reference: reference.clone(),
        strictness,
        program: LmiProgram { objective, blocks },
        kinds,
    })
}

/// Pass/fail of one verified condition with its worst slack (positive is good).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub passed: bool,
    pub slack: f64,
    pub tolerance: f64,
}

impl ConditionCheck {
    fn at_least(slack: f64, tolerance: f64) -> Self {
        Self { passed: slack >= tolerance, slack, tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Smallest eigenvalue of `P`.
    pub positive_definite: ConditionCheck,
    /// `-λ_max` of `Q Lᵀ + L Q` over all selectors, with `Q = P⁻¹`, `L = A - BF + B M(ν,F,H)`.
    pub lyapunov: ConditionCheck,
    /// `1 - max_i H_i P⁻¹ H_iᵀ`.
    pub input_bound: ConditionCheck,
    /// `1 - max_i α² x̃ᵢᵀ P x̃ᵢ`.
    pub containment: ConditionCheck,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.positive_definite.passed && self.lyapunov.passed && self.input_bound.passed && self.containment.passed
    }

    fn failures(&self) -> String {
        let mut out = Vec::new();
        for (name, c) in [
            ("positive definiteness", &self.positive_definite),
            ("Lyapunov decrease", &self.lyapunov),
            ("input bound", &self.input_bound),
            ("containment", &self.containment),
        ] {
            if !c.passed {
                out.push(format!("{name} (slack {:.3e}, need {:.1e})", c.slack, c.tolerance));
            }
        }
        out.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub backend: String,
    pub status: SolveStatus,
    /// Optimal γ = 1/α² as returned by the solver.
    pub gamma: f64,
    pub gap_bound: f64,
    pub newton_steps: usize,
    pub strictness: f64,
}

/// Ellipsoid `{x : xᵀ P x ≤ 1}` with auxiliary gain `H` and size measure `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedEllipsoid {
    #[serde(rename = "P", with = "matrix::rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "H", with = "matrix::rows")]
    pub h: DMatrix<f64>,
    pub alpha: f64,
    /// Smallest Lyapunov-block slack among all verified selectors.
    pub margin: f64,
    pub verification: Option<VerificationReport>,
    pub solver: Option<SolverInfo>,
}

#[derive(Debug, Clone)]
pub enum Certification {
    Certified(Box<CertifiedEllipsoid>),
    Infeasible,
}

impl Certification {
    pub fn certificate(&self) -> Option<&CertifiedEllipsoid> {
        match self {
            Certification::Certified(c) => Some(c),
            Certification::Infeasible => None,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        self.certificate().map(|c| c.alpha)
    }
}

/// `sup{α : α X_R ⊂ Ω(P, 1)}`, attained at the vertices of the polytope.
pub fn alpha_measure(p: &DMatrix<f64>, reference: &ShapeRefSet) -> Result<f64> {
    let worst = reference
        .vertices()
        .iter()
        .filter(|v| v.iter().any(|&x| x != 0.0))
        .map(|v| quad_form(p, v))
        .fold(0.0_f64, f64::max);
    if worst <= 0.0 {
        return Err(Error::InvalidArgument("no nonzero reference vertex to measure against".into()));
    }
    Ok(1.0 / worst.sqrt())
}

fn inverse_spd(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(p)).map(|c| symmetrize(&c.inverse()))
}

/// Re-check the invariance conditions for `cert` directly from `(P, H, α)`.
pub fn verify_certificate(
    sys: &ClosedLoopSystem,
    cert: &CertifiedEllipsoid,
    reference: &ShapeRefSet,
) -> Result<VerificationReport> {
    let n = sys.dim();
    let m = sys.input_dim();
    matrix::expect_shape("P", &cert.p, n, n)?;
    matrix::expect_shape("H", &cert.h, m, n)?;
    if reference.dim() != n {
        return Err(Error::dims("reference vertices", n, reference.dim()));
    }
    let p = symmetrize(&cert.p);
    let min_eig = min_sym_eigenvalue(&p);
    let positive_definite = ConditionCheck { passed: min_eig > 0.0, slack: min_eig, tolerance: 0.0 };

    let fail = |slack: f64, tolerance: f64| ConditionCheck { passed: false, slack, tolerance };
    let Some(q) = inverse_spd(&p).filter(|_| positive_definite.passed) else {
        return Ok(VerificationReport {
            positive_definite,
            lyapunov: fail(f64::NEG_INFINITY, LYAPUNOV_TOL),
            input_bound: fail(f64::NEG_INFINITY, -BOUND_TOL),
            containment: fail(f64::NEG_INFINITY, -BOUND_TOL),
        });
    };

    // (L + B M)ᵀP + P(L + B M) ≺ 0  ⇔  Q(L + B M)ᵀ + (L + B M)Q ≺ 0 by congruence with Q.
    let mut lyap_slack = f64::INFINITY;
    for nu in enumerate_selectors(m) {
        let mm = vertex_matrix(&nu, sys.f(), &cert.h)?;
        let closed = sys.a_minus_bf() + sys.b() * mm;
        let x = &closed * &q;
        lyap_slack = lyap_slack.min(-max_sym_eigenvalue(&(&x + x.transpose())));
    }
    let lyapunov = ConditionCheck::at_least(lyap_slack, LYAPUNOV_TOL);

    let worst_row = (0..m)
        .map(|i| {
            let hi = cert.h.row(i).transpose();
            quad_form(&q, &hi)
        })
        .fold(0.0_f64, f64::max);
    let input_bound = ConditionCheck::at_least(1.0 - worst_row, -BOUND_TOL);

    let worst_vertex = reference
        .vertices()
        .iter()
        .map(|v| cert.alpha * cert.alpha * quad_form(&p, v))
        .fold(0.0_f64, f64::max);
    let containment = ConditionCheck::at_least(1.0 - worst_vertex, -BOUND_TOL);

    Ok(VerificationReport { positive_definite, lyapunov, input_bound, containment })
}

/// Solve the α-maximization problem and return a verified certificate.
pub fn solve_alpha(problem: &SdpProblem, backend: &dyn ConicBackend) -> Result<Certification> {
    let sol = backend.solve(problem.program())?;
    if sol.status == SolveStatus::Infeasible {
        return Ok(Certification::Infeasible);
    }
    let (q, z, gamma) = problem.unpack(&sol.y);
    let p = inverse_spd(&q).ok_or_else(|| Error::Solver("returned Q is not positive definite".into()))?;
    let h = &z * &p;
    let alpha = alpha_measure(&p, problem.reference())?;
    let mut cert = CertifiedEllipsoid {
        p,
        h,
        alpha,
        margin: f64::NAN,
        verification: None,
        solver: Some(SolverInfo {
            backend: backend.name().to_string(),
            status: sol.status,
            gamma,
            gap_bound: sol.gap_bound,
            newton_steps: sol.newton_steps,
            strictness: problem.strictness(),
        }),
    };
    let report = verify_certificate(problem.system(), &cert, problem.reference())?;
    if !report.passed() {
        return Err(Error::Verification(report.failures()));
    }
    cert.margin = report.lyapunov.slack;
    cert.verification = Some(report);
    Ok(Certification::Certified(Box::new(cert)))
}

/// Strictness margin and backend for certification runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyOptions {
    pub strictness: f64,
    pub solver: BarrierSolver,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { strictness: DEFAULT_STRICTNESS, solver: BarrierSolver::default() }
    }
}

/// Build and solve in one call.
pub fn certify(sys: &ClosedLoopSystem, reference: &ShapeRefSet, opts: &CertifyOptions) -> Result<Certification> {
    let problem = build_sdp(sys, reference, opts.strictness)?;
    solve_alpha(&problem, &opts.solver)
}
