//! Semidefinite programs for the stability and peak-bound LMIs, a pluggable
//! solver backend and solver-independent verification.

pub mod expr;
pub mod ipm;
pub mod problem;
pub mod sdpa;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::ExtendedSystem;
use crate::multipliers::MultiplierSet;
use expr::{AffineMatrix, LinExpr};
use ipm::{DualFormSdp, IpmOptions, IpmStatus, LinRow, PsdBlock, VarMatrix};
use problem::{SdpProblem, SymMatrixVar};

pub const BACKEND_ENV: &str = "IQCROA_BACKEND";
pub const VERIFY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("unknown solver backend '{0}' (available: ipm)")]
    UnknownBackend(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiOptions {
    pub eps_pd: f64,
    pub eps_lmi: f64,
}

impl Default for LmiOptions {
    fn default() -> Self {
        LmiOptions { eps_pd: 1e-8, eps_lmi: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Feasibility,
    MinimizeTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolverStatus,
    pub objective: f64,
    #[serde(skip)]
    pub x: DVector<f64>,
    pub max_residual: f64,
    pub solve_time_s: f64,
    pub iterations: usize,
    pub backend: String,
    pub detail: String,
}

impl SolverReport {
    pub fn is_success(&self) -> bool {
        matches!(self.status, SolverStatus::Optimal | SolverStatus::Feasible)
    }
}

pub trait SdpBackend: Send + Sync {
    fn name(&self) -> &str;
    fn solve(&self, problem: &SdpProblem) -> SolverReport;
}

/// In-process interior-point backend.
#[derive(Debug, Clone, Default)]
pub struct IpmBackend {
    pub options: IpmOptions,
}

/// Per-constraint scaling that leaves the feasible set unchanged.
fn scale_of(expr: &AffineMatrix) -> f64 {
    let mut m = expr.constant_part().amax();
    for (_, e) in expr.terms() {
        for &c in e.values() {
            m = m.max(c.abs());
        }
    }
    if m > 0.0 {
        1.0 / m
    } else {
        1.0
    }
}

pub fn to_dual_form(problem: &SdpProblem) -> DualFormSdp {
    let mut b = DVector::zeros(problem.n_vars());
    for (&v, &c) in &problem.objective.terms {
        b[v] = -c;
    }
    let psd = problem
        .psd
        .iter()
        .map(|pc| {
            let e = pc.expr.symmetrized();
            let s = scale_of(&e);
            let a = e
                .terms()
                .map(|(v, ent)| VarMatrix::new(v, ent.iter().map(|(&(r, c), &x)| (r, c, -x * s)).collect()))
                .collect();
            PsdBlock { c: e.constant_part() * s, a }
        })
        .collect();
    let lin = problem
        .nonneg
        .iter()
        .map(|nc| {
            let m = nc.expr.terms.values().fold(nc.expr.constant.abs(), |m, c| m.max(c.abs()));
            let s = if m > 0.0 { 1.0 / m } else { 1.0 };
            LinRow { c: nc.expr.constant * s, a: nc.expr.terms.iter().map(|(&v, &c)| (v, -c * s)).collect() }
        })
        .collect();
    DualFormSdp { m: problem.n_vars(), b, psd, lin }
}

impl SdpBackend for IpmBackend {
    fn name(&self) -> &str {
        "ipm"
    }

    fn solve(&self, problem: &SdpProblem) -> SolverReport {
        let start = Instant::now();
        let form = to_dual_form(problem);
        let res = form.solve(&self.options);
        let x = res.y.clone();
        let max_residual = problem.max_violation(&x);
        let tol = 1e-7 * (1.0 + x.norm());
        let status = match res.status {
            IpmStatus::Optimal if max_residual <= tol => SolverStatus::Optimal,
            IpmStatus::Optimal | IpmStatus::Feasible | IpmStatus::Stalled if max_residual <= tol => {
                SolverStatus::Feasible
            }
            IpmStatus::DualInfeasible => SolverStatus::Infeasible,
            _ if res.dual_infeas > 1e-6 => SolverStatus::Infeasible,
            _ => SolverStatus::NumericalFailure,
        };
        SolverReport {
            status,
            objective: problem.objective.eval(&x),
            x,
            max_residual,
            solve_time_s: start.elapsed().as_secs_f64(),
            iterations: res.iterations,
            backend: self.name().to_string(),
            detail: format!(
                "ipm {:?}: pinf {:.2e}, dinf {:.2e}, pobj {:.6e}, dobj {:.6e}",
                res.status, res.primal_infeas, res.dual_infeas, res.primal_obj, res.dual_obj
            ),
        }
    }
}

/// Backend chosen by the `IQCROA_BACKEND` environment variable (default `ipm`).
pub fn default_backend() -> Result<Box<dyn SdpBackend>, SdpError> {
    backend_by_name(std::env::var(BACKEND_ENV).ok().as_deref().unwrap_or(""))
}

pub fn backend_by_name(name: &str) -> Result<Box<dyn SdpBackend>, SdpError> {
    match name.trim() {
        "" | "ipm" => Ok(Box::new(IpmBackend::default())),
        other => Err(SdpError::UnknownBackend(other.to_string())),
    }
}

/// Assembled certificate program with handles to its variable blocks.
#[derive(Debug, Clone)]
pub struct CertificateProgram {
    pub problem: SdpProblem,
    pub x: SymMatrixVar,
    pub nx: usize,
    pub n_xi: usize,
    pub multiplier: MultiplierSet,
    /// Offset of the multiplier's variables inside `problem`.
    pub multiplier_offset: usize,
    pub options: LmiOptions,
}

impl CertificateProgram {
    pub fn n_eta(&self) -> usize {
        self.nx + self.n_xi
    }

    pub fn x_value(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.x.value(x)
    }

    pub fn multiplier_vars(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.multiplier_offset, self.multiplier.program.n_vars()).into_owned()
    }

    pub fn set_mode(&mut self, mode: SolveMode) {
        self.problem.objective = match mode {
            SolveMode::Feasibility => LinExpr::default(),
            SolveMode::MinimizeTrace => {
                let mut e = LinExpr::default();
                for i in 0..self.nx {
                    e.add(self.x.var(i, i), 1.0);
                }
                e
            }
        };
    }
}

/// `[I 0; A_tot B_tot; C_tot D_tot]`.
pub fn outer_factor(ext: &ExtendedSystem) -> DMatrix<f64> {
    let (ne, nw, nr) = (ext.n_eta(), ext.n_w(), ext.n_r());
    let mut l = DMatrix::zeros(2 * ne + nr, ne + nw);
    l.view_mut((0, 0), (ne, ne)).fill_with_identity();
    l.view_mut((ne, 0), (ne, ne)).copy_from(&ext.a);
    l.view_mut((ne, ne), (ne, nw)).copy_from(&ext.b);
    l.view_mut((2 * ne, 0), (nr, ne)).copy_from(&ext.c);
    l.view_mut((2 * ne, ne), (nr, nw)).copy_from(&ext.d);
    l
}

/// Stability LMI `Lᵀ blkdiag(−X, X, P) L ⪯ −ε_lmi I` and `X ⪰ ε_pd I`.
pub fn assemble_stability_lmi(ext: &ExtendedSystem, mult: &MultiplierSet, opts: LmiOptions) -> CertificateProgram {
    assert_eq!(mult.dim(), ext.n_r(), "multiplier size must match the filter output");
    let ne = ext.n_eta();
    let mut problem = SdpProblem::new();
    let x = problem.new_sym(ne);
    let off = problem.absorb(&mult.program);
    let p = mult.p.offset_vars(off);
    let xe = x.expr();

    let mut middle = AffineMatrix::zeros(2 * ne + ext.n_r(), 2 * ne + ext.n_r());
    middle.place(&xe.scaled(-1.0), 0, 0);
    middle.place(&xe, ne, ne);
    middle.place(&p, 2 * ne, 2 * ne);
    let lmi = middle.congruence(&outer_factor(ext)).symmetrized();
    let dim = lmi.nrows();
    let mut neg = lmi.scaled(-1.0);
    neg.place_constant(&(DMatrix::identity(dim, dim) * -opts.eps_lmi), 0, 0);
    problem.add_psd("stability LMI", neg);

    let mut pd = xe.clone();
    pd.place_constant(&(DMatrix::identity(ne, ne) * -opts.eps_pd), 0, 0);
    problem.add_psd("X positive definite", pd);

    CertificateProgram {
        problem,
        x,
        nx: ext.nx,
        n_xi: ext.n_xi,
        multiplier: mult.clone(),
        multiplier_offset: off,
        options: opts,
    }
}

/// Peak bounds `[[d_j², Q_j, 0], [Q_jᵀ, X_x, X_xξ], [0, X_ξx, X_ξ]] ⪰ 0`.
pub fn assemble_peak_lmi(prog: &mut CertificateProgram, q: &DMatrix<f64>, d1: &DVector<f64>) {
    assert!(d1.iter().all(|&d| d > 0.0), "d1 must be positive");
    assert_eq!(q.nrows(), d1.len());
    let ne = prog.n_eta();
    let xe = prog.x.expr();
    for j in 0..d1.len() {
        let mut m = AffineMatrix::zeros(ne + 1, ne + 1);
        m.add_constant(0, 0, d1[j] * d1[j]);
        for k in 0..prog.nx {
            m.add_constant(0, 1 + k, q[(j, k)]);
            m.add_constant(1 + k, 0, q[(j, k)]);
        }
        m.place(&xe, 1, 1);
        prog.problem.add_psd(format!("peak bound {j}"), m);
    }
}

/// Concrete LMI matrix `Lᵀ blkdiag(−X, X, P) L` from numbers.
pub fn stability_matrix(ext: &ExtendedSystem, x: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let ne = ext.n_eta();
    let nr = ext.n_r();
    let mut mid = DMatrix::zeros(2 * ne + nr, 2 * ne + nr);
    mid.view_mut((0, 0), (ne, ne)).copy_from(&(-x));
    mid.view_mut((ne, ne), (ne, ne)).copy_from(x);
    mid.view_mut((2 * ne, 2 * ne), (nr, nr)).copy_from(p);
    let l = outer_factor(ext);
    let m = l.transpose() * mid * l;
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    /// `λ_min(−LMI)`.
    pub stability_margin: f64,
    /// `λ_min(X)`.
    pub x_min_eig: f64,
    pub peak_margins: Vec<f64>,
    pub multiplier_violation: f64,
    pub decision_variables: usize,
    pub violations: Vec<String>,
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Recomputes every certificate condition from concrete matrices. `multiplier`
/// carries the class constraints and the local variable values of `P`.
pub fn verify_certificate(
    ext: &ExtendedSystem,
    q: &DMatrix<f64>,
    d1: &DVector<f64>,
    x: &DMatrix<f64>,
    p: &DMatrix<f64>,
    multiplier: Option<(&MultiplierSet, &DVector<f64>)>,
    opts: LmiOptions,
) -> VerificationReport {
    let mut violations = Vec::new();
    let ne = ext.n_eta();
    let stab = stability_matrix(ext, x, p);
    let stability_margin = min_eig(&(-stab));
    // the tolerance absorbs solver error on ε, but the sign itself must hold
    if stability_margin - opts.eps_lmi < -VERIFY_TOL || stability_margin <= 0.0 {
        violations.push(format!("stability LMI: min eigenvalue {:.3e} below {:.1e}", stability_margin, opts.eps_lmi));
    }
    let x_min_eig = min_eig(x);
    if x_min_eig - opts.eps_pd < -VERIFY_TOL || x_min_eig <= 0.0 {
        violations.push(format!("X positive definite: min eigenvalue {x_min_eig:.3e}"));
    }
    let mut peak_margins = Vec::new();
    for j in 0..d1.len() {
        let mut m = DMatrix::zeros(ne + 1, ne + 1);
        m[(0, 0)] = d1[j] * d1[j];
        for k in 0..ext.nx {
            m[(0, 1 + k)] = q[(j, k)];
            m[(1 + k, 0)] = q[(j, k)];
        }
        m.view_mut((1, 1), (ne, ne)).copy_from(x);
        let e = min_eig(&m);
        if e < -VERIFY_TOL {
            violations.push(format!("peak bound {j}: min eigenvalue {e:.3e}"));
        }
        peak_margins.push(e);
    }
    let (multiplier_violation, decision_variables) = match multiplier {
        Some((set, vals)) => {
            let p_expected = set.valuation(vals).p;
            let mut worst = 0.0_f64;
            if (&p_expected - p).amax() > VERIFY_TOL * (1.0 + p.amax()) {
                violations.push("multiplier P does not match its parameters".into());
            }
            for (label, v) in set.program.violations(vals) {
                if v > VERIFY_TOL {
                    violations.push(format!("multiplier constraint '{label}' violated by {v:.3e}"));
                }
                worst = worst.max(v);
            }
            (worst, set.decision_variables)
        }
        None => (0.0, 0),
    };
    VerificationReport {
        valid: violations.is_empty(),
        stability_margin,
        x_min_eig,
        peak_margins,
        multiplier_violation,
        decision_variables,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_trace_with_identity_lower_bound() {
        let mut p = SdpProblem::new();
        let x = p.new_sym(2);
        let mut e = x.expr();
        e.place_constant(&(-DMatrix::<f64>::identity(2, 2)), 0, 0);
        p.add_psd("X >= I", e);
        p.objective.add(x.var(0, 0), 1.0);
        p.objective.add(x.var(1, 1), 1.0);
        let r = IpmBackend::default().solve(&p);
        assert_eq!(r.status, SolverStatus::Optimal, "{}", r.detail);
        assert!((r.objective - 2.0).abs() < 1e-6);
        assert!((x.value(&r.x) - DMatrix::<f64>::identity(2, 2)).amax() < 1e-5);
    }

    #[test]
    fn backend_names() {
        assert_eq!(backend_by_name("ipm").unwrap().name(), "ipm");
        assert_eq!(backend_by_name("").unwrap().name(), "ipm");
        assert!(matches!(backend_by_name("mosek"), Err(SdpError::UnknownBackend(_))));
    }
}
