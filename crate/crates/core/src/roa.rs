//! Certification pipeline at a given box size `δ` and the outer searches:
//! bisection for the largest certifiable `δ` and golden-section search for
//! the smallest ellipsoid trace.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{local_bounds, propagate_boxes, BoxBounds, SectorSlopeBounds};
use crate::filters::{extend_plant, realize, ExtendedSystem, FilterRealization};
use crate::model::{matrix_from_rows, matrix_to_rows, model_fingerprint, LoopModel, ModelError, ShiftedLoop};
use crate::multipliers::{build_multiplier, MultiplierError, MultiplierSet, MultiplierSpec};
use crate::sdp::{
    assemble_peak_lmi, assemble_stability_lmi, verify_certificate, CertificateProgram, LmiOptions, SdpBackend,
    SolveMode, SolverReport, SolverStatus, VerificationReport,
};

#[derive(Debug, Error)]
pub enum RoaError {
    #[error("steady state: {0}")]
    Model(#[from] ModelError),
    #[error("multiplier: {0}")]
    Multiplier(#[from] MultiplierError),
    #[error("not certifiable: infeasible even at the smallest probe delta = {0:e}")]
    NotCertifiable(f64),
    #[error("infeasible at delta = {delta:e} ({detail})")]
    Infeasible { delta: f64, detail: String },
    #[error("solver returned a point that failed verification at delta = {delta:e}: {detail}")]
    VerificationFailed { delta: f64, detail: String },
    #[error("certificate: {0}")]
    Certificate(String),
    #[error("golden-section search found no feasible evaluation")]
    NoFeasibleEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub lmi: LmiOptions,
    pub tol_rel: f64,
    pub probe_start: f64,
    pub probe_max: f64,
    /// Golden-section stops once the bracket is below `golden_tol · δ_max`.
    pub golden_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { lmi: LmiOptions::default(), tol_rel: 1e-3, probe_start: 1e-3, probe_max: 1e3, golden_tol: 1e-3 }
    }
}

/// Everything that does not depend on `δ`: steady state, shift, filter and
/// extended system.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub spec: MultiplierSpec,
    pub lp: ShiftedLoop,
    pub psi: FilterRealization,
    pub ext: ExtendedSystem,
    pub lmi: LmiOptions,
}

/// One `δ` worth of assembled data.
#[derive(Debug, Clone)]
pub struct Stage {
    pub delta: f64,
    pub d1: DVector<f64>,
    pub boxes: BoxBounds,
    pub bounds: SectorSlopeBounds,
    pub program: CertificateProgram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    /// `E = {x : (x − center)ᵀ X_x (x − center) ≤ 1}`.
    pub shape: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub status: SolverStatus,
    pub max_residual: f64,
    pub solve_time_s: f64,
    pub iterations: usize,
    /// Digest of the model the certificate was computed for.
    #[serde(default)]
    pub model_hash: String,
    pub verification: VerificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub delta: f64,
    pub d1: Vec<f64>,
    #[serde(rename = "trace_Xx")]
    pub trace_xx: f64,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "X_x")]
    pub x_x: Vec<Vec<f64>>,
    pub multiplier: MultiplierSpec,
    /// Block name to matrix; always contains `"P"`.
    #[serde(rename = "P")]
    pub p: BTreeMap<String, Vec<Vec<f64>>>,
    /// Raw multiplier parameters in builder order.
    pub multiplier_vars: Vec<f64>,
    pub x_star: Vec<f64>,
    pub ellipsoid: Ellipsoid,
    pub provenance: Provenance,
}

impl Certificate {
    pub fn x_matrix(&self) -> Result<DMatrix<f64>, RoaError> {
        matrix_from_rows(&self.x, "X").map_err(|e| RoaError::Certificate(e.to_string()))
    }

    pub fn x_x_matrix(&self) -> Result<DMatrix<f64>, RoaError> {
        matrix_from_rows(&self.x_x, "X_x").map_err(|e| RoaError::Certificate(e.to_string()))
    }

    pub fn p_matrix(&self) -> Result<DMatrix<f64>, RoaError> {
        let rows = self.p.get("P").ok_or_else(|| RoaError::Certificate("missing P".into()))?;
        matrix_from_rows(rows, "P").map_err(|e| RoaError::Certificate(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RoaError> {
        serde_json::from_str(text).map_err(|e| RoaError::Certificate(e.to_string()))
    }
}

impl Pipeline {
    pub fn new(model: &LoopModel, spec: &MultiplierSpec, lmi: LmiOptions) -> Result<Self, RoaError> {
        let ss = model.find_steady_state(None)?;
        let lp = model.shift(&ss);
        spec.check_admissible(&lp)?;
        let psi = realize(spec, lp.neurons());
        let ext = extend_plant(&lp, &psi);
        Ok(Pipeline { spec: spec.clone(), lp, psi, ext, lmi })
    }

    pub fn d1(&self, delta: f64) -> DVector<f64> {
        DVector::from_element(self.lp.first_layer_width(), delta)
    }

    pub fn stage(&self, delta: f64, mode: SolveMode) -> Result<Stage, RoaError> {
        let d1 = self.d1(delta);
        let boxes = propagate_boxes(&self.lp, &d1);
        let bounds = local_bounds(&self.lp, &boxes);
        let mult = build_multiplier(&self.spec, &self.lp, &bounds)?;
        let mut program = assemble_stability_lmi(&self.ext, &mult, self.lmi);
        assemble_peak_lmi(&mut program, &self.lp.q, &d1);
        program.set_mode(mode);
        Ok(Stage { delta, d1, boxes, bounds, program })
    }

    pub fn multiplier_at(&self, delta: f64) -> Result<MultiplierSet, RoaError> {
        let boxes = propagate_boxes(&self.lp, &self.d1(delta));
        Ok(build_multiplier(&self.spec, &self.lp, &local_bounds(&self.lp, &boxes))?)
    }

    fn verify_values(
        &self,
        d1: &DVector<f64>,
        x: &DMatrix<f64>,
        p: &DMatrix<f64>,
        mult: &MultiplierSet,
        vars: &DVector<f64>,
    ) -> VerificationReport {
        verify_certificate(&self.ext, &self.lp.q, d1, x, p, Some((mult, vars)), self.lmi)
    }

    /// Solves at `δ`; returns a verified certificate or why it failed.
    pub fn certify_at(&self, delta: f64, mode: SolveMode, backend: &dyn SdpBackend) -> Result<Certificate, RoaError> {
        let stage = self.stage(delta, mode)?;
        let report = backend.solve(&stage.program.problem);
        self.certificate_from(&stage, &report)
    }

    fn certificate_from(&self, stage: &Stage, report: &SolverReport) -> Result<Certificate, RoaError> {
        if !report.is_success() {
            return Err(RoaError::Infeasible { delta: stage.delta, detail: report.detail.clone() });
        }
        let prog = &stage.program;
        let x = prog.x_value(&report.x);
        let vars = prog.multiplier_vars(&report.x);
        let valuation = prog.multiplier.valuation(&vars);
        let verification = self.verify_values(&stage.d1, &x, &valuation.p, &prog.multiplier, &vars);
        if !verification.valid {
            return Err(RoaError::VerificationFailed { delta: stage.delta, detail: verification.violations.join("; ") });
        }
        let nx = prog.nx;
        let x_x = x.view((0, 0), (nx, nx)).into_owned();
        let mut p = BTreeMap::new();
        p.insert("P".to_string(), matrix_to_rows(&valuation.p));
        for (name, m) in &valuation.components {
            p.insert(name.clone(), matrix_to_rows(m));
        }
        let x_star: Vec<f64> = self.lp.shift.x_star.iter().copied().collect();
        Ok(Certificate {
            delta: stage.delta,
            d1: stage.d1.iter().copied().collect(),
            trace_xx: x_x.trace(),
            x: matrix_to_rows(&x),
            x_x: matrix_to_rows(&x_x),
            multiplier: self.spec.clone(),
            p,
            multiplier_vars: vars.iter().copied().collect(),
            x_star: x_star.clone(),
            ellipsoid: Ellipsoid { center: x_star, shape: matrix_to_rows(&x_x) },
            provenance: Provenance {
                backend: report.backend.clone(),
                status: report.status,
                max_residual: report.max_residual,
                solve_time_s: report.solve_time_s,
                iterations: report.iterations,
                model_hash: model_fingerprint(&self.lp.model),
                verification,
            },
        })
    }

    /// Re-verifies a stored certificate against this model, independent of
    /// any solver output.
    pub fn verify(&self, cert: &Certificate) -> Result<VerificationReport, RoaError> {
        if !cert.provenance.model_hash.is_empty() && cert.provenance.model_hash != model_fingerprint(&self.lp.model) {
            return Err(RoaError::Certificate("certificate was produced for a different model".into()));
        }
        if cert.multiplier != self.spec {
            return Err(RoaError::Certificate("certificate was produced for a different multiplier".into()));
        }
        let d1 = DVector::from_column_slice(&cert.d1);
        if d1.len() != self.lp.first_layer_width() {
            return Err(RoaError::Certificate("d1 does not match the first layer width".into()));
        }
        let x = cert.x_matrix()?;
        if x.nrows() != self.ext.n_eta() || x.ncols() != self.ext.n_eta() {
            return Err(RoaError::Certificate(format!("X must be {0}x{0}", self.ext.n_eta())));
        }
        let p = cert.p_matrix()?;
        if p.nrows() != self.ext.n_r() || p.ncols() != self.ext.n_r() {
            return Err(RoaError::Certificate(format!("P must be {0}x{0}", self.ext.n_r())));
        }
        let mult = self.multiplier_at(cert.delta)?;
        if cert.multiplier_vars.len() != mult.program.n_vars() {
            return Err(RoaError::Certificate("multiplier parameter count mismatch".into()));
        }
        let vars = DVector::from_column_slice(&cert.multiplier_vars);
        let mut report = self.verify_values(&d1, &x, &p, &mult, &vars);
        let x_x = x.view((0, 0), (self.ext.nx, self.ext.nx)).into_owned();
        let stored = cert.x_x_matrix()?;
        if (&stored - &x_x).amax() > 0.0 || (cert.trace_xx - x_x.trace()).abs() > 1e-12 * (1.0 + x_x.trace().abs()) {
            report.violations.push("stored X_x or trace does not match X".into());
            report.valid = false;
        }
        Ok(report)
    }

    pub fn is_feasible(&self, delta: f64, backend: &dyn SdpBackend) -> bool {
        match self.certify_at(delta, SolveMode::Feasibility, backend) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("delta {delta:e}: {e}");
                false
            }
        }
    }

    pub fn find_delta_max(&self, opts: &SearchOptions, backend: &dyn SdpBackend) -> Result<DeltaMax, RoaError> {
        let res = bisect_max(|d| self.is_feasible(d, backend), opts.probe_start, opts.probe_max, opts.tol_rel);
        res.ok_or(RoaError::NotCertifiable(opts.probe_start))
    }

    /// Re-tests feasibility at `k` random `δ < δ_max`.
    pub fn spot_check_monotonicity(&self, delta_max: f64, k: usize, seed: u64, backend: &dyn SdpBackend) -> Vec<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let d = delta_max * rng.random_range(0.05..1.0);
                (d, self.is_feasible(d, backend))
            })
            .collect()
    }

    /// Evaluates `trace(X_x)` at `δ` (`+∞` when infeasible).
    pub fn trace_at(&self, delta: f64, backend: &dyn SdpBackend) -> (f64, Option<Certificate>) {
        match self.certify_at(delta, SolveMode::MinimizeTrace, backend) {
            Ok(c) => (c.trace_xx, Some(c)),
            Err(e) => {
                log::debug!("delta {delta:e}: {e}");
                (f64::INFINITY, None)
            }
        }
    }

    pub fn minimize_trace_over_delta(
        &self,
        delta_max: f64,
        opts: &SearchOptions,
        backend: &dyn SdpBackend,
    ) -> Result<(Certificate, SweepRecord), RoaError> {
        let mut best: Option<Certificate> = None;
        let mut record = SweepRecord::default();
        let lo = delta_max * opts.golden_tol;
        golden_section(
            |d| {
                let (t, cert) = self.trace_at(d, backend);
                record.push(d, t);
                if let Some(c) = cert {
                    if best.as_ref().is_none_or(|b| c.trace_xx < b.trace_xx) {
                        best = Some(c);
                    }
                }
                t
            },
            lo,
            delta_max,
            opts.golden_tol * delta_max,
        );
        best.map(|b| (b, record)).ok_or(RoaError::NoFeasibleEvaluation)
    }

    /// Grid evaluation without golden-section.
    pub fn sweep(&self, deltas: &[f64], backend: &dyn SdpBackend) -> (SweepRecord, Option<Certificate>) {
        let mut record = SweepRecord::default();
        let mut best: Option<Certificate> = None;
        for &d in deltas {
            let (t, cert) = self.trace_at(d, backend);
            record.push(d, t);
            if let Some(c) = cert {
                if best.as_ref().is_none_or(|b| c.trace_xx < b.trace_xx) {
                    best = Some(c);
                }
            }
        }
        (record, best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMax {
    pub delta_max: f64,
    /// Smallest probed `δ` found infeasible, if any.
    pub infeasible_above: Option<f64>,
    /// Feasible all the way to the probe limit.
    pub capped: bool,
    pub probes: Vec<(f64, bool)>,
}

/// Largest `δ` with `feasible(δ)`, assuming monotone feasibility: geometric
/// probing from `start` (doubling up to `max`), then geometric bisection until
/// `hi ≤ lo · (1 + tol_rel)`. `None` if `start` is infeasible.
pub fn bisect_max(mut feasible: impl FnMut(f64) -> bool, start: f64, max: f64, tol_rel: f64) -> Option<DeltaMax> {
    let mut probes = Vec::new();
    let mut test = |d: f64, probes: &mut Vec<(f64, bool)>| {
        let ok = feasible(d);
        probes.push((d, ok));
        ok
    };
    if !test(start, &mut probes) {
        return None;
    }
    let mut lo = start;
    let mut hi = None;
    while lo < max {
        let next = (lo * 2.0).min(max);
        if test(next, &mut probes) {
            lo = next;
        } else {
            hi = Some(next);
            break;
        }
    }
    let Some(mut h) = hi else {
        return Some(DeltaMax { delta_max: lo, infeasible_above: None, capped: true, probes });
    };
    while h > lo * (1.0 + tol_rel) {
        let mid = (lo * h).sqrt();
        if test(mid, &mut probes) {
            lo = mid;
        } else {
            h = mid;
        }
    }
    Some(DeltaMax { delta_max: lo, infeasible_above: Some(h), capped: false, probes })
}

/// Golden-section minimization of `f` on `[a, b]` until the bracket is
/// narrower than `tol`. Returns the best evaluated point and value.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while b - a > tol {
        // Ties (e.g. both infeasible) shrink toward the smaller δ.
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// `(δ, trace)` sorted by `δ`; infeasible points carry `+∞`.
    pub points: Vec<(f64, f64)>,
}

impl SweepRecord {
    pub fn push(&mut self, delta: f64, trace: f64) {
        match self.points.binary_search_by(|p| p.0.total_cmp(&delta)) {
            Ok(i) => self.points[i].1 = self.points[i].1.min(trace),
            Err(i) => self.points.insert(i, (delta, trace)),
        }
    }

    pub fn min(&self) -> Option<(f64, f64)> {
        self.points.iter().copied().filter(|p| p.1.is_finite()).min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,status,trace\n");
        for &(d, t) in &self.points {
            if t.is_finite() {
                out.push_str(&format!("{d:.10e},feasible,{t:.10e}\n"));
            } else {
                out.push_str(&format!("{d:.10e},infeasible,inf\n"));
            }
        }
        out
    }
}
