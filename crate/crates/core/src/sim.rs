//! Closed-loop simulation, Monte-Carlo validation of certificates and
//! empirical checks of the hard IQCs behind each multiplier class.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::SectorSlopeBounds;
use crate::filters::FilterRealization;
use crate::model::ShiftedLoop;
use crate::multipliers::MultiplierSet;
use crate::roa::{Certificate, Pipeline, RoaError};
use crate::sdp::expr::LinExpr;
use crate::sdp::{SdpBackend, SolverStatus};

pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const DIVERGENCE_NORM: f64 = 1e12;
/// Relative slack on `|Q_j x̃_k| ≤ d_j` for round-off on the ellipsoid boundary.
pub const PEAK_REL_TOL: f64 = 1e-9;
pub const DISSIPATION_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub converged: bool,
    pub divergent: bool,
}

/// Exact recursion `x_{k+1} = A x_k + B NN(C x_k)` for `steps` steps.
pub fn simulate(lp: &ShiftedLoop, x0: &DVector<f64>, steps: usize) -> Trajectory {
    let model = &lp.model;
    let mut states = Vec::with_capacity(steps + 1);
    let (mut v, mut w, mut u) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut x = x0.clone();
    let mut divergent = false;
    states.push(x.clone());
    for _ in 0..steps {
        let f = model.nn.forward(&(&model.plant.c * &x));
        x = &model.plant.a * &x + &model.plant.b * &f.u;
        v.push(f.v);
        w.push(f.w);
        u.push(f.u);
        states.push(x.clone());
        if !x.iter().all(|t| t.is_finite()) || x.norm() > DIVERGENCE_NORM {
            divergent = true;
            break;
        }
    }
    let converged = !divergent && (&x - &lp.shift.x_star).amax() <= CONVERGENCE_TOL;
    Trajectory { states, v, w, u, converged, divergent }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub steps: usize,
    pub divergent: usize,
    pub not_converged: usize,
    pub peak_violations: usize,
    /// Largest `|Q_j x̃_k| / d_j` seen.
    pub max_peak_ratio: f64,
    pub dissipation_checked: usize,
    /// Largest `(ΔV + rᵀPr) / (1 + ‖η‖²)`.
    pub max_dissipation_residual: f64,
    pub pass: bool,
}

/// Points of `E = {x : (x − x*)ᵀ X_x (x − x*) ≤ 1}`; even indices on the
/// boundary, odd indices uniform in the interior.
pub fn sample_ellipsoid(x_x: &DMatrix<f64>, center: &DVector<f64>, count: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let n = center.len();
    (0..count)
        .map(|i| {
            let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let q = z.dot(&(x_x * &z));
            let mut r = 1.0 / q.sqrt();
            if i % 2 == 1 {
                r *= rng.random::<f64>().powf(1.0 / n as f64);
            }
            center + z * r
        })
        .collect()
}

struct SampleOutcome {
    divergent: bool,
    converged: bool,
    peak_violations: usize,
    max_peak_ratio: f64,
    max_dissipation: Option<f64>,
}

fn check_sample(
    pipe: &Pipeline,
    x_full: &DMatrix<f64>,
    p: &DMatrix<f64>,
    d1: &DVector<f64>,
    x0: &DVector<f64>,
    steps: usize,
    dissipation: bool,
) -> SampleOutcome {
    let lp = &pipe.lp;
    let traj = simulate(lp, x0, steps);
    let ss = &lp.shift;
    let (nx, nxi) = (pipe.ext.nx, pipe.ext.n_xi);
    let psi: &FilterRealization = &pipe.psi;
    let n = lp.neurons();
    let mut peak_violations = 0;
    let mut max_peak_ratio: f64 = 0.0;
    for x in &traj.states {
        let xt = x - &ss.x_star;
        let qx = &lp.q * &xt;
        for j in 0..d1.len() {
            let ratio = qx[j].abs() / d1[j];
            max_peak_ratio = max_peak_ratio.max(ratio);
            if ratio > 1.0 + PEAK_REL_TOL {
                peak_violations += 1;
            }
        }
    }
    let max_dissipation = dissipation.then(|| {
        let mut xi = DVector::zeros(nxi);
        let mut eta = DVector::zeros(nx + nxi);
        let mut input = DVector::zeros(2 * n);
        let mut worst = f64::NEG_INFINITY;
        for k in 0..traj.v.len() {
            eta.rows_mut(0, nx).copy_from(&(&traj.states[k] - &ss.x_star));
            eta.rows_mut(nx, nxi).copy_from(&xi);
            input.rows_mut(0, n).copy_from(&(&traj.v[k] - &ss.v_star));
            input.rows_mut(n, n).copy_from(&(&traj.w[k] - &ss.w_star));
            let r = &psi.c * &xi + &psi.d * &input;
            xi = &psi.a * &xi + &psi.b * &input;
            let mut next = DVector::zeros(nx + nxi);
            next.rows_mut(0, nx).copy_from(&(&traj.states[k + 1] - &ss.x_star));
            next.rows_mut(nx, nxi).copy_from(&xi);
            let dv = next.dot(&(x_full * &next)) - eta.dot(&(x_full * &eta));
            let res = (dv + r.dot(&(p * &r))) / (1.0 + eta.norm_squared());
            worst = worst.max(res);
        }
        worst
    });
    SampleOutcome {
        divergent: traj.divergent,
        converged: traj.converged,
        peak_violations,
        max_peak_ratio,
        max_dissipation,
    }
}

/// Samples `E(X_x, x*)` and checks convergence, the activation peak bound and
/// (on the first `dissipation_samples` trajectories) the dissipation
/// inequality along `η` with `ξ_0 = 0`.
pub fn validate_certificate(
    pipe: &Pipeline,
    cert: &Certificate,
    samples: usize,
    steps: usize,
    dissipation_samples: usize,
    seed: u64,
) -> Result<ValidationReport, RoaError> {
    let x_full = cert.x_matrix()?;
    let x_x = cert.x_x_matrix()?;
    let p = cert.p_matrix()?;
    let d1 = DVector::from_column_slice(&cert.d1);
    if x_full.nrows() != pipe.ext.n_eta() || p.nrows() != pipe.ext.n_r() || d1.len() != pipe.lp.first_layer_width() {
        return Err(RoaError::Certificate("certificate dimensions do not match the model and multiplier".into()));
    }
    let center = DVector::from_column_slice(&cert.ellipsoid.center);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = sample_ellipsoid(&x_x, &center, samples, &mut rng);
    let outcomes: Vec<SampleOutcome> = points
        .par_iter()
        .enumerate()
        .map(|(i, x0)| check_sample(pipe, &x_full, &p, &d1, x0, steps, i < dissipation_samples))
        .collect();
    let mut report = ValidationReport {
        samples,
        steps,
        divergent: 0,
        not_converged: 0,
        peak_violations: 0,
        max_peak_ratio: 0.0,
        dissipation_checked: 0,
        max_dissipation_residual: f64::NEG_INFINITY,
        pass: false,
    };
    for o in outcomes {
        report.divergent += usize::from(o.divergent);
        report.not_converged += usize::from(!o.divergent && !o.converged);
        report.peak_violations += o.peak_violations;
        report.max_peak_ratio = report.max_peak_ratio.max(o.max_peak_ratio);
        if let Some(d) = o.max_dissipation {
            report.dissipation_checked += 1;
            report.max_dissipation_residual = report.max_dissipation_residual.max(d);
        }
    }
    report.pass = report.divergent == 0
        && report.not_converged == 0
        && report.peak_violations == 0
        && report.max_dissipation_residual <= DISSIPATION_TOL;
    Ok(report)
}

/// Monotone piecewise-linear scalar map with `f(0) = 0` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    pub step: f64,
    /// Slopes on `[k·step, (k+1)·step]` for `k ≥ 0`, then for the mirror side.
    pub right: Vec<f64>,
    pub left: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn eval(&self, t: f64) -> f64 {
        let (slopes, s) = if t >= 0.0 { (&self.right, 1.0) } else { (&self.left, -1.0) };
        let mut rem = t.abs();
        let mut acc = 0.0;
        for &k in slopes {
            let h = rem.min(self.step);
            acc += k * h;
            rem -= h;
            if rem <= 0.0 {
                break;
            }
        }
        acc += rem.max(0.0) * slopes.last().copied().unwrap_or(0.0);
        s * acc
    }
}

/// Slopes in `[lo, hi]` from sorted non-negative noise rescaled so both
/// extremes are attained.
fn noisy_slopes(lo: f64, hi: f64, count: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut cum = Vec::with_capacity(count);
    let mut acc = 0.0;
    for _ in 0..count {
        acc += rng.random::<f64>();
        cum.push(acc);
    }
    let (min, max) = (cum[0], cum[count - 1]);
    let mut slopes: Vec<f64> = cum
        .iter()
        .map(|&c| if max > min { lo + (hi - lo) * (c - min) / (max - min) } else { lo })
        .collect();
    // random order so that both extremes appear anywhere along the axis
    for i in (1..slopes.len()).rev() {
        let j = rng.random_range(0..=i);
        slopes.swap(i, j);
    }
    slopes
}

/// Random nonlinearity with sector in `[α, β]` and slopes in `[μ, ν]`
/// (slopes drawn from the intersection so both hold), optionally odd.
pub fn random_nonlinearity(alpha: f64, beta: f64, mu: f64, nu: f64, odd: bool, reach: f64, rng: &mut impl Rng) -> PiecewiseLinear {
    let lo = alpha.max(mu);
    let hi = beta.min(nu).max(lo);
    let pieces = 16;
    let step = reach / pieces as f64;
    let right = noisy_slopes(lo, hi, pieces, rng);
    let left = if odd { right.clone() } else { noisy_slopes(lo, hi, pieces, rng) };
    PiecewiseLinear { step, right, left }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqcStats {
    /// `min_N Σ_{k≤N} r_kᵀ P r_k` over all trials.
    pub min_partial_sum: f64,
    /// Same, divided by the trial's signal energy `Σ ‖ṽ_k‖² + ‖w̃_k‖²`.
    pub min_normalized: f64,
}

/// How the test signals relate `w̃` to `ṽ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalMode {
    /// Admissible random nonlinearities shared within each group.
    Admissible { odd: bool },
    /// `w̃ = gain · ṽ` per neuron, for negative controls.
    Linear { gain: f64 },
}

/// Empirical partial sums of `r_kᵀ P r_k` along random admissible signals.
#[allow(clippy::too_many_arguments)]
pub fn empirical_hard_iqc(
    p: &DMatrix<f64>,
    psi: &FilterRealization,
    bounds: &SectorSlopeBounds,
    groups: &[Range<usize>],
    mode: SignalMode,
    trials: usize,
    len: usize,
    rng: &mut impl Rng,
) -> IqcStats {
    let n = psi.n;
    let reach = 2.0;
    let mut stats = IqcStats { min_partial_sum: f64::INFINITY, min_normalized: f64::INFINITY };
    for _ in 0..trials {
        let mut maps: Vec<Option<PiecewiseLinear>> = vec![None; n];
        if let SignalMode::Admissible { odd } = mode {
            for g in groups {
                let j0 = g.start;
                let f = random_nonlinearity(bounds.alpha[j0], bounds.beta[j0], bounds.mu[j0], bounds.nu[j0], odd, reach, rng);
                for j in g.clone() {
                    maps[j] = Some(f.clone());
                }
            }
        }
        let amp: f64 = rng.random_range(0.1..reach);
        let v: Vec<DVector<f64>> = (0..len)
            .map(|_| DVector::from_iterator(n, (0..n).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0))))
            .collect();
        let w: Vec<DVector<f64>> = v
            .iter()
            .map(|vk| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|j| match (&mode, &maps[j]) {
                        (SignalMode::Linear { gain }, _) => gain * vk[j],
                        (_, Some(f)) => f.eval(vk[j]),
                        (_, None) => bounds.alpha[j] * vk[j],
                    }),
                )
            })
            .collect();
        let r = psi.simulate(&v, &w);
        let energy: f64 = v.iter().zip(&w).map(|(a, b)| a.norm_squared() + b.norm_squared()).sum();
        let mut acc = 0.0;
        for rk in &r {
            acc += rk.dot(&(p * rk));
            stats.min_partial_sum = stats.min_partial_sum.min(acc);
            stats.min_normalized = stats.min_normalized.min(acc / energy.max(f64::MIN_POSITIVE));
        }
    }
    stats
}

/// Random point of a multiplier class: maximizes a random linear functional
/// over the class intersected with the box `|x_i| ≤ 1`.
pub fn sample_feasible_multiplier(
    set: &MultiplierSet,
    backend: &dyn SdpBackend,
    rng: &mut impl Rng,
) -> Option<DVector<f64>> {
    let mut prob = set.program.clone();
    let m = prob.n_vars();
    for v in 0..m {
        let mut up = LinExpr { constant: 1.0, ..LinExpr::default() };
        up.add(v, -1.0);
        prob.add_nonneg(format!("x{v} <= 1"), up);
        let mut dn = LinExpr { constant: 1.0, ..LinExpr::default() };
        dn.add(v, 1.0);
        prob.add_nonneg(format!("x{v} >= -1"), dn);
    }
    let mut obj = LinExpr::default();
    for v in 0..m {
        obj.add(v, rng.sample::<f64, _>(StandardNormal));
    }
    prob.objective = obj;
    let rep = backend.solve(&prob);
    matches!(rep.status, SolverStatus::Optimal | SolverStatus::Feasible).then_some(rep.x)
}

/// Boundary of the projection of `E(X_x, x*)` onto states `(i, j)` as CSV.
pub fn ellipse_csv(x_x: &DMatrix<f64>, center: &DVector<f64>, i: usize, j: usize, points: usize) -> Option<String> {
    let inv = x_x.clone().try_inverse()?;
    let s = DMatrix::from_row_slice(2, 2, &[inv[(i, i)], inv[(i, j)], inv[(j, i)], inv[(j, j)]]);
    let l = s.cholesky()?.l();
    let mut out = format!("x{i},x{j}\n");
    for k in 0..=points {
        let th = 2.0 * std::f64::consts::PI * k as f64 / points as f64;
        let p = &l * DVector::from_vec(vec![th.cos(), th.sin()]);
        out.push_str(&format!("{:.10e},{:.10e}\n", center[i] + p[0], center[j] + p[1]));
    }
    Some(out)
}
