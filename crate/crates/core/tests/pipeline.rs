mod common;

use common::{class_set, fixture, tanh_like_bounds};
use iqcroa::filters::{extend_plant, realize};
use iqcroa::model::{parse_model, LoopModel};
use iqcroa::multipliers::*;
use iqcroa::roa::{Certificate, Pipeline, RoaError, SearchOptions};
use iqcroa::sdp::sdpa::to_sdpa_string;
use iqcroa::sdp::{backend_by_name, verify_certificate, IpmBackend, LmiOptions, SolveMode};
use iqcroa::sim::{
    empirical_hard_iqc, sample_feasible_multiplier, simulate, validate_certificate, SignalMode,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::sync::OnceLock;

fn zero_network(a: [[f64; 2]; 2]) -> LoopModel {
    parse_model(
        &json!({
            "lti": { "A": a, "B": [[1.0], [0.5]], "C": [[1.0, 0.0], [0.0, 1.0]] },
            "nn": {
                "layers": [{ "W": [[0.0, 0.0], [0.0, 0.0]], "activation": "tanh" }],
                "W_out": [[0.0, 0.0]],
            },
        })
        .to_string(),
    )
    .unwrap()
}

fn pendulum(spec: MultiplierSpec) -> Pipeline {
    Pipeline::new(&fixture("pendulum"), &spec, LmiOptions::default()).unwrap()
}

/// Pendulum diag-C certificate at δ = 0.1, shared by several tests.
fn pendulum_cert() -> &'static (Pipeline, Certificate) {
    static CELL: OnceLock<(Pipeline, Certificate)> = OnceLock::new();
    CELL.get_or_init(|| {
        let pipe = pendulum(MultiplierSpec::diag_circle());
        let cert = pipe.certify_at(0.1, SolveMode::MinimizeTrace, &IpmBackend::default()).unwrap();
        (pipe, cert)
    })
}

#[test]
fn pendulum_fixture_shape() {
    let m = fixture("pendulum");
    assert_eq!(m.plant.nx(), 2);
    assert_eq!(m.nn.widths(), vec![5, 5]);
    assert!(m.nn.is_bias_free());
    let ss = m.find_steady_state(None).unwrap();
    assert!(ss.x_star.amax() < 1e-12 && ss.residual < 1e-12);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.02, 0.3924, 0.73333]);
    assert!((&m.plant.a - a).amax() < 1e-12);
}

#[test]
fn biased_fixture_has_nonzero_steady_state() {
    let m = fixture("biased_tanh");
    assert!(!m.nn.is_bias_free());
    let ss = m.find_steady_state(None).unwrap();
    assert!(ss.x_star.amax() > 1e-4);
    let f = m.nn.forward(&(&m.plant.c * &ss.x_star));
    assert!((f.u - &ss.u_star).amax() < 1e-10);
}

#[test]
fn stable_plant_with_zero_network_is_certifiable_and_trace_does_not_grow() {
    let m = zero_network([[0.5, 0.1], [0.0, 0.7]]);
    let pipe = Pipeline::new(&m, &MultiplierSpec::diag_circle(), LmiOptions::default()).unwrap();
    let be = IpmBackend::default();
    let traces: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&d| pipe.certify_at(d, SolveMode::MinimizeTrace, &be).unwrap().trace_xx)
        .collect();
    for w in traces.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-9, "{traces:?}");
    }
    let dm = pipe.find_delta_max(&SearchOptions::default(), &be).unwrap();
    assert!(dm.capped && dm.infeasible_above.is_none());
}

#[test]
fn unstable_plant_with_zero_network_is_infeasible() {
    let m = zero_network([[1.1, 0.0], [0.0, 0.5]]);
    let pipe = Pipeline::new(&m, &MultiplierSpec::diag_circle(), LmiOptions::default()).unwrap();
    let res = pipe.certify_at(0.5, SolveMode::Feasibility, &IpmBackend::default());
    assert!(matches!(res, Err(RoaError::Infeasible { .. } | RoaError::VerificationFailed { .. })), "{res:?}");
}

#[test]
fn pendulum_certificate_is_valid_and_round_trips() {
    let (pipe, cert) = pendulum_cert();
    assert!(cert.trace_xx.is_finite() && cert.trace_xx > 0.0);
    let rep = pipe.verify(cert).unwrap();
    assert!(rep.valid, "{:?}", rep.violations);
    assert!(rep.stability_margin >= pipe.lmi.eps_lmi - 1e-8);
    let text = cert.to_json();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["delta", "d1", "trace_Xx", "X", "multiplier", "P", "x_star", "provenance"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    let back = Certificate::from_json(&text).unwrap();
    assert!(pipe.verify(&back).unwrap().valid);
    assert_eq!(back.x, cert.x);
}

#[test]
fn off_diagonal_corruption_is_rejected_with_named_constraint() {
    let (pipe, cert) = pendulum_cert();
    let mut bad = cert.clone();
    bad.x[0][1] += 0.1;
    bad.x[1][0] += 0.1;
    bad.x_x[0][1] += 0.1;
    bad.x_x[1][0] += 0.1;
    let rep = pipe.verify(&bad).unwrap();
    assert!(!rep.valid);
    assert!(
        rep.violations.iter().any(|v| v.starts_with("stability LMI") || v.starts_with("peak bound")),
        "{:?}",
        rep.violations
    );
}

#[test]
fn wrong_multiplier_parameters_are_rejected() {
    let (pipe, cert) = pendulum_cert();
    let mut bad = cert.clone();
    bad.multiplier_vars[0] = -1.0;
    assert!(!pipe.verify(&bad).unwrap().valid);
    let other = pendulum(MultiplierSpec::combined(1, 1, ZfStructure::Diag, CirclePart::Diag));
    assert!(other.verify(cert).is_err());
}

#[test]
fn larger_peak_bound_only_increases_margins() {
    let (pipe, cert) = pendulum_cert();
    let x = cert.x_matrix().unwrap();
    let p = cert.p_matrix().unwrap();
    let d1 = DVector::from_column_slice(&cert.d1);
    let base = verify_certificate(&pipe.ext, &pipe.lp.q, &d1, &x, &p, None, pipe.lmi);
    let wide = verify_certificate(&pipe.ext, &pipe.lp.q, &(d1 * 10.0), &x, &p, None, pipe.lmi);
    for (a, b) in base.peak_margins.iter().zip(&wide.peak_margins) {
        assert!(b >= a);
    }
}

#[test]
fn far_beyond_delta_max_is_infeasible() {
    let pipe = pendulum(MultiplierSpec::diag_circle());
    let be = IpmBackend::default();
    let opts = SearchOptions { tol_rel: 1e-2, ..SearchOptions::default() };
    let dm = pipe.find_delta_max(&opts, &be).unwrap();
    assert!(!dm.capped);
    assert!(!pipe.is_feasible(10.0 * dm.delta_max, &be));
    assert!(pipe.is_feasible(0.5 * dm.delta_max, &be));
    for (d, ok) in pipe.spot_check_monotonicity(dm.delta_max, 3, 5, &be) {
        assert!(ok, "infeasible at {d} below delta_max");
    }
}

#[test]
fn combined_class_never_does_worse_than_its_circle_part() {
    let be = IpmBackend::default();
    let (_, c) = pendulum_cert();
    let comb = pendulum(MultiplierSpec::combined(1, 1, ZfStructure::Diag, CirclePart::Diag))
        .certify_at(0.1, SolveMode::MinimizeTrace, &be)
        .unwrap();
    assert!(comb.trace_xx <= c.trace_xx * (1.0 + 1e-4) + 1e-4);
}

#[test]
fn sweep_grid_is_sorted_and_marks_infeasible_points() {
    let pipe = pendulum(MultiplierSpec::diag_circle());
    let (record, best) = pipe.sweep(&[0.2, 0.05, 100.0], &IpmBackend::default());
    let csv = record.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "delta,status,trace");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].contains("infeasible"));
    let ds: Vec<f64> = record.points.iter().map(|p| p.0).collect();
    assert!(ds.windows(2).all(|w| w[0] < w[1]));
    assert!(best.is_some());
}

#[test]
fn sdpa_export_layout() {
    let pipe = pendulum(MultiplierSpec::diag_circle());
    let stage = pipe.stage(0.1, SolveMode::MinimizeTrace).unwrap();
    let text = to_sdpa_string(&stage.program.problem);
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('"') && !l.starts_with('*')).collect();
    let m: usize = body[0].trim().parse().unwrap();
    assert_eq!(m, stage.program.problem.n_vars());
    let nblocks: usize = body[1].trim().parse().unwrap();
    let sizes: Vec<i64> = body[2].split_whitespace().map(|s| s.trim_matches(|c| c == ',' || c == '{' || c == '}').parse().unwrap()).collect();
    assert_eq!(sizes.len(), nblocks);
    assert_eq!(body[3].split_whitespace().count(), m);
    // the LMI blocks: stability, X ≻ 0, one peak bound per first-layer neuron
    assert!(sizes.iter().filter(|s| **s > 0).count() >= 2 + stage.d1.len());
}

#[test]
fn unknown_backend_is_an_error() {
    assert!(backend_by_name("ipm").is_ok());
    assert!(backend_by_name("").is_ok());
    assert!(backend_by_name("mosek-please").is_err());
}

#[test]
fn repeated_structures_need_a_bias_free_network() {
    let biased = fixture("biased_tanh");
    for s in [ZfStructure::LayerBlock, ZfStructure::Full] {
        let spec = MultiplierSpec::combined(1, 1, s, CirclePart::Diag);
        let Err(err) = Pipeline::new(&biased, &spec, LmiOptions::default()) else { panic!("must be rejected") };
        assert!(err.to_string().contains("bias"), "{err}");
    }
    let odd = MultiplierSpec::zames_falb(1, 1, ZfStructure::Diag).with_odd(true);
    assert!(Pipeline::new(&biased, &odd, LmiOptions::default()).is_err());
    assert!(Pipeline::new(&fixture("pendulum"), &odd, LmiOptions::default()).is_ok());
}

#[test]
fn too_many_vertices_suggests_diag_circle() {
    let spec = MultiplierSpec::circle_yakubovich();
    let res = Pipeline::new(&fixture("pendulum"), &spec, LmiOptions::default())
        .and_then(|p| p.stage(0.1, SolveMode::MinimizeTrace).map(|_| ()));
    let Err(err) = res else { panic!("2^20 vertices exceed the default cap") };
    assert!(err.to_string().contains("diag-c"), "{err}");
}

#[test]
fn extended_system_matches_co_simulation() {
    let pipe = pendulum(MultiplierSpec::combined(1, 1, ZfStructure::Diag, CirclePart::CircleYakubovich));
    let lp = &pipe.lp;
    assert_eq!(pipe.ext.n_eta(), 2 + 2 * 10);
    let traj = simulate(lp, &DVector::from_vec(vec![0.3, -0.4]), 40);
    let w: Vec<DVector<f64>> = traj.states[..40].iter().map(|x| lp.forward_shifted(x).w).collect();
    let v: Vec<DVector<f64>> = traj.states[..40].iter().map(|x| lp.forward_shifted(x).v).collect();
    let r_sep = pipe.psi.simulate(&v, &w);
    let ext = extend_plant(lp, &pipe.psi);
    let mut eta = DVector::zeros(ext.n_eta());
    eta.rows_mut(0, 2).copy_from(&traj.states[0]);
    for k in 0..40 {
        let r = &ext.c * &eta + &ext.d * &w[k];
        assert!((r - &r_sep[k]).amax() <= 1e-12);
        eta = &ext.a * &eta + &ext.b * &w[k];
        assert!((eta.rows(0, 2) - &traj.states[k + 1]).amax() <= 1e-12);
    }
}

#[test]
fn static_filter_extension_keeps_plant_matrix() {
    let pipe = pendulum(MultiplierSpec::diag_circle());
    assert_eq!(pipe.ext.n_xi, 0);
    assert_eq!(pipe.ext.a, pipe.lp.model.plant.a);
    assert_eq!(pipe.ext.c, &realize(&MultiplierSpec::diag_circle(), 10).d * &pipe.lp.r_x);
}

#[test]
fn validation_flags_an_inflated_ellipsoid() {
    let (pipe, cert) = pendulum_cert();
    let good = validate_certificate(pipe, cert, 200, 2000, 20, 3).unwrap();
    assert!(good.pass, "{good:?}");
    let mut inflated = cert.clone();
    for row in inflated.x_x.iter_mut() {
        for v in row.iter_mut() {
            *v /= 100.0;
        }
    }
    let bad = validate_certificate(pipe, &inflated, 200, 2000, 0, 3).unwrap();
    assert!(!bad.pass && bad.peak_violations > 0, "{bad:?}");
}

#[test]
fn trajectories_at_rest_and_divergent() {
    let pipe = pendulum(MultiplierSpec::diag_circle());
    let t = simulate(&pipe.lp, &DVector::zeros(2), 50);
    assert!(t.states.iter().all(|x| x.amax() == 0.0) && t.converged);
    let m = zero_network([[1.1, 0.0], [0.0, 0.5]]);
    let ss = m.find_steady_state(None).unwrap();
    let t = simulate(&m.shift(&ss), &DVector::from_vec(vec![1.0, 0.0]), 2000);
    assert!(t.divergent && !t.converged);
}

#[test]
fn full_block_multiplier_holds_inside_the_box() {
    let n = 3;
    let bounds = tanh_like_bounds(&[0.2, 0.5, 0.35], &[0.1, 0.3, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let be = IpmBackend::default();
    for spec in [MultiplierSpec::full_block_circle(), MultiplierSpec::circle_yakubovich()] {
        let set = class_set(&spec, &bounds, &[n]);
        let x = sample_feasible_multiplier(&set, &be, &mut rng).unwrap();
        let pi = set.valuation(&x).p;
        let cy = spec == MultiplierSpec::circle_yakubovich();
        let k = if cy { 2 * n } else { n };
        for _ in 0..10_000 {
            let mut lower = DMatrix::zeros(k, k);
            for j in 0..n {
                lower[(j, j)] = rng.random_range(bounds.alpha[j]..=bounds.beta[j]);
                if cy {
                    lower[(n + j, n + j)] = rng.random_range(bounds.mu[j]..=bounds.nu[j]);
                }
            }
            let mut g = DMatrix::zeros(2 * k, k);
            g.view_mut((0, 0), (k, k)).fill_with_identity();
            g.view_mut((k, 0), (k, k)).copy_from(&lower);
            let q = g.transpose() * &pi * &g;
            let e = ((&q + q.transpose()) * 0.5).symmetric_eigenvalues().min();
            assert!(e >= -1e-9 * (1.0 + pi.amax()), "{} min eig {e}", spec.label());
        }
    }
}

#[test]
fn diag_circle_summands_are_pointwise_nonnegative() {
    let n = 2;
    let bounds = tanh_like_bounds(&[0.3, 0.6], &[0.1, 0.2]);
    let set = class_set(&MultiplierSpec::diag_circle(), &bounds, &[n]);
    let x = DVector::from_vec(vec![0.7, 1.3]);
    let p = set.valuation(&x).p;
    let psi = realize(&MultiplierSpec::diag_circle(), n);
    let groups = repetition_groups(ZfStructure::Diag, &[n]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // a single step is a single summand
    let s = empirical_hard_iqc(&p, &psi, &bounds, &groups, SignalMode::Admissible { odd: false }, 500, 1, &mut rng);
    assert!(s.min_partial_sum >= -1e-12);
}

#[test]
fn zames_falb_rejects_doubled_slope_signals() {
    let n = 2;
    let bounds = tanh_like_bounds(&[0.3, 0.3], &[0.1, 0.1]);
    let spec = MultiplierSpec::zames_falb(1, 1, ZfStructure::Diag);
    let set = class_set(&spec, &bounds, &[n]);
    let psi = realize(&spec, n);
    let groups = repetition_groups(ZfStructure::Diag, &[n]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let be = IpmBackend::default();
    let mut admissible = f64::INFINITY;
    let mut control = f64::INFINITY;
    for _ in 0..20 {
        let x = sample_feasible_multiplier(&set, &be, &mut rng).unwrap();
        let p = set.valuation(&x).p;
        admissible = admissible
            .min(empirical_hard_iqc(&p, &psi, &bounds, &groups, SignalMode::Admissible { odd: false }, 100, 50, &mut rng).min_normalized);
        control = control.min(empirical_hard_iqc(&p, &psi, &bounds, &groups, SignalMode::Linear { gain: 2.0 * bounds.nu[0] }, 5, 50, &mut rng).min_partial_sum);
    }
    assert!(admissible >= -1e-8, "{admissible}");
    assert!(control < 0.0, "{control}");
}
