mod common;

use std::collections::BTreeMap;

use common::tanh_like_bounds;
use iqcroa::bounds::{local_bounds, propagate_boxes};
use iqcroa::filters::{nilpotency_index, realize};
use iqcroa::model::{parse_model, LoopModel};
use iqcroa::multipliers::*;
use iqcroa::roa::{bisect_max, golden_section};
use iqcroa::sim::random_nonlinearity;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Small random closed loop with enough contraction for a unique steady state.
fn small_loop() -> impl Strategy<Value = LoopModel> {
    (1usize..=3, 1usize..=2, prop::collection::vec(1usize..=3, 1..=3), any::<u64>(), any::<bool>()).prop_map(
        |(nx, nu, widths, seed, biased)| {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Vec<Vec<f64>> {
                (0..r).map(|_| (0..c).map(|_| rng.random_range(-s..s)).collect()).collect()
            }
            let a = mat(&mut rng, nx, nx, 0.3);
            let b = mat(&mut rng, nx, nu, 0.5);
            let c = mat(&mut rng, nx, nx, 1.0);
            let acts = ["tanh", "relu", "sigmoid"];
            let mut layers = Vec::new();
            let mut prev = nx;
            for &w in &widths {
                let weight = mat(&mut rng, w, prev, 0.8);
                let bias: Vec<f64> = mat(&mut rng, 1, w, 0.5).remove(0);
                let act = acts[rng.random_range(0..3)];
                let mut layer = json!({ "W": weight, "activation": act });
                if biased {
                    layer["b"] = json!(bias);
                }
                layers.push(layer);
                prev = w;
            }
            let w_out = mat(&mut rng, nu, prev, 0.5);
            let text = json!({
                "lti": { "A": a, "B": b, "C": c },
                "nn": { "layers": layers, "W_out": w_out, "b_out": mat(&mut rng, 1, nu, 0.3).remove(0) },
            })
            .to_string();
            parse_model(&text).expect("generated model is consistent")
        },
    )
}

fn layer_offsets(widths: &[usize]) -> Vec<usize> {
    widths.iter().scan(0, |acc, &w| {
        let o = *acc;
        *acc += w;
        Some(o)
    })
    .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steady_state_is_a_fixed_point(m in small_loop()) {
        let ss = m.find_steady_state(None).unwrap();
        let next = &m.plant.a * &ss.x_star + &m.plant.b * &ss.u_star;
        prop_assert!((next - &ss.x_star).amax() <= 1e-9);
        let f = m.nn.forward(&(&m.plant.c * &ss.x_star));
        prop_assert!((f.w - &ss.w_star).amax() == 0.0);
        prop_assert!((f.u - &ss.u_star).amax() <= 1e-12);
    }

    #[test]
    fn interconnection_matrices_reproduce_the_shifted_network(m in small_loop(), xs in prop::collection::vec(-2.0f64..2.0, 3)) {
        let ss = m.find_steady_state(None).unwrap();
        let lp = m.shift(&ss);
        let xt = DVector::from_iterator(lp.nx(), xs.into_iter().take(lp.nx()));
        let f = lp.forward_shifted(&xt);
        let n = lp.neurons();
        let stacked = &lp.r_x * &xt + &lp.r_w * &f.w;
        prop_assert!((stacked.rows(0, n) - &f.v).amax() <= 1e-12);
        prop_assert!((stacked.rows(n, n) - &f.w).amax() <= 1e-12);
        prop_assert!((&lp.r_u * &f.w - &f.u).amax() <= 1e-12);
        // against the unshifted network
        let g = m.nn.forward(&(&m.plant.c * (&ss.x_star + &xt)));
        prop_assert!((g.v - &ss.v_star - &f.v).amax() <= 1e-9);
        prop_assert!((g.u - &ss.u_star - &f.u).amax() <= 1e-9);
    }

    #[test]
    fn boxes_and_local_bounds_are_sound(m in small_loop(), d in 0.05f64..2.0, seed in any::<u64>()) {
        use rand::Rng;
        let ss = m.find_steady_state(None).unwrap();
        let lp = m.shift(&ss);
        let n1 = lp.first_layer_width();
        let d1 = DVector::from_element(n1, d);
        let boxes = propagate_boxes(&lp, &d1);
        let b = local_bounds(&lp, &boxes);
        for j in 0..lp.neurons() {
            prop_assert!(boxes.lo[j] <= 0.0 && boxes.hi[j] >= 0.0);
            prop_assert!(b.alpha[j] <= b.beta[j] && b.mu[j] <= b.nu[j]);
            for v in [b.alpha[j], b.beta[j], b.mu[j], b.nu[j]] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        for j in 0..n1 {
            prop_assert_eq!(boxes.lo[j], -d);
            prop_assert_eq!(boxes.hi[j], d);
        }
        // sampled points of the first-layer box, pushed through the network
        let offs = layer_offsets(&lp.widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tol = 1e-9;
        for _ in 0..50 {
            let mut v: DVector<f64> = DVector::from_fn(n1, |_, _| rng.random_range(-d..=d));
            let mut prev_v: DVector<f64> = DVector::from_fn(n1, |_, _| rng.random_range(-d..=d));
            for (li, layer) in lp.model.nn.layers.iter().enumerate() {
                let off = offs[li];
                if li > 0 {
                    let wv = DVector::from_fn(v.len(), |k, _| lp.phi_tilde(offs[li - 1] + k, v[k]));
                    let wp = DVector::from_fn(prev_v.len(), |k, _| lp.phi_tilde(offs[li - 1] + k, prev_v[k]));
                    v = &layer.weight * wv;
                    prev_v = &layer.weight * wp;
                }
                for k in 0..v.len() {
                    let j = off + k;
                    prop_assert!(v[k] >= boxes.lo[j] - tol && v[k] <= boxes.hi[j] + tol);
                    let (t, s) = (v[k], prev_v[k]);
                    if t.abs() > 1e-6 {
                        let ratio = lp.phi_tilde(j, t) / t;
                        prop_assert!(ratio >= b.alpha[j] - tol && ratio <= b.beta[j] + tol);
                    }
                    if (t - s).abs() > 1e-6 {
                        let slope = (lp.phi_tilde(j, t) - lp.phi_tilde(j, s)) / (t - s);
                        prop_assert!(slope >= b.mu[j] - tol && slope <= b.nu[j] + tol);
                    }
                }
            }
        }
    }

    #[test]
    fn filter_dimensions_and_nilpotency(n in 1usize..=4, lm in 0usize..=3, lp in 0usize..=3, circle in 0usize..4) {
        prop_assume!(lm + lp > 0);
        let part = [CirclePart::Diag, CirclePart::FullBlock, CirclePart::CircleYakubovich, CirclePart::None][circle];
        let spec = if part == CirclePart::None {
            MultiplierSpec::zames_falb(lm, lp, ZfStructure::Diag)
        } else {
            MultiplierSpec::combined(lm, lp, ZfStructure::Diag, part)
        };
        let psi = realize(&spec, n);
        let l = lm.max(lp);
        prop_assert_eq!(psi.n_xi(), 2 * l * n);
        prop_assert_eq!(nilpotency_index(&psi.a), Some(l));
        let circle_rows = match part {
            CirclePart::Diag | CirclePart::FullBlock => 2 * n,
            CirclePart::CircleYakubovich => 4 * n,
            CirclePart::None => 0,
        };
        prop_assert_eq!(psi.n_r(), 2 * (l + 1) * n + circle_rows);
    }

    #[test]
    fn variable_counts_follow_the_closed_forms(widths in prop::collection::vec(1usize..=4, 1..=4), lm in 0usize..=3, lp in 1usize..=3) {
        let n: usize = widths.iter().sum();
        let taps = lm + lp + 1;
        let squares: usize = widths.iter().map(|w| w * w).sum();
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::diag_circle(), &widths), n);
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::full_block_circle(), &widths), n * (2 * n + 1));
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::circle_yakubovich(), &widths), 2 * n * (4 * n + 1));
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::zames_falb(lm, lp, ZfStructure::Diag), &widths), taps * n);
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::zames_falb(lm, lp, ZfStructure::LayerBlock), &widths), taps * squares);
        prop_assert_eq!(decision_variable_count(&MultiplierSpec::zames_falb(lm, lp, ZfStructure::Full), &widths), taps * n * n);
        let bounds = tanh_like_bounds(&vec![0.3; n], &vec![0.1; n]);
        let set = common::class_set(&MultiplierSpec::zames_falb(lm, lp, ZfStructure::LayerBlock), &bounds, &widths);
        prop_assert_eq!(set.decision_variables, taps * squares);
    }

    #[test]
    fn golden_section_finds_quadratic_minimum(c in 0.05f64..2.9, k in 0.1f64..10.0) {
        let (x, fx) = golden_section(|d| k * (d - c).powi(2) + 2.0, 1e-3, 3.0, 1e-4);
        prop_assert!((x - c).abs() <= 1e-3);
        prop_assert!((fx - 2.0).abs() <= k * 1e-6 + 1e-12);
    }

    #[test]
    fn bisection_locates_threshold(t in 2e-3f64..900.0) {
        let dm = bisect_max(|d| d <= t, 1e-3, 1e3, 1e-3).unwrap();
        prop_assert!(dm.delta_max <= t);
        prop_assert!((dm.delta_max - t).abs() / t <= 1e-3);
        prop_assert!(!dm.capped);
    }

    #[test]
    fn random_nonlinearities_respect_sector_and_slope(
        alpha in 0.0f64..0.5, width in 0.1f64..1.0, mu in 0.0f64..0.5, odd in any::<bool>(), seed in any::<u64>(),
        ts in prop::collection::vec(-3.0f64..3.0, 2..20),
    ) {
        let (beta, nu) = (alpha + width, mu + width + 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_nonlinearity(alpha, beta, mu, nu, odd, 2.0, &mut rng);
        let (lo, hi) = (alpha.max(mu), beta.min(nu).max(alpha.max(mu)));
        prop_assert_eq!(f.eval(0.0), 0.0);
        for &t in &ts {
            if t != 0.0 {
                let r = f.eval(t) / t;
                prop_assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
            }
            if odd {
                prop_assert!((f.eval(-t) + f.eval(t)).abs() <= 1e-12);
            }
        }
        for w in ts.windows(2) {
            if (w[0] - w[1]).abs() > 1e-9 {
                let s = (f.eval(w[0]) - f.eval(w[1])) / (w[0] - w[1]);
                prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn hyperdominant_taps_give_nonnegative_monotone_form(
        n in 1usize..=3, lm in 0usize..=2, lp in 0usize..=2, horizon in 0usize..=5, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // off-diagonal weight of every tap is non-positive; M_0's diagonal
        // dominates the absolute row and column sums
        let mut taps: BTreeMap<i64, DMatrix<f64>> = BTreeMap::new();
        for j in -(lm as i64)..=(lp as i64) {
            taps.insert(j, DMatrix::from_fn(n, n, |_, _| -rng.random_range(0.0..1.0)));
        }
        let mut row = vec![0.0; n];
        let mut col = vec![0.0; n];
        for (j, m) in &taps {
            for r in 0..n {
                for c in 0..n {
                    if *j != 0 || r != c {
                        row[r] += m[(r, c)].abs();
                        col[c] += m[(r, c)].abs();
                    }
                }
            }
        }
        let m0 = taps.get_mut(&0).unwrap();
        for r in 0..n {
            m0[(r, r)] = row[r].max(col[r]) + rng.random_range(0.0..0.5);
        }
        let big = zames_falb_big_matrix(&taps, n, horizon);
        prop_assert!(is_doubly_hyperdominant(&big, 1e-12));
        // full taps couple neurons, so the nonlinearity is repeated
        let phi = random_nonlinearity(0.0, 4.0, 0.0, 4.0, false, 2.0, &mut rng);
        let v = DVector::from_fn(big.nrows(), |_, _| rng.random_range(-3.0..3.0));
        let fv = DVector::from_fn(big.nrows(), |i, _| phi.eval(v[i]));
        let scale = big.norm() * v.norm() * fv.norm();
        prop_assert!(v.dot(&(&big * &fv)) >= -1e-10 * scale);
    }
}
