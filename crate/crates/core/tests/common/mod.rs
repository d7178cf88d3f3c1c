#![allow(dead_code)]

use iqcroa::bounds::SectorSlopeBounds;
use iqcroa::model::{load_model, LoopModel};
use iqcroa::multipliers::*;
use nalgebra::DVector;

pub fn fixture(name: &str) -> LoopModel {
    load_model(format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"))).expect("fixture loads")
}

/// Multiplier set for a class from bounds alone, without a loop.
pub fn class_set(spec: &MultiplierSpec, bounds: &SectorSlopeBounds, widths: &[usize]) -> MultiplierSet {
    let circle = match spec.circle() {
        CirclePart::Diag => Some(build_diag_circle(&bounds.alpha, &bounds.beta)),
        CirclePart::FullBlock => Some(build_full_block_circle(&bounds.alpha, &bounds.beta, spec.vertex_cap).unwrap()),
        CirclePart::CircleYakubovich => Some(
            build_circle_yakubovich(&bounds.alpha, &bounds.beta, &bounds.mu, &bounds.nu, spec.vertex_cap).unwrap(),
        ),
        CirclePart::None => None,
    };
    let zf = spec.has_zf().then(|| {
        let groups = repetition_groups(spec.zf_structure, widths);
        let (mu, nu) = bounds.uniform_slopes(&groups);
        build_zames_falb(
            &mu,
            &nu,
            ZfParams {
                l_minus: spec.zf_order.0,
                l_plus: spec.zf_order.1,
                structure: spec.zf_structure,
                odd: spec.odd_nonlinearity,
            },
            widths,
        )
        .unwrap()
    });
    assemble_combined(zf, circle)
}

/// Local tanh-like bounds: sector `[α, 1]`, slopes `[μ, 1]`, with `μ ≤ α`.
pub fn tanh_like_bounds(alpha: &[f64], mu: &[f64]) -> SectorSlopeBounds {
    let n = alpha.len();
    SectorSlopeBounds {
        alpha: DVector::from_column_slice(alpha),
        beta: DVector::from_element(n, 1.0),
        mu: DVector::from_column_slice(mu),
        nu: DVector::from_element(n, 1.0),
    }
}
