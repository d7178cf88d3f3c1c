//! Interval bound propagation through the shifted network and the local
//! sector / slope bounds it implies.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{Activation, ShiftedLoop};

/// Per-neuron box `ṽ ∈ [lo, hi]`; the first layer block is `[-d1, d1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub d1: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

/// Local sector `[alpha, beta]` and slope `[mu, nu]` bounds per neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSlopeBounds {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub nu: DVector<f64>,
}

impl SectorSlopeBounds {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Global bounds `[0, 1]` for every neuron.
    pub fn unit(n: usize) -> Self {
        SectorSlopeBounds {
            alpha: DVector::zeros(n),
            beta: DVector::from_element(n, 1.0),
            mu: DVector::zeros(n),
            nu: DVector::from_element(n, 1.0),
        }
    }

    /// Slope bounds made uniform over each group of neurons (`min mu`, `max nu`),
    /// as needed when one nonlinearity is repeated across the group.
    pub fn uniform_slopes(&self, groups: &[std::ops::Range<usize>]) -> (DVector<f64>, DVector<f64>) {
        let mut mu = self.mu.clone();
        let mut nu = self.nu.clone();
        for g in groups {
            if g.is_empty() {
                continue;
            }
            let lo = g.clone().map(|j| self.mu[j]).fold(f64::INFINITY, f64::min);
            let hi = g.clone().map(|j| self.nu[j]).fold(f64::NEG_INFINITY, f64::max);
            for j in g.clone() {
                mu[j] = lo;
                nu[j] = hi;
            }
        }
        (mu, nu)
    }
}

/// Propagates the first-layer box `[-d1, d1]` through the shifted network with
/// monotone interval evaluation of `φ̃` and interval matrix products.
pub fn propagate_boxes(lp: &ShiftedLoop, d1: &DVector<f64>) -> BoxBounds {
    assert_eq!(d1.len(), lp.first_layer_width(), "d1 must match the first layer width");
    assert!(d1.iter().all(|&d| d > 0.0), "d1 must be strictly positive");
    let n = lp.neurons();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    lo.rows_mut(0, d1.len()).copy_from(&(-d1));
    hi.rows_mut(0, d1.len()).copy_from(d1);

    let layers = &lp.model.nn.layers;
    let mut off = 0;
    for (i, layer) in layers.iter().enumerate().skip(1) {
        let prev_w = lp.widths[i - 1];
        // φ̃ is non-decreasing, so the image of a box is the box of endpoint images.
        let img_lo: Vec<f64> = (0..prev_w).map(|k| lp.phi_tilde(off + k, lo[off + k])).collect();
        let img_hi: Vec<f64> = (0..prev_w).map(|k| lp.phi_tilde(off + k, hi[off + k])).collect();
        let next_off = off + prev_w;
        let w = &layer.weight;
        for r in 0..w.nrows() {
            let (mut l, mut h) = (0.0, 0.0);
            for k in 0..prev_w {
                let c = w[(r, k)];
                if c >= 0.0 {
                    l += c * img_lo[k];
                    h += c * img_hi[k];
                } else {
                    l += c * img_hi[k];
                    h += c * img_lo[k];
                }
            }
            lo[next_off + r] = l.min(0.0);
            hi[next_off + r] = h.max(0.0);
        }
        off = next_off;
    }
    BoxBounds { d1: d1.clone(), lo, hi }
}

/// Local sector and slope bounds of every shifted activation over its box.
pub fn local_bounds(lp: &ShiftedLoop, boxes: &BoxBounds) -> SectorSlopeBounds {
    let n = lp.neurons();
    let mut out = SectorSlopeBounds::unit(n);
    for j in 0..n {
        let (lo, hi) = (boxes.lo[j], boxes.hi[j]);
        let vs = lp.shift.v_star[j];
        let (alpha, beta, mu, nu) = match lp.activations[j] {
            Activation::Relu => relu_bounds(vs, lo, hi),
            act => smooth_bounds(act, vs, lo, hi),
        };
        out.alpha[j] = alpha;
        out.beta[j] = beta;
        out.mu[j] = mu;
        out.nu[j] = nu;
    }
    out
}

/// Closed-form relu bounds; `lo <= 0 <= hi` in shifted coordinates.
fn relu_bounds(vs: f64, lo: f64, hi: f64) -> (f64, f64, f64, f64) {
    let act = Activation::Relu;
    if lo == 0.0 && hi == 0.0 {
        let d = act.derivative(vs);
        return (d, d, d, d);
    }
    let shifted = |t: f64| act.eval(t + vs) - act.eval(vs);
    // Chords through the origin; at a zero endpoint use the one-sided slope.
    let alpha = if lo < 0.0 {
        (shifted(lo) / lo).clamp(0.0, 1.0)
    } else if vs > 0.0 {
        1.0
    } else {
        0.0
    };
    let beta = if hi > 0.0 {
        (shifted(hi) / hi).clamp(0.0, 1.0)
    } else if vs < 0.0 {
        0.0
    } else {
        1.0
    };
    // Slopes: 1 only if the whole box is in the active region, 0 only if dead.
    let mu = if lo + vs >= 0.0 { 1.0 } else { 0.0 };
    let nu = if hi + vs <= 0.0 { 0.0 } else { 1.0 };
    (alpha.min(beta), beta.max(alpha), mu, nu)
}

/// Derivative extremes over `[vs + lo, vs + hi]`; the sector bounds equal the
/// slope bounds by the mean-value theorem since the box contains 0.
fn smooth_bounds(act: Activation, vs: f64, lo: f64, hi: f64) -> (f64, f64, f64, f64) {
    let (a, b) = (vs + lo, vs + hi);
    if lo == 0.0 && hi == 0.0 {
        let d = act.derivative(vs);
        return (d, d, d, d);
    }
    let peak = act.derivative_peak().unwrap_or(0.0);
    let nu = act.derivative(peak.clamp(a, b));
    let mu = act.derivative(a).min(act.derivative(b));
    (mu, nu, mu, nu)
}
