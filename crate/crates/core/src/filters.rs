//! State-space realizations of the multiplier filters `Ψ` and the extended
//! system formed with the shifted plant.
//!
//! Filter input is `(ṽ_k, w̃_k)`; the state is a shared delay line
//! `(ṽ_{k-1}, …, ṽ_{k-L}, w̃_{k-1}, …, w̃_{k-L})`.

use nalgebra::{DMatrix, DVector};

use crate::model::ShiftedLoop;
use crate::multipliers::{CirclePart, MultiplierSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRealization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub n: usize,
    pub depth: usize,
}

#[derive(Clone, Copy)]
enum Sig {
    V,
    W,
}

struct Builder {
    n: usize,
    depth: usize,
    c: Vec<DVector<f64>>,
    d: Vec<DVector<f64>>,
}

impl Builder {
    fn new(n: usize, depth: usize) -> Self {
        Builder { n, depth, c: Vec::new(), d: Vec::new() }
    }

    /// Appends the `n` rows `Σ coef · sig_{k-lag}`.
    fn push(&mut self, parts: &[(Sig, usize, f64)]) {
        let (n, l) = (self.n, self.depth);
        for j in 0..n {
            let mut c = DVector::zeros(2 * l * n);
            let mut d = DVector::zeros(2 * n);
            for &(sig, lag, coef) in parts {
                let base = match sig {
                    Sig::V => 0,
                    Sig::W => 1,
                };
                if lag == 0 {
                    d[base * n + j] += coef;
                } else {
                    c[base * l * n + (lag - 1) * n + j] += coef;
                }
            }
            self.c.push(c);
            self.d.push(d);
        }
    }

    fn finish(self) -> FilterRealization {
        let (n, l) = (self.n, self.depth);
        let nx = 2 * l * n;
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, 2 * n);
        for s in 0..2 {
            let off = s * l * n;
            if l > 0 {
                for j in 0..n {
                    b[(off + j, s * n + j)] = 1.0;
                }
            }
            for t in 1..l {
                for j in 0..n {
                    a[(off + t * n + j, off + (t - 1) * n + j)] = 1.0;
                }
            }
        }
        let rows = self.c.len();
        let c = DMatrix::from_fn(rows, nx, |i, k| self.c[i][k]);
        let d = DMatrix::from_fn(rows, 2 * n, |i, k| self.d[i][k]);
        FilterRealization { a, b, c, d, n, depth: l }
    }
}

fn push_zf(bld: &mut Builder, depth: usize) {
    for t in 0..=depth {
        bld.push(&[(Sig::V, t, 1.0)]);
    }
    for t in 0..=depth {
        bld.push(&[(Sig::W, t, 1.0)]);
    }
}

fn push_circle(bld: &mut Builder, part: CirclePart) {
    match part {
        CirclePart::Diag | CirclePart::FullBlock => {
            bld.push(&[(Sig::V, 0, 1.0)]);
            bld.push(&[(Sig::W, 0, 1.0)]);
        }
        CirclePart::CircleYakubovich => {
            bld.push(&[(Sig::V, 0, 1.0)]);
            bld.push(&[(Sig::V, 0, 1.0), (Sig::V, 1, -1.0)]);
            bld.push(&[(Sig::W, 0, 1.0)]);
            bld.push(&[(Sig::W, 0, 1.0), (Sig::W, 1, -1.0)]);
        }
        CirclePart::None => {}
    }
}

/// Static `r = (ṽ, w̃)`.
pub fn realize_static(n: usize) -> FilterRealization {
    let mut bld = Builder::new(n, 0);
    push_circle(&mut bld, CirclePart::Diag);
    bld.finish()
}

/// `r = (ṽ_k, ṽ_k − ṽ_{k-1}, w̃_k, w̃_k − w̃_{k-1})`.
pub fn realize_cy(n: usize) -> FilterRealization {
    let mut bld = Builder::new(n, 1);
    push_circle(&mut bld, CirclePart::CircleYakubovich);
    bld.finish()
}

/// `r = (ṽ_k, …, ṽ_{k-ℓ}, w̃_k, …, w̃_{k-ℓ})`.
pub fn realize_zf(n: usize, depth: usize) -> FilterRealization {
    let mut bld = Builder::new(n, depth);
    push_zf(&mut bld, depth);
    bld.finish()
}

/// Filter for a full multiplier spec; Zames-Falb rows come first, then the
/// circle rows, matching `P = blkdiag(P^ZF, P^circle)`.
pub fn realize(spec: &MultiplierSpec, n: usize) -> FilterRealization {
    let circle = spec.circle();
    let zf = spec.zf_depth();
    let depth = zf.unwrap_or(0).max(if circle == CirclePart::CircleYakubovich { 1 } else { 0 });
    let mut bld = Builder::new(n, depth);
    if let Some(l) = zf {
        push_zf(&mut bld, l);
    }
    push_circle(&mut bld, circle);
    bld.finish()
}

impl FilterRealization {
    pub fn n_xi(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_r(&self) -> usize {
        self.c.nrows()
    }

    /// Output sequence from zero initial state.
    pub fn simulate(&self, v: &[DVector<f64>], w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xi = DVector::zeros(self.n_xi());
        let mut out = Vec::with_capacity(v.len());
        let mut input = DVector::zeros(2 * self.n);
        for (vk, wk) in v.iter().zip(w) {
            input.rows_mut(0, self.n).copy_from(vk);
            input.rows_mut(self.n, self.n).copy_from(wk);
            out.push(&self.c * &xi + &self.d * &input);
            xi = &self.a * &xi + &self.b * &input;
        }
        out
    }
}

/// Closed-loop plant in shifted coordinates extended with the filter:
/// `η = (x̃, ξ)`, `η⁺ = A_tot η + B_tot w̃`, `r = C_tot η + D_tot w̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub nx: usize,
    pub n_xi: usize,
}

impl ExtendedSystem {
    pub fn n_eta(&self) -> usize {
        self.nx + self.n_xi
    }

    pub fn n_w(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_r(&self) -> usize {
        self.c.nrows()
    }
}

pub fn extend_plant(lp: &ShiftedLoop, psi: &FilterRealization) -> ExtendedSystem {
    let plant = &lp.model.plant;
    let (nx, nxi, n) = (plant.nx(), psi.n_xi(), lp.neurons());
    assert_eq!(psi.n, n, "filter width must match the neuron count");
    let ne = nx + nxi;
    let mut a = DMatrix::zeros(ne, ne);
    a.view_mut((0, 0), (nx, nx)).copy_from(&plant.a);
    a.view_mut((nx, 0), (nxi, nx)).copy_from(&(&psi.b * &lp.r_x));
    a.view_mut((nx, nx), (nxi, nxi)).copy_from(&psi.a);
    let mut b = DMatrix::zeros(ne, n);
    b.view_mut((0, 0), (nx, n)).copy_from(&(&plant.b * &lp.r_u));
    b.view_mut((nx, 0), (nxi, n)).copy_from(&(&psi.b * &lp.r_w));
    let mut c = DMatrix::zeros(psi.n_r(), ne);
    c.view_mut((0, 0), (psi.n_r(), nx)).copy_from(&(&psi.d * &lp.r_x));
    c.view_mut((0, nx), (psi.n_r(), nxi)).copy_from(&psi.c);
    let d = &psi.d * &lp.r_w;
    ExtendedSystem { a, b, c, d, nx, n_xi: nxi }
}

/// `A^k = 0` for the smallest such `k ≤ dim`, checked in exact arithmetic on
/// the 0/1 shift structure.
pub fn nilpotency_index(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    if n == 0 {
        return Some(0);
    }
    let mut p = a.clone();
    for k in 1..=n {
        if p.iter().all(|&x| x == 0.0) {
            return Some(k);
        }
        p = &p * a;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multipliers::ZfStructure;

    #[test]
    fn cy_by_hand() {
        let f = realize_cy(1);
        let v = [DVector::from_element(1, 1.0), DVector::from_element(1, 3.0)];
        let w = [DVector::from_element(1, 2.0), DVector::from_element(1, 5.0)];
        let r = f.simulate(&v, &w);
        assert_eq!(r[0].as_slice(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(r[1].as_slice(), &[3.0, 2.0, 5.0, 3.0]);
    }

    #[test]
    fn combined_dimensions() {
        let n = 10;
        let spec = MultiplierSpec::combined(1, 1, ZfStructure::Diag, CirclePart::Diag);
        let f = realize(&spec, n);
        assert_eq!(f.n_xi(), 2 * n);
        assert_eq!(f.n_r(), 2 * n * 2 + 2 * n);
        assert_eq!(nilpotency_index(&f.a), Some(1));
        let f = realize_zf(2, 3);
        assert_eq!(nilpotency_index(&f.a), Some(3));
    }
}
