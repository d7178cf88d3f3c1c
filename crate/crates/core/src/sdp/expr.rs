//! Affine matrix expressions `F(x) = F_0 + Σ_k x_k F_k` over scalar decision
//! variables, stored sparsely per variable.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

pub type VarId = usize;

type Entries = BTreeMap<(usize, usize), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    nrows: usize,
    ncols: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<VarId, Entries>,
}

impl AffineMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        AffineMatrix { nrows, ncols, constant: DMatrix::zeros(nrows, ncols), terms: BTreeMap::new() }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        AffineMatrix { nrows: m.nrows(), ncols: m.ncols(), constant: m, terms: BTreeMap::new() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.terms.keys().copied()
    }

    pub fn term_entries(&self, var: VarId) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.terms.get(&var).into_iter().flat_map(|e| e.iter().map(|(&k, &v)| (k, v)))
    }

    pub fn terms(&self) -> impl Iterator<Item = (VarId, &BTreeMap<(usize, usize), f64>)> + '_ {
        self.terms.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `coef * x_var` to entry `(i, j)`.
    pub fn add_term(&mut self, var: VarId, i: usize, j: usize, coef: f64) {
        assert!(i < self.nrows && j < self.ncols, "entry ({i},{j}) out of range");
        if coef == 0.0 {
            return;
        }
        let e = self.terms.entry(var).or_default();
        let slot = e.entry((i, j)).or_insert(0.0);
        *slot += coef;
        if *slot == 0.0 {
            e.remove(&(i, j));
        }
    }

    pub fn add_constant(&mut self, i: usize, j: usize, value: f64) {
        self.constant[(i, j)] += value;
    }

    pub fn add_assign(&mut self, other: &AffineMatrix) {
        self.add_scaled(other, 1.0);
    }

    pub fn add_scaled(&mut self, other: &AffineMatrix, s: f64) {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols), "shape mismatch");
        self.constant += &other.constant * s;
        for (&v, entries) in &other.terms {
            for (&(i, j), &c) in entries {
                self.add_term(v, i, j, s * c);
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = AffineMatrix::zeros(self.nrows, self.ncols);
        out.add_scaled(self, s);
        out
    }

    pub fn transpose(&self) -> Self {
        AffineMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|(&v, e)| (v, e.iter().map(|(&(i, j), &c)| ((j, i), c)).collect()))
                .collect(),
        }
    }

    fn map_terms(&self, nrows: usize, ncols: usize, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        let constant = f(&self.constant);
        let mut terms = BTreeMap::new();
        for (&v, e) in &self.terms {
            let mut dense = DMatrix::zeros(self.nrows, self.ncols);
            for (&(i, j), &c) in e {
                dense[(i, j)] = c;
            }
            let out = f(&dense);
            let sparse: Entries = out
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(k, &c)| ((k % nrows, k / nrows), c))
                .collect();
            if !sparse.is_empty() {
                terms.insert(v, sparse);
            }
        }
        AffineMatrix { nrows, ncols, constant, terms }
    }

    /// `L * self`.
    pub fn left_mul(&self, l: &DMatrix<f64>) -> Self {
        assert_eq!(l.ncols(), self.nrows, "left factor shape mismatch");
        self.map_terms(l.nrows(), self.ncols, |m| l * m)
    }

    /// `self * R`.
    pub fn right_mul(&self, r: &DMatrix<f64>) -> Self {
        assert_eq!(r.nrows(), self.ncols, "right factor shape mismatch");
        self.map_terms(self.nrows, r.ncols(), |m| m * r)
    }

    /// `Lᵀ self L`.
    pub fn congruence(&self, l: &DMatrix<f64>) -> Self {
        assert_eq!(self.nrows, self.ncols, "congruence needs a square expression");
        let lt = l.transpose();
        self.map_terms(l.ncols(), l.ncols(), |m| &lt * m * l)
    }

    /// Copies `other` into the block starting at `(r0, c0)` (additively).
    pub fn place(&mut self, other: &AffineMatrix, r0: usize, c0: usize) {
        assert!(r0 + other.nrows <= self.nrows && c0 + other.ncols <= self.ncols, "block out of range");
        let mut view = self.constant.view_mut((r0, c0), (other.nrows, other.ncols));
        view += &other.constant;
        for (&v, e) in &other.terms {
            for (&(i, j), &c) in e {
                self.add_term(v, r0 + i, c0 + j, c);
            }
        }
    }

    pub fn place_constant(&mut self, m: &DMatrix<f64>, r0: usize, c0: usize) {
        let mut view = self.constant.view_mut((r0, c0), (m.nrows(), m.ncols()));
        view += m;
    }

    pub fn block(&self, r0: usize, c0: usize, nrows: usize, ncols: usize) -> Self {
        let mut out = AffineMatrix::constant(self.constant.view((r0, c0), (nrows, ncols)).into_owned());
        for (&v, e) in &self.terms {
            for (&(i, j), &c) in e {
                if i >= r0 && i < r0 + nrows && j >= c0 && j < c0 + ncols {
                    out.add_term(v, i - r0, j - c0, c);
                }
            }
        }
        out
    }

    /// Block-diagonal concatenation.
    pub fn block_diag(parts: &[&AffineMatrix]) -> Self {
        let r: usize = parts.iter().map(|p| p.nrows).sum();
        let c: usize = parts.iter().map(|p| p.ncols).sum();
        let mut out = AffineMatrix::zeros(r, c);
        let (mut ro, mut co) = (0, 0);
        for p in parts {
            out.place(p, ro, co);
            ro += p.nrows;
            co += p.ncols;
        }
        out
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (&v, e) in &self.terms {
            let xv = x[v];
            if xv == 0.0 {
                continue;
            }
            for (&(i, j), &c) in e {
                m[(i, j)] += c * xv;
            }
        }
        m
    }

    pub fn offset_vars(&self, offset: usize) -> Self {
        AffineMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            constant: self.constant.clone(),
            terms: self.terms.iter().map(|(&v, e)| (v + offset, e.clone())).collect(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        if (&self.constant - self.constant.transpose()).amax() > 0.0 {
            return false;
        }
        self.terms.values().all(|e| e.iter().all(|(&(i, j), &c)| e.get(&(j, i)).copied() == Some(c)))
    }

    /// Averages with the transpose; removes round-off asymmetry from products.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.scaled(0.5);
        out.add_scaled(&self.transpose(), 0.5);
        out
    }
}

/// Scalar affine expression.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: BTreeMap<VarId, f64>,
}

impl LinExpr {
    pub fn var(v: VarId) -> Self {
        let mut e = LinExpr::default();
        e.add(v, 1.0);
        e
    }

    pub fn add(&mut self, v: VarId, c: f64) {
        if c == 0.0 {
            return;
        }
        let slot = self.terms.entry(v).or_insert(0.0);
        *slot += c;
        if *slot == 0.0 {
            self.terms.remove(&v);
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, s: f64) {
        self.constant += s * other.constant;
        for (&v, &c) in &other.terms {
            self.add(v, s * c);
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.constant + self.terms.iter().map(|(&v, &c)| c * x[v]).sum::<f64>()
    }

    pub fn offset_vars(&self, offset: usize) -> Self {
        LinExpr { constant: self.constant, terms: self.terms.iter().map(|(&v, &c)| (v + offset, c)).collect() }
    }

    /// Entry `(i, j)` of an affine matrix as a scalar expression.
    pub fn entry(m: &AffineMatrix, i: usize, j: usize) -> Self {
        let mut e = LinExpr { constant: m.constant[(i, j)], terms: BTreeMap::new() };
        for (v, entries) in m.terms() {
            if let Some(&c) = entries.get(&(i, j)) {
                e.add(v, c);
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn congruence_matches_dense_evaluation() {
        let mut x = AffineMatrix::zeros(2, 2);
        x.add_term(0, 0, 0, 1.0);
        x.add_term(1, 0, 1, 1.0);
        x.add_term(1, 1, 0, 1.0);
        x.add_term(2, 1, 1, 1.0);
        x.add_constant(0, 0, 0.5);
        let l = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let vals = DVector::from_vec(vec![2.0, -0.3, 1.5]);
        let lhs = x.congruence(&l).eval(&vals);
        let rhs = l.transpose() * x.eval(&vals) * &l;
        assert!((lhs - rhs).amax() < 1e-14);
    }

    #[test]
    fn place_and_block_round_trip() {
        let mut a = AffineMatrix::zeros(2, 2);
        a.add_term(3, 1, 0, 2.0);
        let mut big = AffineMatrix::zeros(4, 4);
        big.place(&a, 2, 1);
        let back = big.block(2, 1, 2, 2);
        assert_eq!(back, a);
    }

    #[test]
    fn cancelling_terms_are_dropped() {
        let mut a = AffineMatrix::zeros(1, 1);
        a.add_term(0, 0, 0, 1.0);
        a.add_term(0, 0, 0, -1.0);
        assert_eq!(a.term_entries(0).count(), 0);
    }
}
