use nalgebra::{DMatrix, DVector};

use super::expr::{AffineMatrix, LinExpr, VarId};

/// `expr ⪰ 0`.
#[derive(Debug, Clone)]
pub struct PsdConstraint {
    pub label: String,
    pub expr: AffineMatrix,
}

/// `expr >= 0`.
#[derive(Debug, Clone)]
pub struct ScalarConstraint {
    pub label: String,
    pub expr: LinExpr,
}

/// Symmetric matrix of decision variables, one variable per upper-triangle entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymMatrixVar {
    pub dim: usize,
    first: VarId,
}

impl SymMatrixVar {
    /// Variable holding entry `(i, j)` (order-independent).
    pub fn var(&self, i: usize, j: usize) -> VarId {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // column-major upper triangle
        self.first + j * (j + 1) / 2 + i
    }

    pub fn count(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn expr(&self) -> AffineMatrix {
        let mut m = AffineMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            for i in 0..self.dim {
                m.add_term(self.var(i, j), i, j, 1.0);
            }
        }
        m
    }

    pub fn value(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| x[self.var(i, j)])
    }

    pub fn offset(&self, k: usize) -> Self {
        SymMatrixVar { dim: self.dim, first: self.first + k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Feasibility,
    Minimize,
}

/// Semidefinite program over scalar variables with PSD and non-negativity
/// constraints and a linear objective.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    n_vars: usize,
    pub psd: Vec<PsdConstraint>,
    pub nonneg: Vec<ScalarConstraint>,
    pub objective: LinExpr,
}

impl SdpProblem {
    pub fn new() -> Self {
        SdpProblem::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn new_var(&mut self) -> VarId {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn new_vars(&mut self, k: usize) -> Vec<VarId> {
        (0..k).map(|_| self.new_var()).collect()
    }

    pub fn new_sym(&mut self, dim: usize) -> SymMatrixVar {
        let first = self.n_vars;
        self.n_vars += dim * (dim + 1) / 2;
        SymMatrixVar { dim, first }
    }

    pub fn add_psd(&mut self, label: impl Into<String>, expr: AffineMatrix) {
        debug_assert!(expr.nrows() == expr.ncols());
        self.psd.push(PsdConstraint { label: label.into(), expr });
    }

    /// `lhs ⪯ rhs` as `rhs - lhs ⪰ 0`.
    pub fn add_lmi_le(&mut self, label: impl Into<String>, lhs: &AffineMatrix, rhs: &AffineMatrix) {
        let mut e = rhs.clone();
        e.add_scaled(lhs, -1.0);
        self.add_psd(label, e);
    }

    pub fn add_nonneg(&mut self, label: impl Into<String>, expr: LinExpr) {
        self.nonneg.push(ScalarConstraint { label: label.into(), expr });
    }

    /// Appends another problem's variables and constraints; returns the
    /// offset added to its variable ids. The other objective is dropped.
    pub fn absorb(&mut self, other: &SdpProblem) -> usize {
        let off = self.n_vars;
        self.n_vars += other.n_vars;
        for c in &other.psd {
            self.psd.push(PsdConstraint { label: c.label.clone(), expr: c.expr.offset_vars(off) });
        }
        for c in &other.nonneg {
            self.nonneg.push(ScalarConstraint { label: c.label.clone(), expr: c.expr.offset_vars(off) });
        }
        off
    }

    pub fn objective_kind(&self) -> Objective {
        if self.objective.terms.is_empty() {
            Objective::Feasibility
        } else {
            Objective::Minimize
        }
    }

    /// Worst violation of every constraint at `x` (0 if satisfied):
    /// `-λ_min` for PSD blocks, `-value` for inequalities.
    pub fn violations(&self, x: &DVector<f64>) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for c in &self.psd {
            let m = c.expr.eval(x);
            let m = (&m + m.transpose()) * 0.5;
            let lmin = m.symmetric_eigenvalues().min();
            out.push((c.label.clone(), (-lmin).max(0.0)));
        }
        for c in &self.nonneg {
            out.push((c.label.clone(), (-c.expr.eval(x)).max(0.0)));
        }
        out
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.violations(x).into_iter().map(|(_, v)| v).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_var_layout_is_upper_triangle_column_major() {
        let mut p = SdpProblem::new();
        let _ = p.new_var();
        let s = p.new_sym(3);
        assert_eq!(s.var(0, 0), 1);
        assert_eq!(s.var(0, 1), 2);
        assert_eq!(s.var(1, 1), 3);
        assert_eq!(s.var(2, 0), 4);
        assert_eq!(s.var(2, 2), 6);
        assert_eq!(p.n_vars(), 7);
    }

    #[test]
    fn absorb_offsets_variables() {
        let mut a = SdpProblem::new();
        a.new_vars(2);
        let mut b = SdpProblem::new();
        let v = b.new_var();
        b.add_nonneg("b", LinExpr::var(v));
        let off = a.absorb(&b);
        assert_eq!(off, 2);
        assert_eq!(a.nonneg[0].expr.terms.keys().copied().collect::<Vec<_>>(), vec![2]);
    }
}
