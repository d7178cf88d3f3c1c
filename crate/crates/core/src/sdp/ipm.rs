//! Dense primal-dual interior-point method (HKM direction, Mehrotra
//! predictor-corrector) for block-diagonal SDPs with linear blocks.
//!
//! The problem is held in the standard dual form
//! `max bᵀy  s.t.  Z = C − Σ yᵢ Aᵢ ⪰ 0`, whose primal is
//! `min ⟨C, X⟩  s.t.  ⟨Aᵢ, X⟩ = bᵢ, X ⪰ 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct VarMatrix {
    pub var: usize,
    /// Symmetric entries `(r, c, a)`; both triangles stored.
    pub entries: Vec<(usize, usize, f64)>,
    cols: Vec<usize>,
}

impl VarMatrix {
    pub fn new(var: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut cols: Vec<usize> = entries.iter().map(|e| e.1).collect();
        cols.sort_unstable();
        cols.dedup();
        VarMatrix { var, entries, cols }
    }

    fn dot(&self, m: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(r, c, a)| a * m[(r, c)]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub c: DMatrix<f64>,
    pub a: Vec<VarMatrix>,
}

#[derive(Debug, Clone)]
pub struct LinRow {
    pub c: f64,
    pub a: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct DualFormSdp {
    pub m: usize,
    pub b: DVector<f64>,
    pub psd: Vec<PsdBlock>,
    pub lin: Vec<LinRow>,
}

#[derive(Debug, Clone)]
pub struct IpmOptions {
    pub max_iter: usize,
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub step_fraction: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions { max_iter: 120, gap_tol: 1e-9, feas_tol: 1e-10, step_fraction: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Optimal,
    /// Stalled, but the dual iterate is feasible to tolerance.
    Feasible,
    /// A primal improving ray was found: `C − Σ yᵢAᵢ ⪰ 0` has no solution.
    DualInfeasible,
    /// The dual objective is unbounded.
    PrimalInfeasible,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub status: IpmStatus,
    pub y: DVector<f64>,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub primal_infeas: f64,
    pub dual_infeas: f64,
    pub iterations: usize,
}

struct Iterate {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    zl: DVector<f64>,
    y: DVector<f64>,
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    dz: Vec<DMatrix<f64>>,
    dxl: DVector<f64>,
    dzl: DVector<f64>,
    dy: DVector<f64>,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn sym_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| sym(&c.inverse()))
}

/// Largest `α ≤ 1` with `m + α d ⪰ 0` for `m ≻ 0`.
fn max_step_psd(m: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let Some(ch) = m.clone().cholesky() else { return 0.0 };
    let l = ch.l();
    let Some(linv) = l.clone().try_inverse() else { return 0.0 };
    let s = sym(&(&linv * d * linv.transpose()));
    let lmin = s.symmetric_eigenvalues().min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn max_step_lin(v: &DVector<f64>, d: &DVector<f64>) -> f64 {
    v.iter().zip(d.iter()).filter(|(_, &dd)| dd < 0.0).map(|(&vv, &dd)| -vv / dd).fold(f64::INFINITY, f64::min)
}

impl DualFormSdp {
    fn dims(&self) -> usize {
        self.psd.iter().map(|b| b.c.nrows()).sum::<usize>() + self.lin.len()
    }

    /// `A*(y)` per block.
    fn adjoint(&self, y: &DVector<f64>) -> (Vec<DMatrix<f64>>, DVector<f64>) {
        let blocks = self
            .psd
            .iter()
            .map(|b| {
                let mut m = DMatrix::zeros(b.c.nrows(), b.c.ncols());
                for vm in &b.a {
                    let yv = y[vm.var];
                    if yv != 0.0 {
                        for &(r, c, a) in &vm.entries {
                            m[(r, c)] += a * yv;
                        }
                    }
                }
                m
            })
            .collect();
        let lin = DVector::from_iterator(
            self.lin.len(),
            self.lin.iter().map(|row| row.a.iter().map(|&(v, a)| a * y[v]).sum::<f64>()),
        );
        (blocks, lin)
    }

    /// `A(W)` for per-block matrices and a linear vector.
    fn apply(&self, w: &[DMatrix<f64>], wl: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (b, wb) in self.psd.iter().zip(w) {
            for vm in &b.a {
                out[vm.var] += vm.dot(wb);
            }
        }
        for (k, row) in self.lin.iter().enumerate() {
            for &(v, a) in &row.a {
                out[v] += a * wl[k];
            }
        }
        out
    }

    fn var_blocks(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.m];
        for (bi, b) in self.psd.iter().enumerate() {
            for (li, vm) in b.a.iter().enumerate() {
                out[vm.var].push((bi, li));
            }
        }
        out
    }

    /// Schur complement `M_ij = Σ_blocks tr(Aᵢ X Aⱼ Z⁻¹) + Σ_lin aᵢ aⱼ x/z`.
    fn schur(
        &self,
        var_blocks: &[Vec<(usize, usize)>],
        x: &[DMatrix<f64>],
        zinv: &[DMatrix<f64>],
        xl: &DVector<f64>,
        zl: &DVector<f64>,
    ) -> DMatrix<f64> {
        let rows: Vec<Vec<(usize, f64)>> = (0..self.m)
            .into_par_iter()
            .map(|i| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for &(bi, li) in &var_blocks[i] {
                    let block = &self.psd[bi];
                    let ai = &block.a[li];
                    let s = block.c.nrows();
                    let mut xa = DMatrix::zeros(s, s);
                    for &(p, q, a) in &ai.entries {
                        let mut col = xa.column_mut(q);
                        col.axpy(a, &x[bi].column(p), 1.0);
                    }
                    let mut g = DMatrix::zeros(s, s);
                    for &q in &ai.cols {
                        g.ger(1.0, &xa.column(q), &zinv[bi].row(q).transpose(), 1.0);
                    }
                    for aj in &block.a {
                        if aj.var >= i {
                            acc.push((aj.var, aj.dot(&g)));
                        }
                    }
                }
                acc
            })
            .collect();
        let mut m = DMatrix::zeros(self.m, self.m);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row {
                m[(i, j)] += v;
                if j != i {
                    m[(j, i)] += v;
                }
            }
        }
        for (k, row) in self.lin.iter().enumerate() {
            let d = xl[k] / zl[k];
            for &(i, ai) in &row.a {
                for &(j, aj) in &row.a {
                    m[(i, j)] += d * ai * aj;
                }
            }
        }
        m
    }

    fn initial_point(&self) -> Iterate {
        let mut x = Vec::new();
        let mut z = Vec::new();
        for b in &self.psd {
            let s = b.c.nrows() as f64;
            let mut xi: f64 = 10.0_f64.max(s.sqrt());
            let mut eta: f64 = 10.0_f64.max(s.sqrt()).max(b.c.norm());
            for vm in &b.a {
                let na = vm.entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
                xi = xi.max(s * (1.0 + self.b[vm.var].abs()) / (1.0 + na));
                eta = eta.max(na);
            }
            x.push(DMatrix::identity(b.c.nrows(), b.c.nrows()) * xi);
            z.push(DMatrix::identity(b.c.nrows(), b.c.nrows()) * (eta / s.sqrt()).max(1.0));
        }
        let nl = self.lin.len();
        let mut xl = DVector::from_element(nl, 10.0);
        let mut zl = DVector::from_element(nl, 10.0);
        for (k, row) in self.lin.iter().enumerate() {
            let na = row.a.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            xl[k] = row.a.iter().map(|&(v, _)| (1.0 + self.b[v].abs()) / (1.0 + na)).fold(10.0, f64::max);
            zl[k] = 10.0_f64.max(na).max(row.c.abs());
        }
        Iterate { x, z, xl, zl, y: DVector::zeros(self.m) }
    }

    pub fn solve(&self, opts: &IpmOptions) -> IpmResult {
        let n_cone = self.dims().max(1) as f64;
        let var_blocks = self.var_blocks();
        let mut it = self.initial_point();
        let b_norm = self.b.norm();
        let c_norm = self.psd.iter().map(|b| b.c.norm_squared()).sum::<f64>().sqrt()
            + self.lin.iter().map(|r| r.c * r.c).sum::<f64>().sqrt();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut last = IpmResult {
            status: IpmStatus::Stalled,
            y: it.y.clone(),
            primal_obj: f64::NAN,
            dual_obj: f64::NAN,
            primal_infeas: f64::INFINITY,
            dual_infeas: f64::INFINITY,
            iterations: 0,
        };

        let mut best_merit = f64::INFINITY;
        let mut stall = 0;
        for iter in 0..opts.max_iter {
            let (aty, atyl) = self.adjoint(&it.y);
            let rd: Vec<DMatrix<f64>> =
                self.psd.iter().enumerate().map(|(k, b)| &b.c - &it.z[k] - &aty[k]).collect();
            let rdl = DVector::from_iterator(self.lin.len(), self.lin.iter().map(|r| r.c)) - &it.zl - &atyl;
            let ax = self.apply(&it.x, &it.xl);
            let rp = &self.b - &ax;
            let pobj = self.psd.iter().zip(&it.x).map(|(b, x)| inner(&b.c, x)).sum::<f64>()
                + self.lin.iter().zip(it.xl.iter()).map(|(r, x)| r.c * x).sum::<f64>();
            let dobj = self.b.dot(&it.y);
            let gap = it.x.iter().zip(&it.z).map(|(x, z)| inner(x, z)).sum::<f64>() + it.xl.dot(&it.zl);
            let mu = gap / n_cone;
            let pinf = rp.norm() / (1.0 + b_norm);
            let dinf = (rd.iter().map(|m| m.norm_squared()).sum::<f64>() + rdl.norm_squared()).sqrt() / (1.0 + c_norm);
            let rel_gap = (pobj - dobj).abs().max(gap) / (1.0 + pobj.abs() + dobj.abs());
            log::trace!("ipm {iter}: pobj {pobj:.6e} dobj {dobj:.6e} pinf {pinf:.2e} dinf {dinf:.2e} gap {rel_gap:.2e}");
            last = IpmResult {
                status: IpmStatus::Stalled,
                y: it.y.clone(),
                primal_obj: pobj,
                dual_obj: dobj,
                primal_infeas: pinf,
                dual_infeas: dinf,
                iterations: iter,
            };
            let merit = pinf.max(rel_gap);
            if merit < 0.9 * best_merit {
                best_merit = merit;
                stall = 0;
            } else {
                stall += 1;
                if stall >= 8 && dinf <= opts.feas_tol {
                    break;
                }
            }
            if dinf <= opts.feas_tol {
                let better = best.as_ref().is_none_or(|(o, _)| dobj > *o);
                if better {
                    best = Some((dobj, it.y.clone()));
                }
            }
            if pinf <= opts.feas_tol && dinf <= opts.feas_tol && rel_gap <= opts.gap_tol {
                last.status = IpmStatus::Optimal;
                return last;
            }
            // Certificates of infeasibility.
            let x_norm = (it.x.iter().map(|m| m.norm_squared()).sum::<f64>() + it.xl.norm_squared()).sqrt();
            if pobj < 0.0 && ax.norm() <= 1e-8 * (-pobj) && -pobj > 1e-8 * x_norm {
                last.status = IpmStatus::DualInfeasible;
                return last;
            }
            if dobj > 0.0 {
                let aty_norm = (aty.iter().map(|m| m.norm_squared()).sum::<f64>() + atyl.norm_squared()).sqrt();
                let min_eig = aty
                    .iter()
                    .map(|m| sym(m).symmetric_eigenvalues().max())
                    .chain(atyl.iter().copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                if min_eig <= 1e-8 * dobj && aty_norm < 1e-8 * dobj && dobj > 1e12 {
                    last.status = IpmStatus::PrimalInfeasible;
                    return last;
                }
            }

            let Some(zinv) = it.z.iter().map(sym_inverse).collect::<Option<Vec<_>>>() else { break };
            let schur = self.schur(&var_blocks, &it.x, &zinv, &it.xl, &it.zl);
            let scale = schur.diagonal().amax().max(1e-300);
            let chol = {
                let mut reg = 0.0;
                loop {
                    let mut m = schur.clone();
                    for i in 0..self.m {
                        m[(i, i)] += reg * scale + 1e-15 * scale;
                    }
                    if let Some(c) = m.cholesky() {
                        break Some(c);
                    }
                    reg = if reg == 0.0 { 1e-12 } else { reg * 100.0 };
                    if reg > 1e-2 {
                        break None;
                    }
                }
            };
            let Some(chol) = chol else { break };
            // iterative refinement against the unregularized matrix
            let solve_schur = |rhs: &DVector<f64>| -> DVector<f64> {
                let mut dy = chol.solve(rhs);
                for _ in 0..3 {
                    let r = rhs - &schur * &dy;
                    if r.norm() <= 1e-15 * rhs.norm() {
                        break;
                    }
                    dy += chol.solve(&r);
                }
                dy
            };

            let solve_dir = |h: &[DMatrix<f64>], hl: &DVector<f64>| -> Direction {
                // dX = H − X dZ Z⁻¹ with dZ = Rd − A*(dy)
                let w: Vec<DMatrix<f64>> =
                    (0..self.psd.len()).map(|k| &h[k] - &it.x[k] * &rd[k] * &zinv[k]).collect();
                let wl = DVector::from_iterator(
                    self.lin.len(),
                    (0..self.lin.len()).map(|k| hl[k] - it.xl[k] * rdl[k] / it.zl[k]),
                );
                let rhs = &rp - self.apply(&w, &wl);
                let dy = solve_schur(&rhs);
                let (ady, adyl) = self.adjoint(&dy);
                let dz: Vec<DMatrix<f64>> = (0..self.psd.len()).map(|k| sym(&(&rd[k] - &ady[k]))).collect();
                let dzl = &rdl - adyl;
                let dx: Vec<DMatrix<f64>> =
                    (0..self.psd.len()).map(|k| sym(&(&h[k] - &it.x[k] * &dz[k] * &zinv[k]))).collect();
                let dxl = DVector::from_iterator(
                    self.lin.len(),
                    (0..self.lin.len()).map(|k| hl[k] - it.xl[k] * dzl[k] / it.zl[k]),
                );
                Direction { dx, dz, dxl, dzl, dy }
            };
            let steps = |d: &Direction| -> (f64, f64) {
                let ap = it
                    .x
                    .iter()
                    .zip(&d.dx)
                    .map(|(x, dx)| max_step_psd(x, dx))
                    .fold(max_step_lin(&it.xl, &d.dxl), f64::min);
                let ad = it
                    .z
                    .iter()
                    .zip(&d.dz)
                    .map(|(z, dz)| max_step_psd(z, dz))
                    .fold(max_step_lin(&it.zl, &d.dzl), f64::min);
                (ap, ad)
            };

            // predictor
            let h_aff: Vec<DMatrix<f64>> = it.x.iter().map(|x| -x).collect();
            let hl_aff = -&it.xl;
            let aff = solve_dir(&h_aff, &hl_aff);
            let (ap, ad) = steps(&aff);
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let gap_aff = (0..self.psd.len())
                .map(|k| inner(&(&it.x[k] + &aff.dx[k] * ap), &(&it.z[k] + &aff.dz[k] * ad)))
                .sum::<f64>()
                + (&it.xl + &aff.dxl * ap).dot(&(&it.zl + &aff.dzl * ad));
            let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3).max(if pinf.max(dinf) > 1e-6 { 0.1 } else { 0.0 });

            // corrector: H = σμZ⁻¹ − X − dXa dZa Z⁻¹
            let h: Vec<DMatrix<f64>> = (0..self.psd.len())
                .map(|k| &zinv[k] * (sigma * mu) - &it.x[k] - &aff.dx[k] * &aff.dz[k] * &zinv[k])
                .collect();
            let hl = DVector::from_iterator(
                self.lin.len(),
                (0..self.lin.len()).map(|k| (sigma * mu - aff.dxl[k] * aff.dzl[k]) / it.zl[k] - it.xl[k]),
            );
            let dir = solve_dir(&h, &hl);
            let (ap, ad) = steps(&dir);
            let ap = (opts.step_fraction * ap).min(1.0);
            let ad = (opts.step_fraction * ad).min(1.0);
            if !(ap > 1e-12 && ad > 1e-12) || !ap.is_finite() || !ad.is_finite() {
                break;
            }
            for k in 0..self.psd.len() {
                it.x[k] += &dir.dx[k] * ap;
                it.z[k] += &dir.dz[k] * ad;
            }
            it.xl += &dir.dxl * ap;
            it.zl += &dir.dzl * ad;
            it.y += &dir.dy * ad;
        }
        if let Some((obj, y)) = best {
            last.status = IpmStatus::Feasible;
            last.dual_obj = obj;
            last.y = y;
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_lp() {
        // max y s.t. 1 − y >= 0  → y = 1
        let p = DualFormSdp {
            m: 1,
            b: DVector::from_element(1, 1.0),
            psd: vec![],
            lin: vec![LinRow { c: 1.0, a: vec![(0, 1.0)] }],
        };
        let r = p.solve(&IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Optimal);
        assert!((r.y[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn eigenvalue_sdp() {
        // max y s.t. C − y I ⪰ 0 → λ_min(C)
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = DualFormSdp {
            m: 1,
            b: DVector::from_element(1, 1.0),
            psd: vec![PsdBlock { c: c.clone(), a: vec![VarMatrix::new(0, vec![(0, 0, 1.0), (1, 1, 1.0)])] }],
            lin: vec![],
        };
        let r = p.solve(&IpmOptions::default());
        assert_eq!(r.status, IpmStatus::Optimal);
        let lmin = c.symmetric_eigenvalues().min();
        assert!((r.y[0] - lmin).abs() < 1e-7, "{} vs {}", r.y[0], lmin);
    }

    #[test]
    fn infeasible_lmi_is_detected() {
        // −1 − y ⪰ 0 and y ⪰ 0 cannot both hold
        let p = DualFormSdp {
            m: 1,
            b: DVector::zeros(1),
            psd: vec![
                PsdBlock { c: DMatrix::from_element(1, 1, -1.0), a: vec![VarMatrix::new(0, vec![(0, 0, 1.0)])] },
                PsdBlock { c: DMatrix::zeros(1, 1), a: vec![VarMatrix::new(0, vec![(0, 0, -1.0)])] },
            ],
            lin: vec![],
        };
        let r = p.solve(&IpmOptions::default());
        assert!(matches!(r.status, IpmStatus::DualInfeasible | IpmStatus::Stalled), "{:?}", r.status);
    }
}
