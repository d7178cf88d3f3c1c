//! SDPA sparse format export.
//!
//! SDPA reads `min cᵀx s.t. Σ xᵢFᵢ − F₀ ⪰ 0`; a constraint `G₀ + Σ xᵢGᵢ ⪰ 0`
//! is written with `F₀ = −G₀`, `Fᵢ = Gᵢ`. Non-negativity rows form one
//! diagonal block.

use std::fmt::Write as _;
use std::path::Path;

use super::expr::AffineMatrix;
use super::problem::SdpProblem;
use super::SdpError;

pub fn to_sdpa_string(problem: &SdpProblem) -> String {
    let mut out = String::new();
    let nb = problem.psd.len() + usize::from(!problem.nonneg.is_empty());
    let _ = writeln!(out, "\"iqcroa export: {} variables\"", problem.n_vars());
    let _ = writeln!(out, "{}", problem.n_vars());
    let _ = writeln!(out, "{nb}");
    let mut sizes: Vec<String> = problem.psd.iter().map(|c| c.expr.nrows().to_string()).collect();
    if !problem.nonneg.is_empty() {
        sizes.push(format!("-{}", problem.nonneg.len()));
    }
    let _ = writeln!(out, "{}", sizes.join(" "));
    let c: Vec<String> = (0..problem.n_vars())
        .map(|v| format!("{:.17e}", problem.objective.terms.get(&v).copied().unwrap_or(0.0)))
        .collect();
    let _ = writeln!(out, "{}", c.join(" "));

    let mut lines: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (bi, pc) in problem.psd.iter().enumerate() {
        let e: AffineMatrix = pc.expr.symmetrized();
        let c0 = e.constant_part();
        for j in 0..c0.ncols() {
            for i in 0..=j {
                if c0[(i, j)] != 0.0 {
                    lines.push((0, bi + 1, i + 1, j + 1, -c0[(i, j)]));
                }
            }
        }
        for (v, ent) in e.terms() {
            for (&(i, j), &x) in ent {
                if i <= j {
                    lines.push((v + 1, bi + 1, i + 1, j + 1, x));
                }
            }
        }
    }
    let lb = problem.psd.len() + 1;
    for (k, nc) in problem.nonneg.iter().enumerate() {
        if nc.expr.constant != 0.0 {
            lines.push((0, lb, k + 1, k + 1, -nc.expr.constant));
        }
        for (&v, &x) in &nc.expr.terms {
            lines.push((v + 1, lb, k + 1, k + 1, x));
        }
    }
    lines.sort_by_key(|l| (l.0, l.1, l.2, l.3));
    for (m, b, i, j, x) in lines {
        let _ = writeln!(out, "{m} {b} {i} {j} {x:.17e}");
    }
    out
}

pub fn export_sdpa(problem: &SdpProblem, path: &Path) -> Result<(), SdpError> {
    std::fs::write(path, to_sdpa_string(problem)).map_err(|e| SdpError::Io(format!("{}: {e}", path.display())))
}
