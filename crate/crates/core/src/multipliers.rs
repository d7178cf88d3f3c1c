//! Multiplier classes for the shifted activations, rendered as constraint sets
//! over the multiplier matrix `P` for the SDP assembler.
//!
//! Every builder returns a [`MultiplierSet`]: its own small [`SdpProblem`]
//! (variables + class constraints), the affine expression of `P` in those
//! variables and named sub-blocks for reporting. `P` acts on the output of the
//! matching filter from [`crate::filters`].

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::SectorSlopeBounds;
use crate::model::ShiftedLoop;
use crate::sdp::expr::{AffineMatrix, LinExpr, VarId};
use crate::sdp::problem::SdpProblem;

pub const DEFAULT_VERTEX_CAP: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiplierError {
    #[error("full-block multiplier needs {required} box vertices but the cap is {cap}; use the diagonal circle criterion (diag-c) or raise --vertex-cap")]
    VertexCap { required: String, cap: usize },
    #[error("{structure} Zames-Falb multipliers exploit repeated nonlinearities and may only be used for bias-free networks with one activation kind and steady state x* = 0 ({reason})")]
    RepeatedNotAdmissible { structure: &'static str, reason: String },
    #[error("odd Zames-Falb multipliers need an odd activation everywhere and v* = 0 ({0})")]
    OddNotAdmissible(String),
    #[error("inconsistent multiplier specification: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiplierKind {
    DiagCircle,
    FullBlockCircle,
    CircleYakubovich,
    ZamesFalb,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZfStructure {
    /// `M_j = diag(m_j)`.
    Diag,
    /// Block diagonal per layer.
    LayerBlock,
    /// Unstructured `M_j`.
    Full,
}

impl ZfStructure {
    pub fn name(self) -> &'static str {
        match self {
            ZfStructure::Diag => "diagonal",
            ZfStructure::LayerBlock => "layer-block",
            ZfStructure::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CirclePart {
    Diag,
    FullBlock,
    CircleYakubovich,
    None,
}

impl CirclePart {
    /// Rows of the filter output this part reads (`n` neurons).
    pub fn rows(self, n: usize) -> usize {
        match self {
            CirclePart::Diag | CirclePart::FullBlock => 2 * n,
            CirclePart::CircleYakubovich => 4 * n,
            CirclePart::None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSpec {
    pub kind: MultiplierKind,
    /// `(l_minus, l_plus)`: `M_j` exists for `j ∈ [-l_minus, l_plus]`.
    pub zf_order: (usize, usize),
    pub zf_structure: ZfStructure,
    pub odd_nonlinearity: bool,
    /// Circle-type part used together with Zames-Falb in `Combined`.
    pub circle_part: CirclePart,
    pub vertex_cap: usize,
}

impl MultiplierSpec {
    fn base(kind: MultiplierKind) -> Self {
        MultiplierSpec {
            kind,
            zf_order: (0, 0),
            zf_structure: ZfStructure::Diag,
            odd_nonlinearity: false,
            circle_part: CirclePart::None,
            vertex_cap: DEFAULT_VERTEX_CAP,
        }
    }

    pub fn diag_circle() -> Self {
        MultiplierSpec::base(MultiplierKind::DiagCircle)
    }

    pub fn full_block_circle() -> Self {
        MultiplierSpec::base(MultiplierKind::FullBlockCircle)
    }

    pub fn circle_yakubovich() -> Self {
        MultiplierSpec::base(MultiplierKind::CircleYakubovich)
    }

    pub fn zames_falb(l_minus: usize, l_plus: usize, structure: ZfStructure) -> Self {
        MultiplierSpec { zf_order: (l_minus, l_plus), zf_structure: structure, ..MultiplierSpec::base(MultiplierKind::ZamesFalb) }
    }

    pub fn combined(l_minus: usize, l_plus: usize, structure: ZfStructure, circle: CirclePart) -> Self {
        MultiplierSpec {
            zf_order: (l_minus, l_plus),
            zf_structure: structure,
            circle_part: circle,
            ..MultiplierSpec::base(MultiplierKind::Combined)
        }
    }

    pub fn with_vertex_cap(mut self, cap: usize) -> Self {
        self.vertex_cap = cap;
        self
    }

    pub fn with_odd(mut self, odd: bool) -> Self {
        self.odd_nonlinearity = odd;
        self
    }

    pub fn has_zf(&self) -> bool {
        matches!(self.kind, MultiplierKind::ZamesFalb | MultiplierKind::Combined)
    }

    /// Circle-type part actually in effect.
    pub fn circle(&self) -> CirclePart {
        match self.kind {
            MultiplierKind::DiagCircle => CirclePart::Diag,
            MultiplierKind::FullBlockCircle => CirclePart::FullBlock,
            MultiplierKind::CircleYakubovich => CirclePart::CircleYakubovich,
            MultiplierKind::ZamesFalb => CirclePart::None,
            MultiplierKind::Combined => self.circle_part,
        }
    }

    /// `ℓ = max(l_-, l_+)` if a Zames-Falb part is present.
    pub fn zf_depth(&self) -> Option<usize> {
        self.has_zf().then(|| self.zf_order.0.max(self.zf_order.1))
    }

    /// Short label such as `diag-c` or `aczf-1-r+c`.
    pub fn label(&self) -> String {
        let circle = match self.circle() {
            CirclePart::Diag => "c",
            CirclePart::FullBlock => "fbc",
            CirclePart::CircleYakubovich => "cy",
            CirclePart::None => "",
        };
        if !self.has_zf() {
            return format!("{}-{}", if circle == "c" { "diag" } else { "full" }, circle);
        }
        let (lm, lp) = self.zf_order;
        let s = match self.zf_structure {
            ZfStructure::Diag => "",
            ZfStructure::LayerBlock => "-rl",
            ZfStructure::Full => "-r",
        };
        let mut out = format!("zf({lm},{lp}){s}");
        if !circle.is_empty() {
            out.push('+');
            out.push_str(circle);
        }
        if self.odd_nonlinearity {
            out.push_str("-odd");
        }
        out
    }

    pub fn validate(&self) -> Result<(), MultiplierError> {
        if self.kind == MultiplierKind::ZamesFalb && self.circle_part != CirclePart::None {
            return Err(MultiplierError::Spec("a pure Zames-Falb multiplier has no circle part; use Combined".into()));
        }
        if self.kind == MultiplierKind::Combined && self.circle_part == CirclePart::None {
            // allowed: Combined with no circle part is the plain Zames-Falb class
        }
        if self.odd_nonlinearity && !self.has_zf() {
            return Err(MultiplierError::Spec("--odd only applies to Zames-Falb multipliers".into()));
        }
        Ok(())
    }

    /// Checks the repeated-nonlinearity and oddness requirements against a loop.
    pub fn check_admissible(&self, lp: &ShiftedLoop) -> Result<(), MultiplierError> {
        self.validate()?;
        if !self.has_zf() {
            return Ok(());
        }
        if self.zf_structure != ZfStructure::Diag {
            let structure = self.zf_structure.name();
            if !lp.model.nn.is_bias_free() {
                return Err(MultiplierError::RepeatedNotAdmissible { structure, reason: "the network carries bias terms".into() });
            }
            if lp.model.nn.uniform_activation().is_none() {
                return Err(MultiplierError::RepeatedNotAdmissible { structure, reason: "layers use different activations".into() });
            }
            if !lp.shift.is_origin() {
                return Err(MultiplierError::RepeatedNotAdmissible { structure, reason: "the steady state is not the origin".into() });
            }
        }
        if self.odd_nonlinearity {
            if !lp.activations.iter().all(|a| a.is_odd()) {
                return Err(MultiplierError::OddNotAdmissible("activation is not odd".into()));
            }
            if lp.shift.v_star.iter().any(|&v| v != 0.0) {
                return Err(MultiplierError::OddNotAdmissible("v* is not zero".into()));
            }
        }
        Ok(())
    }
}

/// Expected number of multiplier decision variables for a class.
pub fn decision_variable_count(spec: &MultiplierSpec, widths: &[usize]) -> usize {
    let n: usize = widths.iter().sum();
    let circle = match spec.circle() {
        CirclePart::Diag => n,
        CirclePart::FullBlock => n * (2 * n + 1),
        CirclePart::CircleYakubovich => 2 * n * (4 * n + 1),
        CirclePart::None => 0,
    };
    let zf = if spec.has_zf() {
        let taps = spec.zf_order.0 + spec.zf_order.1 + 1;
        taps * match spec.zf_structure {
            ZfStructure::Diag => n,
            ZfStructure::LayerBlock => widths.iter().map(|w| w * w).sum(),
            ZfStructure::Full => n * n,
        }
    } else {
        0
    };
    circle + zf
}

/// `(row, col, var)` of every free entry of one tap.
pub type TapEntries = Vec<(usize, usize, VarId)>;

/// Zames-Falb tap layout: variable ids of every entry of every `M_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZfLayout {
    pub n: usize,
    pub l_minus: usize,
    pub l_plus: usize,
    pub structure: ZfStructure,
    pub odd: bool,
    /// `(j, entries)` with `entries = [(row, col, var)]`, `j` from `-l_minus` to `l_plus`.
    pub taps: Vec<(i64, TapEntries)>,
    /// Slope bounds actually used in the sector transformation.
    pub mu: DVector<f64>,
    pub nu: DVector<f64>,
}

impl ZfLayout {
    pub fn depth(&self) -> usize {
        self.l_minus.max(self.l_plus)
    }

    /// Tap matrices `M_j` evaluated at `x` (local variables).
    pub fn taps_value(&self, x: &DVector<f64>) -> BTreeMap<i64, DMatrix<f64>> {
        self.taps
            .iter()
            .map(|(j, entries)| {
                let mut m = DMatrix::zeros(self.n, self.n);
                for &(r, c, v) in entries {
                    m[(r, c)] = x[v];
                }
                (*j, m)
            })
            .collect()
    }

    /// Local variable vector reproducing the given tap matrices.
    pub fn vars_from_taps(&self, taps: &BTreeMap<i64, DMatrix<f64>>, n_vars: usize) -> DVector<f64> {
        let mut x = DVector::zeros(n_vars);
        for (j, entries) in &self.taps {
            let m = &taps[j];
            for &(r, c, v) in entries {
                x[v] = m[(r, c)];
            }
        }
        x
    }
}

/// Constraint set describing one multiplier class.
#[derive(Debug, Clone)]
pub struct MultiplierSet {
    pub program: SdpProblem,
    pub p: AffineMatrix,
    pub components: Vec<(String, AffineMatrix)>,
    pub decision_variables: usize,
    pub zf: Option<ZfLayout>,
    /// Diagonal-circle weights `λ` when present.
    pub lambda: Option<Vec<VarId>>,
}

impl MultiplierSet {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn valuation(&self, x: &DVector<f64>) -> MultiplierValuation {
        let p = self.p.eval(x);
        let p = (&p + p.transpose()) * 0.5;
        let mut components: BTreeMap<String, DMatrix<f64>> =
            self.components.iter().map(|(name, e)| (name.clone(), e.eval(x))).collect();
        if let Some(zf) = &self.zf {
            for (j, m) in zf.taps_value(x) {
                components.insert(format!("M_{j}"), m);
            }
        }
        MultiplierValuation { p, components }
    }
}

/// Concrete multiplier after a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierValuation {
    pub p: DMatrix<f64>,
    pub components: BTreeMap<String, DMatrix<f64>>,
}

/// Static multiplier `[[-2ᾱβ̄Λ, (ᾱ+β̄)Λ], [(ᾱ+β̄)Λ, -2Λ]]`, `Λ = diag(λ) ⪰ 0`.
pub fn build_diag_circle(alpha: &DVector<f64>, beta: &DVector<f64>) -> MultiplierSet {
    let n = alpha.len();
    let mut program = SdpProblem::new();
    let lambda = program.new_vars(n);
    let mut p = AffineMatrix::zeros(2 * n, 2 * n);
    let mut lam = AffineMatrix::zeros(n, n);
    for j in 0..n {
        let v = lambda[j];
        program.add_nonneg(format!("lambda[{j}] >= 0"), LinExpr::var(v));
        p.add_term(v, j, j, -2.0 * alpha[j] * beta[j]);
        p.add_term(v, j, n + j, alpha[j] + beta[j]);
        p.add_term(v, n + j, j, alpha[j] + beta[j]);
        p.add_term(v, n + j, n + j, -2.0);
        lam.add_term(v, j, j, 1.0);
    }
    MultiplierSet {
        program,
        p,
        components: vec![("Lambda".into(), lam)],
        decision_variables: n,
        zf: None,
        lambda: Some(lambda),
    }
}

/// Vertices of the box `[lo, hi]`; degenerate coordinates contribute one value.
pub fn box_vertices(lo: &[f64], hi: &[f64], cap: usize) -> Result<Vec<Vec<f64>>, MultiplierError> {
    let free: Vec<usize> = (0..lo.len()).filter(|&i| lo[i] != hi[i]).collect();
    if free.len() >= 63 || (1usize << free.len()) > cap {
        return Err(MultiplierError::VertexCap { required: format!("2^{}", free.len()), cap });
    }
    let count = 1usize << free.len();
    Ok((0..count)
        .map(|mask| {
            let mut v = lo.to_vec();
            for (bit, &i) in free.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    v[i] = hi[i];
                }
            }
            v
        })
        .collect())
}

/// Full-block class over a box of diagonal `Δ` of dimension `m`:
/// `Π ∈ S^{2m}`, `Π₂₂ ⪯ 0`, `[I; Δ_v]ᵀ Π [I; Δ_v] ⪰ 0` at every vertex.
fn build_full_block(lo: &[f64], hi: &[f64], cap: usize, name: &str) -> Result<MultiplierSet, MultiplierError> {
    let m = lo.len();
    let vertices = box_vertices(lo, hi, cap)?;
    let mut program = SdpProblem::new();
    let pi = program.new_sym(2 * m);
    let p = pi.expr();

    let mut neg22 = AffineMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            neg22.add_term(pi.var(m + i, m + j), i, j, -1.0);
        }
    }
    program.add_psd(format!("{name}: Pi22 <= 0"), neg22);

    for (k, d) in vertices.iter().enumerate() {
        // entry (a,b) = Π[a,b] + δ_b Π[a,m+b] + δ_a Π[m+a,b] + δ_a δ_b Π[m+a,m+b]
        let mut e = AffineMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                e.add_term(pi.var(a, b), a, b, 1.0);
                e.add_term(pi.var(a, m + b), a, b, d[b]);
                e.add_term(pi.var(m + a, b), a, b, d[a]);
                e.add_term(pi.var(m + a, m + b), a, b, d[a] * d[b]);
            }
        }
        program.add_psd(format!("{name}: vertex {k}"), e);
    }
    let decision_variables = pi.count();
    Ok(MultiplierSet {
        program,
        p: p.clone(),
        components: vec![("Pi".into(), p)],
        decision_variables,
        zf: None,
        lambda: None,
    })
}

/// Full-block circle class `Π ∈ S^{2n}` over the sector box `[α, β]`.
pub fn build_full_block_circle(
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    vertex_cap: usize,
) -> Result<MultiplierSet, MultiplierError> {
    build_full_block(alpha.as_slice(), beta.as_slice(), vertex_cap, "full-block circle")
}

/// Full-block circle / Yakubovich class `Π ∈ S^{4n}` over `[α; μ] … [β; ν]`,
/// acting on `(ṽ_k, ṽ_k - ṽ_{k-1}, w̃_k, w̃_k - w̃_{k-1})`.
pub fn build_circle_yakubovich(
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    vertex_cap: usize,
) -> Result<MultiplierSet, MultiplierError> {
    let lo: Vec<f64> = alpha.iter().chain(mu.iter()).copied().collect();
    let hi: Vec<f64> = beta.iter().chain(nu.iter()).copied().collect();
    build_full_block(&lo, &hi, vertex_cap, "circle/Yakubovich")
}

/// Parameters of a Zames-Falb part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZfParams {
    pub l_minus: usize,
    pub l_plus: usize,
    pub structure: ZfStructure,
    pub odd: bool,
}

fn structure_mask(structure: ZfStructure, widths: &[usize]) -> Vec<(usize, usize)> {
    let n: usize = widths.iter().sum();
    match structure {
        ZfStructure::Diag => (0..n).map(|i| (i, i)).collect(),
        ZfStructure::Full => (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
        ZfStructure::LayerBlock => {
            let mut out = Vec::new();
            let mut off = 0;
            for &w in widths {
                for i in off..off + w {
                    for j in off..off + w {
                        out.push((i, j));
                    }
                }
                off += w;
            }
            out
        }
    }
}

/// Sector transformation `T = [[I ⊗ diag(μ), -I], [-I ⊗ diag(ν), I]]` with
/// `ℓ + 1` repetitions, acting on `(ṽ_k..ṽ_{k-ℓ}, w̃_k..w̃_{k-ℓ})`.
pub fn sector_transform(mu: &DVector<f64>, nu: &DVector<f64>, depth: usize) -> DMatrix<f64> {
    let n = mu.len();
    let h = n * (depth + 1);
    let mut t = DMatrix::zeros(2 * h, 2 * h);
    for rep in 0..=depth {
        for j in 0..n {
            let k = rep * n + j;
            t[(k, k)] = mu[j];
            t[(k, h + k)] = -1.0;
            t[(h + k, k)] = -nu[j];
            t[(h + k, h + k)] = 1.0;
        }
    }
    t
}

/// Block matrix `P̃` from the taps: first block row `M_0, M_{-1}, …, M_{-ℓ}`,
/// first block column `M_0, M_1, …, M_ℓ`, zero elsewhere.
pub fn pseudo_zf_block(taps: &BTreeMap<i64, AffineMatrix>, n: usize, depth: usize) -> AffineMatrix {
    let h = n * (depth + 1);
    let mut pt = AffineMatrix::zeros(h, h);
    if let Some(m0) = taps.get(&0) {
        pt.place(m0, 0, 0);
    }
    for d in 1..=depth as i64 {
        if let Some(m) = taps.get(&-d) {
            pt.place(m, 0, d as usize * n);
        }
        if let Some(m) = taps.get(&d) {
            pt.place(m, d as usize * n, 0);
        }
    }
    pt
}

/// Acausal Zames-Falb class `P = Tᵀ [[0, P̃ᵀ], [P̃, 0]] T` with doubly
/// hyperdominant taps (or the odd-nonlinearity variant).
pub fn build_zames_falb(
    mu: &DVector<f64>,
    nu: &DVector<f64>,
    params: ZfParams,
    widths: &[usize],
) -> Result<MultiplierSet, MultiplierError> {
    let n = mu.len();
    if widths.iter().sum::<usize>() != n {
        return Err(MultiplierError::Spec(format!("layer widths {widths:?} do not sum to {n}")));
    }
    let depth = params.l_minus.max(params.l_plus);
    let mask = structure_mask(params.structure, widths);
    let mut program = SdpProblem::new();
    let mut tap_exprs: BTreeMap<i64, AffineMatrix> = BTreeMap::new();
    let mut layout = Vec::new();
    let orders: Vec<i64> = (-(params.l_minus as i64)..=params.l_plus as i64).collect();
    for &j in &orders {
        let mut m = AffineMatrix::zeros(n, n);
        let mut entries = Vec::with_capacity(mask.len());
        for &(r, c) in &mask {
            let v = program.new_var();
            m.add_term(v, r, c, 1.0);
            entries.push((r, c, v));
        }
        tap_exprs.insert(j, m);
        layout.push((j, entries));
    }
    let decision_variables = program.n_vars();

    // Row and column sums of Σ_j M_j.
    let mut row_sum = vec![LinExpr::default(); n];
    let mut col_sum = vec![LinExpr::default(); n];
    if params.odd {
        // diag(M_0)_i dominates the absolute values of all other entries in
        // its row and column of the stacked taps.
        for (j, entries) in &layout {
            for &(r, c, v) in entries {
                if *j == 0 && r == c {
                    row_sum[r].add(v, 1.0);
                    col_sum[c].add(v, 1.0);
                    continue;
                }
                let t = program.new_var();
                let mut up = LinExpr::var(t);
                up.add(v, -1.0);
                program.add_nonneg(format!("|M_{j}[{r},{c}]| bound (+)"), up);
                let mut dn = LinExpr::var(t);
                dn.add(v, 1.0);
                program.add_nonneg(format!("|M_{j}[{r},{c}]| bound (-)"), dn);
                row_sum[r].add(t, -1.0);
                col_sum[c].add(t, -1.0);
            }
        }
    } else {
        for (j, entries) in &layout {
            for &(r, c, v) in entries {
                if !(*j == 0 && r == c) {
                    let mut e = LinExpr::default();
                    e.add(v, -1.0);
                    program.add_nonneg(format!("M_{j}[{r},{c}] <= 0"), e);
                }
                row_sum[r].add(v, 1.0);
                col_sum[c].add(v, 1.0);
            }
        }
    }
    for (i, e) in row_sum.into_iter().enumerate() {
        program.add_nonneg(format!("row sum {i} >= 0"), e);
    }
    for (i, e) in col_sum.into_iter().enumerate() {
        program.add_nonneg(format!("column sum {i} >= 0"), e);
    }

    let pt = pseudo_zf_block(&tap_exprs, n, depth);
    let h = n * (depth + 1);
    let mut pi = AffineMatrix::zeros(2 * h, 2 * h);
    pi.place(&pt.transpose(), 0, h);
    pi.place(&pt, h, 0);
    let t = sector_transform(mu, nu, depth);
    let p = pi.congruence(&t).symmetrized();

    Ok(MultiplierSet {
        program,
        p,
        components: vec![("P_tilde".into(), pt)],
        decision_variables,
        zf: Some(ZfLayout {
            n,
            l_minus: params.l_minus,
            l_plus: params.l_plus,
            structure: params.structure,
            odd: params.odd,
            taps: layout,
            mu: mu.clone(),
            nu: nu.clone(),
        }),
        lambda: None,
    })
}

/// `P = blkdiag(P^ZF, P^circle)`; either part may be absent.
pub fn assemble_combined(zf: Option<MultiplierSet>, circle: Option<MultiplierSet>) -> MultiplierSet {
    match (zf, circle) {
        (Some(z), None) => z,
        (None, Some(c)) => c,
        (None, None) => panic!("a multiplier needs at least one part"),
        (Some(z), Some(c)) => {
            let mut program = z.program.clone();
            let off = program.absorb(&c.program);
            let cp = c.p.offset_vars(off);
            let p = AffineMatrix::block_diag(&[&z.p, &cp]);
            let mut components = z.components.clone();
            components.extend(c.components.iter().map(|(name, e)| (name.clone(), e.offset_vars(off))));
            MultiplierSet {
                program,
                p,
                components,
                decision_variables: z.decision_variables + c.decision_variables,
                zf: z.zf,
                lambda: c.lambda.map(|l| l.into_iter().map(|v| v + off).collect()),
            }
        }
    }
}

/// Neuron groups sharing one repeated nonlinearity for a structure.
pub fn repetition_groups(structure: ZfStructure, widths: &[usize]) -> Vec<Range<usize>> {
    let n: usize = widths.iter().sum();
    match structure {
        ZfStructure::Diag => (0..n).map(|j| j..j + 1).collect(),
        ZfStructure::Full => std::iter::once(0..n).collect(),
        ZfStructure::LayerBlock => {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let r = off..off + w;
                    off += w;
                    r
                })
                .collect()
        }
    }
}

/// Builds the constraint set of `spec` for a loop and its local bounds.
pub fn build_multiplier(
    spec: &MultiplierSpec,
    lp: &ShiftedLoop,
    bounds: &SectorSlopeBounds,
) -> Result<MultiplierSet, MultiplierError> {
    spec.check_admissible(lp)?;
    let circle = match spec.circle() {
        CirclePart::Diag => Some(build_diag_circle(&bounds.alpha, &bounds.beta)),
        CirclePart::FullBlock => Some(build_full_block_circle(&bounds.alpha, &bounds.beta, spec.vertex_cap)?),
        CirclePart::CircleYakubovich => Some(build_circle_yakubovich(
            &bounds.alpha,
            &bounds.beta,
            &bounds.mu,
            &bounds.nu,
            spec.vertex_cap,
        )?),
        CirclePart::None => None,
    };
    let zf = if spec.has_zf() {
        let groups = repetition_groups(spec.zf_structure, &lp.widths);
        let (mu, nu) = bounds.uniform_slopes(&groups);
        Some(build_zames_falb(
            &mu,
            &nu,
            ZfParams {
                l_minus: spec.zf_order.0,
                l_plus: spec.zf_order.1,
                structure: spec.zf_structure,
                odd: spec.odd_nonlinearity,
            },
            &lp.widths,
        )?)
    } else {
        None
    };
    Ok(assemble_combined(zf, circle))
}

/// Block-Toeplitz matrix over `N + 1` time steps with block `(a, b) = M_{b-a}`,
/// so that `Σ_{k≤N} v̲_kᵀ P̃ w̲_k = vᵀ M w` for stacked signals.
pub fn zames_falb_big_matrix(taps: &BTreeMap<i64, DMatrix<f64>>, n: usize, horizon: usize) -> DMatrix<f64> {
    let s = horizon + 1;
    let mut m = DMatrix::zeros(n * s, n * s);
    for a in 0..s {
        for b in 0..s {
            let j = b as i64 - a as i64;
            if let Some(t) = taps.get(&j) {
                m.view_mut((a * n, b * n), (n, n)).copy_from(t);
            }
        }
    }
    m
}

/// Off-diagonals `<= tol` and row/column sums `>= -tol`.
pub fn is_doubly_hyperdominant(m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > tol {
                return false;
            }
        }
    }
    m.row_iter().all(|r| r.sum() >= -tol) && m.column_iter().all(|c| c.sum() >= -tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_circle_unit_sector() {
        let set = build_diag_circle(&DVector::from_element(1, 0.0), &DVector::from_element(1, 1.0));
        let p = set.p.eval(&DVector::from_element(1, 1.0));
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -2.0]));
        assert_eq!(set.decision_variables, 1);
    }

    #[test]
    fn static_zf_matches_diag_circle() {
        let mu = DVector::from_element(1, 0.0);
        let nu = DVector::from_element(1, 1.0);
        let params = ZfParams { l_minus: 0, l_plus: 0, structure: ZfStructure::Diag, odd: false };
        let set = build_zames_falb(&mu, &nu, params, &[1]).unwrap();
        let p = set.p.eval(&DVector::from_element(set.program.n_vars(), 1.0));
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -2.0]));
        let circle = build_diag_circle(&mu, &nu).p.eval(&DVector::from_element(1, 1.0));
        assert_eq!(p, circle);
    }

    #[test]
    fn hyperdominant_example_taps() {
        let m0 = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        assert!(is_doubly_hyperdominant(&m0, 0.0));
        let params = ZfParams { l_minus: 0, l_plus: 0, structure: ZfStructure::Full, odd: false };
        let set = build_zames_falb(&DVector::zeros(2), &DVector::from_element(2, 1.0), params, &[2]).unwrap();
        let layout = set.zf.as_ref().unwrap();
        let taps = BTreeMap::from([(0, m0)]);
        let x = layout.vars_from_taps(&taps, set.program.n_vars());
        assert_eq!(set.program.max_violation(&x), 0.0);
    }

    #[test]
    fn vertex_cap_is_enforced() {
        let lo = DVector::zeros(13);
        let hi = DVector::from_element(13, 1.0);
        let err = build_full_block_circle(&lo, &hi, 4096).unwrap_err();
        assert!(matches!(err, MultiplierError::VertexCap { .. }));
        assert!(err.to_string().contains("diag-c"));
    }

    #[test]
    fn degenerate_coordinates_do_not_multiply_vertices() {
        let v = box_vertices(&[0.0, 0.0, 0.2], &[1.0, 0.0, 0.2], 16).unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn combined_dimension_bookkeeping() {
        let n = 3;
        let a = DVector::zeros(n);
        let b = DVector::from_element(n, 1.0);
        let params = ZfParams { l_minus: 1, l_plus: 1, structure: ZfStructure::Diag, odd: false };
        let zf = build_zames_falb(&a, &b, params, &[n]).unwrap();
        let cy = build_circle_yakubovich(&a, &b, &a, &b, 4096).unwrap();
        let comb = assemble_combined(Some(zf), Some(cy));
        assert_eq!(comb.dim(), 8 * n);
    }

    #[test]
    fn labels() {
        assert_eq!(MultiplierSpec::diag_circle().label(), "diag-c");
        assert_eq!(MultiplierSpec::combined(1, 1, ZfStructure::Full, CirclePart::Diag).label(), "zf(1,1)-r+c");
    }
}
