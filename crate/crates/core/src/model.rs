//! Plant and neural-network descriptions, steady-state computation and the
//! shifted (origin-centred, bias-free) loop used by every later stage.
//!
//! The closed loop is
//!
//! ```txt
//! x_{k+1} = A x_k + B u_k,   y_k = C x_k,   u_k = NN(y_k)
//! ```
//!
//! with a feed-forward network `v^i = W^{i-1} w^{i-1} + b^{i-1}`,
//! `w^i = φ^i(v^i)`, `u = W^l w^l + b^l`, `w^0 = y`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dimension mismatch in {what}: {detail}")]
    Dimension { what: String, detail: String },
    #[error("unknown activation `{0}` (expected relu, tanh or sigmoid)")]
    UnknownActivation(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("steady-state search did not converge (best residual {residual:.3e} after {iterations} iterations)")]
    NoSteadyState { residual: f64, iterations: usize },
}

/// Scalar activation applied element-wise within one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self, ModelError> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(ModelError::UnknownActivation(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Tanh => t.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-t).exp()),
        }
    }

    /// Derivative; for relu the kink at 0 uses the left derivative 0.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-t).exp());
                s * (1.0 - s)
            }
        }
    }

    /// Point at which the derivative is maximal (smooth activations only).
    pub fn derivative_peak(self) -> Option<f64> {
        match self {
            Activation::Relu => None,
            Activation::Tanh | Activation::Sigmoid => Some(0.0),
        }
    }

    pub fn is_odd(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

/// Discrete-time LTI plant `(A, B, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl PlantModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self, ModelError> {
        if !a.is_square() {
            return Err(dim("A", format!("expected square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(dim("B", format!("expected {} rows, got {}", a.nrows(), b.nrows())));
        }
        if c.ncols() != a.nrows() {
            return Err(dim("C", format!("expected {} columns, got {}", a.nrows(), c.ncols())));
        }
        for (name, m) in [("A", &a), ("B", &b), ("C", &c)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(name.to_string()));
            }
        }
        Ok(PlantModel { a, b, c })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }
}

/// One hidden layer: `w = φ(W w_prev + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feed-forward network with hidden layers and an affine output map.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNetwork {
    pub layers: Vec<Layer>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

/// Result of one forward pass; `v` and `w` are stacked over all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub w: DVector<f64>,
}

impl NeuralNetwork {
    pub fn new(layers: Vec<Layer>, w_out: DMatrix<f64>, b_out: DVector<f64>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(dim("nn.layers", "at least one hidden layer is required".into()));
        }
        let mut prev = layers[0].weight.ncols();
        for (i, layer) in layers.iter().enumerate() {
            let what = format!("nn.layers[{i}]");
            if layer.weight.ncols() != prev {
                return Err(dim(
                    &what,
                    format!("W has {} columns, expected {}", layer.weight.ncols(), prev),
                ));
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(dim(
                    &what,
                    format!("b has length {}, expected {}", layer.bias.len(), layer.weight.nrows()),
                ));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(what));
            }
            prev = layer.weight.nrows();
        }
        if w_out.ncols() != prev {
            return Err(dim("nn.W_out", format!("has {} columns, expected {}", w_out.ncols(), prev)));
        }
        if b_out.len() != w_out.nrows() {
            return Err(dim("nn.b_out", format!("has length {}, expected {}", b_out.len(), w_out.nrows())));
        }
        if w_out.iter().chain(b_out.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("nn.W_out/b_out".into()));
        }
        Ok(NeuralNetwork { layers, w_out, b_out })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::width).collect()
    }

    /// Total number of neurons `n`.
    pub fn neurons(&self) -> usize {
        self.layers.iter().map(Layer::width).sum()
    }

    /// Offset of each layer inside the stacked neuron vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.width();
                o
            })
            .collect()
    }

    /// Activation of every neuron in stacked order.
    pub fn activations(&self) -> Vec<Activation> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.activation, l.width()))
            .collect()
    }

    pub fn is_bias_free(&self) -> bool {
        self.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)) && self.b_out.iter().all(|&b| b == 0.0)
    }

    /// Single activation kind shared by every layer, if any.
    pub fn uniform_activation(&self) -> Option<Activation> {
        let first = self.layers[0].activation;
        self.layers.iter().all(|l| l.activation == first).then_some(first)
    }

    pub fn forward(&self, y: &DVector<f64>) -> Forward {
        let n = self.neurons();
        let mut v = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        let mut prev = y.clone();
        let mut off = 0;
        for layer in &self.layers {
            let pre = &layer.weight * &prev + &layer.bias;
            let post = pre.map(|t| layer.activation.eval(t));
            v.rows_mut(off, layer.width()).copy_from(&pre);
            w.rows_mut(off, layer.width()).copy_from(&post);
            off += layer.width();
            prev = post;
        }
        let u = &self.w_out * prev + &self.b_out;
        Forward { u, v, w }
    }

    /// Jacobian `∂u/∂y` at `y`.
    pub fn jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut prev = y.clone();
        let mut jac = DMatrix::identity(y.len(), y.len());
        for layer in &self.layers {
            let pre = &layer.weight * &prev + &layer.bias;
            let mut lin = &layer.weight * &jac;
            for (i, mut row) in lin.row_iter_mut().enumerate() {
                row *= layer.activation.derivative(pre[i]);
            }
            jac = lin;
            prev = pre.map(|t| layer.activation.eval(t));
        }
        &self.w_out * jac
    }
}

/// Equilibrium of the closed loop together with the neuron values it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
    pub y_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub w_star: DVector<f64>,
    pub residual: f64,
}

impl SteadyState {
    /// Steady state at the origin for a bias-free network.
    pub fn origin(plant: &PlantModel, nn: &NeuralNetwork) -> Self {
        let n = nn.neurons();
        SteadyState {
            x_star: DVector::zeros(plant.nx()),
            u_star: DVector::zeros(plant.nu()),
            y_star: DVector::zeros(plant.ny()),
            v_star: DVector::zeros(n),
            w_star: DVector::zeros(n),
            residual: 0.0,
        }
    }

    pub fn is_origin(&self) -> bool {
        self.x_star.iter().all(|&v| v == 0.0) && self.v_star.iter().all(|&v| v == 0.0)
    }
}

/// Plant and network that passed mutual dimension checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopModel {
    pub plant: PlantModel,
    pub nn: NeuralNetwork,
}

impl LoopModel {
    pub fn new(plant: PlantModel, nn: NeuralNetwork) -> Result<Self, ModelError> {
        if nn.input_dim() != plant.ny() {
            return Err(dim(
                "nn.layers[0]",
                format!("W has {} columns, plant output has dimension {}", nn.input_dim(), plant.ny()),
            ));
        }
        if nn.output_dim() != plant.nu() {
            return Err(dim(
                "nn.W_out",
                format!("has {} rows, plant input has dimension {}", nn.output_dim(), plant.nu()),
            ));
        }
        Ok(LoopModel { plant, nn })
    }

    /// One closed-loop step `x ↦ A x + B NN(C x)`.
    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.nn.forward(&(&self.plant.c * x)).u;
        &self.plant.a * x + &self.plant.b * u
    }

    /// `F(x) = (A - I) x + B NN(C x)`.
    pub fn fixed_point_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        self.step(x) - x
    }

    /// Locates a steady state with Newton's method, falling back to damped
    /// fixed-point iteration when the Jacobian is singular or Newton stalls.
    pub fn find_steady_state(&self, guess: Option<&DVector<f64>>) -> Result<SteadyState, ModelError> {
        let nx = self.plant.nx();
        let guess_is_zero = guess.is_none_or(|g| g.iter().all(|&v| v == 0.0));
        if self.nn.is_bias_free() && guess_is_zero {
            return Ok(SteadyState::origin(&self.plant, &self.nn));
        }
        let mut x = guess.cloned().unwrap_or_else(|| DVector::zeros(nx));
        let tol = |x: &DVector<f64>| 1e-10 * (1.0 + x.amax());
        let eye = DMatrix::<f64>::identity(nx, nx);
        let mut best = (f64::INFINITY, x.clone());
        let mut iterations = 0;

        for _ in 0..100 {
            iterations += 1;
            let f = self.fixed_point_residual(&x);
            let r = f.amax();
            if r < best.0 {
                best = (r, x.clone());
            }
            if r <= tol(&x) {
                return Ok(self.steady_state_at(x));
            }
            let y = &self.plant.c * &x;
            let jac = &self.plant.a - &eye + &self.plant.b * self.nn.jacobian(&y) * &self.plant.c;
            let Some(step) = jac.lu().solve(&(-&f)) else { break };
            if !step.iter().all(|s| s.is_finite()) {
                break;
            }
            // Backtracking on the residual norm.
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-6 {
                let cand = &x + &step * t;
                if self.fixed_point_residual(&cand).amax() < r {
                    x = cand;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }

        // Damped fixed-point fallback.
        let mut x = best.1.clone();
        for _ in 0..20_000 {
            iterations += 1;
            let next = self.step(&x);
            x = &x * 0.5 + next * 0.5;
            let r = self.fixed_point_residual(&x).amax();
            if r < best.0 {
                best = (r, x.clone());
            }
            if r <= tol(&x) {
                return Ok(self.steady_state_at(x));
            }
            if !r.is_finite() {
                break;
            }
        }
        Err(ModelError::NoSteadyState { residual: best.0, iterations })
    }

    fn steady_state_at(&self, x: DVector<f64>) -> SteadyState {
        let y = &self.plant.c * &x;
        let fw = self.nn.forward(&y);
        let residual = self.fixed_point_residual(&x).amax();
        SteadyState { x_star: x, u_star: fw.u, y_star: y, v_star: fw.v, w_star: fw.w, residual }
    }

    /// Recentres the loop at `ss` and assembles the interconnection matrices.
    pub fn shift(&self, ss: &SteadyState) -> ShiftedLoop {
        let nn = &self.nn;
        let n = nn.neurons();
        let nx = self.plant.nx();
        let widths = nn.widths();
        let offsets = nn.offsets();

        let q = &nn.layers[0].weight * &self.plant.c;
        let mut n0 = DMatrix::zeros(n, nx);
        n0.view_mut((0, 0), (widths[0], nx)).copy_from(&q);

        // Strictly lower block shift: rows of layer i+1 read the outputs of layer i.
        let mut n_hidden = DMatrix::zeros(n, n);
        for i in 1..nn.layers.len() {
            let w = &nn.layers[i].weight;
            n_hidden
                .view_mut((offsets[i], offsets[i - 1]), (widths[i], widths[i - 1]))
                .copy_from(w);
        }

        let mut r_x = DMatrix::zeros(2 * n, nx);
        r_x.view_mut((0, 0), (n, nx)).copy_from(&n0);
        let mut r_w = DMatrix::zeros(2 * n, n);
        r_w.view_mut((0, 0), (n, n)).copy_from(&n_hidden);
        r_w.view_mut((n, 0), (n, n)).fill_with_identity();

        let last = nn.layers.len() - 1;
        let mut r_u = DMatrix::zeros(nn.output_dim(), n);
        r_u.view_mut((0, offsets[last]), (nn.output_dim(), widths[last])).copy_from(&nn.w_out);

        ShiftedLoop {
            model: self.clone(),
            shift: ss.clone(),
            activations: nn.activations(),
            widths,
            n0,
            n_hidden,
            r_x,
            r_w,
            r_u,
            q,
        }
    }
}

fn dim(what: &str, detail: String) -> ModelError {
    ModelError::Dimension { what: what.to_string(), detail }
}

/// Loop recentred at a steady state: `x̃ = x - x*`, `ṽ = v - v*`, `w̃ = w - w*`
/// and `φ̃_j(t) = φ_j(t + v*_j) - φ_j(v*_j)`.
#[derive(Debug, Clone)]
pub struct ShiftedLoop {
    pub model: LoopModel,
    pub shift: SteadyState,
    pub activations: Vec<Activation>,
    pub widths: Vec<usize>,
    pub n0: DMatrix<f64>,
    pub n_hidden: DMatrix<f64>,
    /// `[ṽ; w̃] = R_x x̃ + R_w w̃`.
    pub r_x: DMatrix<f64>,
    pub r_w: DMatrix<f64>,
    /// `ũ = R_u w̃`.
    pub r_u: DMatrix<f64>,
    /// `Q = W^0 C`; row `j` bounds the first-layer input `ṽ^1_j = Q_j x̃`.
    pub q: DMatrix<f64>,
}

impl ShiftedLoop {
    pub fn neurons(&self) -> usize {
        self.activations.len()
    }

    pub fn nx(&self) -> usize {
        self.model.plant.nx()
    }

    pub fn first_layer_width(&self) -> usize {
        self.widths[0]
    }

    /// Shifted activation of neuron `j`; equals 0 at 0 exactly.
    #[inline]
    pub fn phi_tilde(&self, j: usize, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let act = self.activations[j];
        let vs = self.shift.v_star[j];
        act.eval(t + vs) - act.eval(vs)
    }

    pub fn phi_tilde_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().enumerate().map(|(j, &t)| self.phi_tilde(j, t)))
    }

    /// Layer-by-layer evaluation of the shifted network.
    pub fn forward_shifted(&self, x_tilde: &DVector<f64>) -> Forward {
        let nn = &self.model.nn;
        let n = self.neurons();
        let mut v = DVector::zeros(n);
        let mut w = DVector::zeros(n);
        let mut prev = &self.model.plant.c * x_tilde;
        let mut off = 0;
        for layer in &nn.layers {
            let pre = &layer.weight * &prev;
            let post = DVector::from_iterator(
                pre.len(),
                pre.iter().enumerate().map(|(i, &t)| self.phi_tilde(off + i, t)),
            );
            v.rows_mut(off, layer.width()).copy_from(&pre);
            w.rows_mut(off, layer.width()).copy_from(&post);
            off += layer.width();
            prev = post;
        }
        let u = &nn.w_out * prev;
        Forward { u, v, w }
    }

    /// Layer index of every stacked neuron.
    pub fn layer_of(&self) -> Vec<usize> {
        self.widths
            .iter()
            .enumerate()
            .flat_map(|(i, &w)| std::iter::repeat_n(i, w))
            .collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct LtiFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    activation: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct NnFile {
    layers: Vec<LayerFile>,
    #[serde(rename = "W_out")]
    w_out: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b_out: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ModelFile {
    lti: LtiFile,
    nn: NnFile,
}

/// Row-major nested arrays to a matrix; `what` names the field for errors.
pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ModelError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(dim(what, format!("row {i} has {} entries, expected {ncols}", r.len())));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn parse_model(text: &str) -> Result<LoopModel, ModelError> {
    let file: ModelFile = serde_json::from_str(text)?;
    let plant = PlantModel::new(
        matrix_from_rows(&file.lti.a, "lti.A")?,
        matrix_from_rows(&file.lti.b, "lti.B")?,
        matrix_from_rows(&file.lti.c, "lti.C")?,
    )?;
    let mut layers = Vec::with_capacity(file.nn.layers.len());
    for (i, lf) in file.nn.layers.iter().enumerate() {
        let what = format!("nn.layers[{i}]");
        let weight = matrix_from_rows(&lf.w, &what)?;
        let bias = match &lf.b {
            Some(b) => DVector::from_column_slice(b),
            None => DVector::zeros(weight.nrows()),
        };
        layers.push(Layer { weight, bias, activation: Activation::parse(&lf.activation)? });
    }
    let w_out = matrix_from_rows(&file.nn.w_out, "nn.W_out")?;
    let b_out = match &file.nn.b_out {
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(w_out.nrows()),
    };
    LoopModel::new(plant, NeuralNetwork::new(layers, w_out, b_out)?)
}

/// Reads and validates a model JSON file.
pub fn load_model(path: impl AsRef<Path>) -> Result<LoopModel, ModelError> {
    parse_model(&fs::read_to_string(path)?)
}

/// FNV-1a digest of the canonical model JSON; ties certificates to a model.
pub fn model_fingerprint(model: &LoopModel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in model_to_json(model).bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn model_to_json(model: &LoopModel) -> String {
    let file = ModelFile {
        lti: LtiFile {
            a: matrix_to_rows(&model.plant.a),
            b: matrix_to_rows(&model.plant.b),
            c: matrix_to_rows(&model.plant.c),
        },
        nn: NnFile {
            layers: model
                .nn
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: matrix_to_rows(&l.weight),
                    b: (!l.bias.iter().all(|&b| b == 0.0)).then(|| l.bias.iter().copied().collect()),
                    activation: l.activation.name().to_string(),
                })
                .collect(),
            w_out: matrix_to_rows(&model.nn.w_out),
            b_out: (!model.nn.b_out.iter().all(|&b| b == 0.0)).then(|| model.nn.b_out.iter().copied().collect()),
        },
    };
    serde_json::to_string_pretty(&file).expect("model serialises")
}
