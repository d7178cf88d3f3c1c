use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iqcroa::bounds::{local_bounds, propagate_boxes};
use iqcroa::model::{load_model, matrix_to_rows, LoopModel};
use iqcroa::multipliers::{CirclePart, MultiplierSpec, ZfStructure, DEFAULT_VERTEX_CAP};
use iqcroa::roa::{Certificate, Pipeline, RoaError, SearchOptions};
use iqcroa::sdp::sdpa::export_sdpa;
use iqcroa::sdp::{default_backend, LmiOptions, SdpBackend, SolveMode};
use iqcroa::sim::{ellipse_csv, simulate, validate_certificate, ValidationReport};
use nalgebra::{DMatrix, DVector};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_VIOLATIONS: u8 = 3;

/// Region-of-attraction certificates for plants in feedback with neural
/// network controllers.
///
/// Exit codes: 0 success, 1 error, 2 infeasible / not certifiable,
/// 3 validation found violations. The solver backend is chosen with the
/// IQCROA_BACKEND environment variable (default: ipm).
#[derive(Parser, Debug)]
#[command(name = "iqcroa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify a region of attraction at a fixed delta.
    Certify(CertifyArgs),
    /// Find delta_max by bisection, then minimize trace(X_x) over delta.
    Search(SearchArgs),
    /// Monte-Carlo validation of a stored certificate.
    Validate(ValidateArgs),
    /// Simulate the closed loop from one initial state.
    Simulate(SimulateArgs),
    /// Print interval boxes and local sector/slope bounds at a delta.
    Bounds(BoundsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MultiplierArg {
    DiagC,
    FbC,
    Cy,
    Zf,
    Combined,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StructureArg {
    Diag,
    Layer,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CircleArg {
    Diag,
    Fb,
    Cy,
}

#[derive(Args, Debug, Clone)]
struct MultiplierOpts {
    #[arg(long, value_enum, default_value = "diag-c")]
    multiplier: MultiplierArg,
    /// Zames-Falb order as "L-,L+".
    #[arg(long, default_value = "1,1")]
    zf_order: String,
    #[arg(long, value_enum, default_value = "diag")]
    zf_structure: StructureArg,
    /// Circle-type part used with --multiplier combined.
    #[arg(long, value_enum, default_value = "diag")]
    circle: CircleArg,
    /// Odd-nonlinearity Zames-Falb variant.
    #[arg(long)]
    odd: bool,
    #[arg(long, default_value_t = DEFAULT_VERTEX_CAP)]
    vertex_cap: usize,
    #[arg(long, default_value_t = 1e-8)]
    eps_pd: f64,
    #[arg(long, default_value_t = 1e-9)]
    eps_lmi: f64,
}

#[derive(Args, Debug, Clone)]
struct ValidationOpts {
    /// Monte-Carlo samples run before a certificate is written.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    mult: MultiplierOpts,
    #[arg(long)]
    delta: f64,
    /// Solve the feasibility problem instead of minimizing trace(X_x).
    #[arg(long)]
    feasibility: bool,
    #[arg(long, default_value = "certificate.json")]
    out: PathBuf,
    #[arg(long)]
    export_sdpa: Option<PathBuf>,
    /// Boundary of the ellipsoid projected on --ellipse-states.
    #[arg(long)]
    ellipse_csv: Option<PathBuf>,
    #[arg(long, default_value = "0,1")]
    ellipse_states: String,
    #[command(flatten)]
    validation: ValidationOpts,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    mult: MultiplierOpts,
    #[arg(long, default_value = "certificate.json")]
    out: PathBuf,
    #[arg(long, default_value = "sweep.csv")]
    sweep_csv: PathBuf,
    /// Evaluate only the comma-separated --deltas grid.
    #[arg(long)]
    sweep_only: bool,
    #[arg(long)]
    deltas: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    tol_rel: f64,
    #[arg(long)]
    export_sdpa: Option<PathBuf>,
    #[arg(long)]
    ellipse_csv: Option<PathBuf>,
    #[arg(long, default_value = "0,1")]
    ellipse_states: String,
    #[command(flatten)]
    validation: ValidationOpts,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Trajectories on which the dissipation inequality is checked.
    #[arg(long, default_value_t = 100)]
    dissipation_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    delta: f64,
}

#[derive(Debug)]
enum Failure {
    Error(String),
    Infeasible(String),
    Violations(String),
}

impl From<RoaError> for Failure {
    fn from(e: RoaError) -> Self {
        match e {
            RoaError::Infeasible { .. } | RoaError::NotCertifiable(_) | RoaError::VerificationFailed { .. } => {
                Failure::Infeasible(e.to_string())
            }
            other => Failure::Error(other.to_string()),
        }
    }
}

fn err(msg: impl Into<String>) -> Failure {
    Failure::Error(msg.into())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| err(format!("invalid {what}: '{s}'"))))
        .collect()
}

fn multiplier_spec(o: &MultiplierOpts) -> Result<MultiplierSpec, Failure> {
    let order: Vec<usize> = parse_list(&o.zf_order, "--zf-order (expected L-,L+)")?;
    let [lm, lp] = order[..] else {
        return Err(err(format!("--zf-order needs two integers, got '{}'", o.zf_order)));
    };
    let structure = match o.zf_structure {
        StructureArg::Diag => ZfStructure::Diag,
        StructureArg::Layer => ZfStructure::LayerBlock,
        StructureArg::Full => ZfStructure::Full,
    };
    let circle = match o.circle {
        CircleArg::Diag => CirclePart::Diag,
        CircleArg::Fb => CirclePart::FullBlock,
        CircleArg::Cy => CirclePart::CircleYakubovich,
    };
    let spec = match o.multiplier {
        MultiplierArg::DiagC => MultiplierSpec::diag_circle(),
        MultiplierArg::FbC => MultiplierSpec::full_block_circle(),
        MultiplierArg::Cy => MultiplierSpec::circle_yakubovich(),
        MultiplierArg::Zf => MultiplierSpec::zames_falb(lm, lp, structure),
        MultiplierArg::Combined => MultiplierSpec::combined(lm, lp, structure, circle),
    };
    let spec = spec.with_vertex_cap(o.vertex_cap).with_odd(o.odd);
    spec.validate().map_err(|e| err(e.to_string()))?;
    Ok(spec)
}

fn lmi_options(o: &MultiplierOpts) -> Result<LmiOptions, Failure> {
    if !(o.eps_pd >= 0.0 && o.eps_lmi >= 0.0) {
        return Err(err("--eps-pd and --eps-lmi must be non-negative"));
    }
    Ok(LmiOptions { eps_pd: o.eps_pd, eps_lmi: o.eps_lmi })
}

fn model(path: &Path) -> Result<LoopModel, Failure> {
    load_model(path).map_err(|e| err(format!("{}: {e}", path.display())))
}

fn pipeline(path: &Path, o: &MultiplierOpts) -> Result<Pipeline, Failure> {
    let m = model(path)?;
    let spec = multiplier_spec(o)?;
    Ok(Pipeline::new(&m, &spec, lmi_options(o)?)?)
}

fn backend() -> Result<Box<dyn SdpBackend>, Failure> {
    default_backend().map_err(|e| err(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| err(format!("{}: {e}", path.display())))
}

fn print_validation(v: &ValidationReport) {
    println!(
        "validation: {} samples x {} steps, divergent {}, not converged {}, peak violations {} (max ratio {:.6}), dissipation residual {:.3e} on {} trajectories -> {}",
        v.samples,
        v.steps,
        v.divergent,
        v.not_converged,
        v.peak_violations,
        v.max_peak_ratio,
        v.max_dissipation_residual,
        v.dissipation_checked,
        if v.pass { "pass" } else { "FAIL" }
    );
}

fn write_ellipse(cert: &Certificate, path: &Path, states: &str) -> Result<(), Failure> {
    let idx: Vec<usize> = parse_list(states, "--ellipse-states")?;
    let [i, j] = idx[..] else { return Err(err("--ellipse-states needs two indices")) };
    let x_x = cert.x_x_matrix()?;
    if i >= x_x.nrows() || j >= x_x.nrows() || i == j {
        return Err(err(format!("--ellipse-states {states} out of range for {} states", x_x.nrows())));
    }
    let csv = ellipse_csv(&x_x, &DVector::from_column_slice(&cert.ellipsoid.center), i, j, 200)
        .ok_or_else(|| err("X_x is not invertible"))?;
    write(path, &csv)
}

/// Sim-validates and writes a certificate.
fn emit(pipe: &Pipeline, cert: &Certificate, out: &Path, v: &ValidationOpts) -> Result<(), Failure> {
    if v.samples > 0 {
        let rep = validate_certificate(pipe, cert, v.samples, v.steps, v.samples.min(100), v.seed)?;
        print_validation(&rep);
        if !rep.pass {
            return Err(Failure::Violations("certificate failed simulation validation; not written".into()));
        }
    }
    write(out, &cert.to_json())?;
    println!("certificate written to {}", out.display());
    Ok(())
}

fn cmd_certify(a: &CertifyArgs) -> Result<(), Failure> {
    if !(a.delta > 0.0 && a.delta.is_finite()) {
        return Err(err("--delta must be positive"));
    }
    let pipe = pipeline(&a.model, &a.mult)?;
    let be = backend()?;
    let mode = if a.feasibility { SolveMode::Feasibility } else { SolveMode::MinimizeTrace };
    if let Some(path) = &a.export_sdpa {
        let stage = pipe.stage(a.delta, mode)?;
        export_sdpa(&stage.program.problem, path).map_err(|e| err(e.to_string()))?;
    }
    let cert = pipe.certify_at(a.delta, mode, be.as_ref())?;
    println!(
        "certified: multiplier {}, delta {:.6e}, trace(X_x) {:.10e}, solver {} ({:?}, {:.2}s)",
        pipe.spec.label(),
        cert.delta,
        cert.trace_xx,
        cert.provenance.backend,
        cert.provenance.status,
        cert.provenance.solve_time_s
    );
    emit(&pipe, &cert, &a.out, &a.validation)?;
    if let Some(path) = &a.ellipse_csv {
        write_ellipse(&cert, path, &a.ellipse_states)?;
    }
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<(), Failure> {
    let pipe = pipeline(&a.model, &a.mult)?;
    let be = backend()?;
    let opts = SearchOptions { lmi: pipe.lmi, tol_rel: a.tol_rel, ..SearchOptions::default() };
    let (cert, record) = if a.sweep_only {
        let list = a.deltas.as_deref().ok_or_else(|| err("--sweep-only needs --deltas"))?;
        let mut deltas: Vec<f64> = parse_list(list, "--deltas")?;
        if deltas.iter().any(|d| d.is_nan() || *d <= 0.0) {
            return Err(err("--deltas must be positive"));
        }
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        let (record, best) = pipe.sweep(&deltas, be.as_ref());
        write(&a.sweep_csv, &record.to_csv())?;
        println!("sweep written to {}", a.sweep_csv.display());
        let best = best.ok_or_else(|| Failure::Infeasible("no delta in the grid is certifiable".into()))?;
        (best, record)
    } else {
        let dm = pipe.find_delta_max(&opts, be.as_ref())?;
        println!(
            "delta_max {:.6e}{} after {} probes",
            dm.delta_max,
            if dm.capped { " (probe limit reached)" } else { "" },
            dm.probes.len()
        );
        let (cert, record) = pipe.minimize_trace_over_delta(dm.delta_max, &opts, be.as_ref())?;
        write(&a.sweep_csv, &record.to_csv())?;
        println!("sweep written to {}", a.sweep_csv.display());
        (cert, record)
    };
    println!(
        "best: multiplier {}, delta* {:.6e}, trace(X_x) {:.10e} ({} evaluations)",
        pipe.spec.label(),
        cert.delta,
        cert.trace_xx,
        record.points.len()
    );
    if let Some(path) = &a.export_sdpa {
        let stage = pipe.stage(cert.delta, SolveMode::MinimizeTrace)?;
        export_sdpa(&stage.program.problem, path).map_err(|e| err(e.to_string()))?;
    }
    emit(&pipe, &cert, &a.out, &a.validation)?;
    if let Some(path) = &a.ellipse_csv {
        write_ellipse(&cert, path, &a.ellipse_states)?;
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), Failure> {
    if a.samples == 0 || a.steps == 0 {
        return Err(err("--samples and --steps must be positive"));
    }
    let m = model(&a.model)?;
    let text = fs::read_to_string(&a.cert).map_err(|e| err(format!("{}: {e}", a.cert.display())))?;
    let cert = Certificate::from_json(&text)?;
    let pipe = Pipeline::new(&m, &cert.multiplier, LmiOptions::default())?;
    let lmi = pipe.verify(&cert).map_err(|e| err(format!("certificate does not match the model: {e}")))?;
    let sim = validate_certificate(&pipe, &cert, a.samples, a.steps, a.dissipation_samples.min(a.samples), a.seed)?;
    println!(
        "LMI verification: {} (stability margin {:.3e}, min eig X {:.3e})",
        if lmi.valid { "valid" } else { "INVALID" },
        lmi.stability_margin,
        lmi.x_min_eig
    );
    for v in &lmi.violations {
        println!("  violated: {v}");
    }
    print_validation(&sim);
    if let Some(path) = &a.report {
        let json = serde_json::json!({ "lmi": lmi, "simulation": sim });
        write(path, &serde_json::to_string_pretty(&json).expect("report serializes"))?;
    }
    if lmi.valid && sim.pass {
        Ok(())
    } else {
        Err(Failure::Violations("certificate validation found violations".into()))
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let m = model(&a.model)?;
    let x0: Vec<f64> = parse_list(&a.x0, "--x0")?;
    if x0.len() != m.plant.nx() || x0.iter().any(|v| !v.is_finite()) {
        return Err(err(format!("--x0 needs {} finite values", m.plant.nx())));
    }
    let ss = m.find_steady_state(None).map_err(|e| err(e.to_string()))?;
    let lp = m.shift(&ss);
    let traj = simulate(&lp, &DVector::from_vec(x0), a.steps);
    if let Some(path) = &a.csv {
        let nx = m.plant.nx();
        let mut out: String = (0..nx).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        out.insert_str(0, "k,");
        out.push('\n');
        for (k, x) in traj.states.iter().enumerate() {
            let row: Vec<String> = x.iter().map(|v| format!("{v:.10e}")).collect();
            out.push_str(&format!("{k},{}\n", row.join(",")));
        }
        write(path, &out)?;
    }
    let last = traj.states.last().expect("trajectory has a state");
    println!(
        "x* = {:?}; final state {:?} after {} steps; converged {}, divergent {}",
        ss.x_star.as_slice(),
        last.as_slice(),
        traj.states.len() - 1,
        traj.converged,
        traj.divergent
    );
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs) -> Result<(), Failure> {
    if !(a.delta > 0.0 && a.delta.is_finite()) {
        return Err(err("--delta must be positive"));
    }
    let m = model(&a.model)?;
    let ss = m.find_steady_state(None).map_err(|e| err(e.to_string()))?;
    let lp = m.shift(&ss);
    let boxes = propagate_boxes(&lp, &DVector::from_element(lp.first_layer_width(), a.delta));
    let b = local_bounds(&lp, &boxes);
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let json = serde_json::json!({
        "delta": a.delta,
        "x_star": ss.x_star.as_slice(),
        "v_star": ss.v_star.as_slice(),
        "lo": boxes.lo.as_slice(),
        "hi": boxes.hi.as_slice(),
        "alpha": b.alpha.as_slice(),
        "beta": b.beta.as_slice(),
        "mu": b.mu.as_slice(),
        "nu": b.nu.as_slice(),
        "Q": matrix_to_rows(&lp.q),
        "d1": matrix_to_rows(&col(&boxes.d1)).concat(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("bounds serialize"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    let res = match &cli.command {
        Command::Certify(a) => cmd_certify(a),
        Command::Search(a) => cmd_search(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bounds(a) => cmd_bounds(a),
    };
    match res {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(Failure::Error(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_ERROR)
        }
        Err(Failure::Infeasible(m)) => {
            eprintln!("infeasible: {m}");
            ExitCode::from(EXIT_INFEASIBLE)
        }
        Err(Failure::Violations(m)) => {
            eprintln!("violations: {m}");
            ExitCode::from(EXIT_VIOLATIONS)
        }
    }
}
