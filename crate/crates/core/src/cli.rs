//! `cmps` command line.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numerical failure,
//! 64 usage error. Failures print `{"error": {...}}` on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::config::{OutputFormat, RunConfig};
use crate::error::{CoreError, Error, ErrorClass};
use crate::finite::{self, FiniteEnergyParams};
use crate::gauge::{self, GaugeTarget};
use crate::io::{self, StateFile, TangentFile};
use crate::lattice;
use crate::regularity::{self, ParityStructure};
use crate::report::{complex, report, to_json_string, Cell, Csv};
use crate::state::{FiniteCmps, UniformCmps};
use crate::tangent;
use crate::transfer::TransferOp;
use crate::uniform::{self, EnergyParams, InteractionKernel, Normalized};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "cmps", version, about = "Continuous matrix product state toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Largest bond dimension handled by dense superoperators [env: CMPS_DENSE_BUDGET]
    #[arg(long, global = true)]
    dense_budget: Option<usize>,
    #[arg(long, global = true)]
    eig_tol: Option<f64>,
    #[arg(long, global = true)]
    solve_tol: Option<f64>,
    #[arg(long, global = true)]
    ode_tol: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    format: Option<OutputFormat>,
    /// Worker threads for grid-parallel work (results do not depend on it)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Regularity (and optional parity) check
    Check {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        parity: Option<PathBuf>,
        #[arg(long, default_value_t = regularity::DEFAULT_TOL)]
        tol: f64,
    },
    /// Gauge transformation to a canonical form
    Gauge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        to: Target,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_g: Option<PathBuf>,
    },
    /// Observables of a finite (open boundary) state
    Finite {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        observable: FiniteObs,
        #[command(flatten)]
        energy: EnergyOpts,
        /// Potential samples on the grid: JSON array of N+1 reals
        #[arg(long)]
        potential: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        species: usize,
        #[arg(long)]
        species_b: Option<usize>,
        /// Fixed point for g2 = <psi^dag(x) psi(y)> over the grid
        #[arg(long, default_value_t = 0.0)]
        x: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Observables of a uniform state
    Uniform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        observable: UniformObs,
        #[command(flatten)]
        energy: EnergyOpts,
        #[arg(long, default_value_t = 0.0)]
        potential: f64,
        #[arg(long, default_value_t = 0)]
        species: usize,
        #[arg(long)]
        species_b: Option<usize>,
        #[arg(long)]
        pmax: Option<f64>,
        #[arg(long, default_value_t = 201)]
        pn: usize,
        #[arg(long)]
        xmax: Option<f64>,
        #[arg(long, default_value_t = 101)]
        xn: usize,
        #[arg(long)]
        other: Option<PathBuf>,
        #[arg(long)]
        parity: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tangent-space metric between two tangent vectors
    Tangent {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// Momentum for both uniform tangents (overrides the files)
        #[arg(long)]
        p: Option<f64>,
        /// Left gauge fix both tangents first
        #[arg(long)]
        gauge_fix: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence table of the lattice discretization
    LatticeCheck {
        #[arg(long)]
        input: PathBuf,
        /// Starting spacing; defaults to 1e-2/|T| (uniform) or the grid spacing (finite)
        #[arg(long)]
        a: Option<f64>,
        #[arg(long, default_value_t = 4)]
        halvings: usize,
        #[arg(long, default_value_t = 3)]
        nmax: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Schema and invariant check of a state file
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EnergyOpts {
    /// Mass, one value or one per species; H_kin = sum dpsi^dag dpsi / 2m
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    mass: Vec<f64>,
    /// delta:c or exp:c,ell
    #[arg(long)]
    interaction: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Left,
    Right,
    Qzero,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FiniteObs {
    Norm,
    Density,
    G2,
    Energy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UniformObs {
    Density,
    Energy,
    Corr,
    Np,
    Cutoff,
    Xi,
    Match,
}

/// What a command produced.
struct Output {
    result: Value,
    residuals: Map<String, Value>,
    warnings: Vec<String>,
    series: Option<Csv>,
    /// Nonzero when the command ran but its check failed.
    failure: Option<(i32, Value)>,
}

impl Output {
    fn new(result: Value) -> Self {
        Output { result, residuals: Map::new(), warnings: Vec::new(), series: None, failure: None }
    }

    fn residual(mut self, k: &str, v: f64) -> Self {
        self.residuals.insert(k.into(), json!(v));
        self
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn error_object(code: &str, class: &str, message: &str) -> Value {
    json!({"error": {"code": code, "class": class, "message": message}})
}

fn class_name(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Validation => "validation",
        ErrorClass::Numerical => "numerical",
    }
}

/// Run `cmps` with `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let cfg = match config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "{}", error_object(e.code(), "validation", &e.to_string()));
            return EXIT_VALIDATION;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "{}", error_object("Invalid", "validation", &e.to_string()));
            return EXIT_VALIDATION;
        }
    };
    let name = command_name(&cli.cmd);
    match pool.install(|| dispatch(&cli.cmd, &cfg)) {
        Ok(o) => emit(name, &cli.cmd, &cfg, o, out, err),
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "{}", error_object("Usage", "usage", &m));
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "{}", error_object(e.code(), class_name(e.class()), &e.to_string()));
            match e.class() {
                ErrorClass::Validation => EXIT_VALIDATION,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            }
        }
    }
}

fn config(g: &Global) -> Result<RunConfig, CoreError> {
    let mut c = RunConfig::default().with_env()?;
    if let Some(v) = g.dense_budget {
        c.dense_budget = v;
    }
    if let Some(v) = g.eig_tol {
        c.eig_tol = v;
    }
    if let Some(v) = g.solve_tol {
        c.solve_tol = v;
    }
    if let Some(v) = g.ode_tol {
        c.ode_tol = v;
    }
    c.seed = g.seed;
    if let Some(f) = g.format {
        c.output_format = f;
    }
    c.validate()?;
    Ok(c)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Check { .. } => "check",
        Command::Gauge { .. } => "gauge",
        Command::Finite { .. } => "finite",
        Command::Uniform { .. } => "uniform",
        Command::Tangent { .. } => "tangent",
        Command::LatticeCheck { .. } => "lattice-check",
        Command::Validate { .. } => "validate",
    }
}

fn out_path(c: &Command) -> Option<&Path> {
    match c {
        Command::Finite { out, .. } | Command::Uniform { out, .. } | Command::Tangent { out, .. } | Command::LatticeCheck { out, .. } => {
            out.as_deref()
        }
        _ => None,
    }
}

/// Numeric leaves of a JSON value as `(path, value)` rows.
fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, f64)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Number(n) => rows.push((prefix.to_string(), n.as_f64().unwrap_or(f64::NAN))),
        Value::Bool(b) => rows.push((prefix.to_string(), if *b { 1.0 } else { 0.0 })),
        Value::Object(m) => m.iter().for_each(|(k, x)| flatten(&join(k), x, rows)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| flatten(&join(&i.to_string()), x, rows)),
        _ => {}
    }
}

fn emit(name: &str, cmd: &Command, cfg: &RunConfig, o: Output, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    for w in &o.warnings {
        let _ = writeln!(err, "{}", json!({"warning": w}));
    }
    let path = out_path(cmd);
    let csv = cfg.output_format == OutputFormat::Csv || path.is_some_and(|p| p.extension().is_some_and(|e| e == "csv"));
    let text = if csv {
        match &o.series {
            Some(s) => s.render(),
            None => {
                let mut rows = Vec::new();
                flatten("", &o.result, &mut rows);
                let mut t = Csv::new(&["quantity", "value"]);
                for (k, v) in rows {
                    t.push(vec![Cell::Text(k), v.into()]);
                }
                t.render()
            }
        }
    } else {
        to_json_string(&report(name, cfg, o.result, o.residuals, &o.warnings))
    };
    match path {
        Some(p) => {
            if let Err(e) = io::write_text(p, &text) {
                let _ = writeln!(err, "{}", error_object(e.code(), "validation", &e.to_string()));
                return EXIT_VALIDATION;
            }
        }
        None => {
            let _ = write!(out, "{text}");
        }
    }
    match o.failure {
        Some((code, obj)) => {
            let _ = writeln!(err, "{obj}");
            code
        }
        None => EXIT_OK,
    }
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<Output, Failure> {
    match cmd {
        Command::Check { input, order, parity, tol } => check(input, *order, parity.as_deref(), *tol),
        Command::Gauge { input, to, out, emit_g } => gauge_cmd(input, *to, out, emit_g.as_deref(), cfg),
        Command::Finite { input, observable, energy, potential, species, species_b, x, out: _ } => {
            finite_cmd(input, *observable, energy, potential.as_deref(), *species, species_b.unwrap_or(*species), *x, cfg)
        }
        Command::Uniform { input, observable, energy, potential, species, species_b, pmax, pn, xmax, xn, other, parity, out: _ } => {
            let u = UniformArgs {
                energy,
                potential: *potential,
                a: *species,
                b: species_b.unwrap_or(*species),
                pmax: *pmax,
                pn: *pn,
                xmax: *xmax,
                xn: *xn,
                other: other.as_deref(),
                parity: parity.as_deref(),
            };
            uniform_cmd(input, *observable, &u, cfg)
        }
        Command::Tangent { base, t1, t2, p, gauge_fix, out: _ } => tangent_cmd(base, t1, t2, *p, *gauge_fix, cfg),
        Command::LatticeCheck { input, a, halvings, nmax, out: _ } => lattice_cmd(input, *a, *halvings, *nmax, cfg),
        Command::Validate { input } => validate(input),
    }
}

fn read_uniform(path: &Path) -> Result<UniformCmps, Failure> {
    match io::read_state(path)? {
        StateFile::Uniform(u) => Ok(u),
        StateFile::Finite(_) => Err(Failure::Usage(format!("{} holds a finite state; this command needs a uniform one", path.display()))),
    }
}

fn read_finite(path: &Path) -> Result<FiniteCmps, Failure> {
    match io::read_state(path)? {
        StateFile::Finite(f) => Ok(f),
        StateFile::Uniform(_) => Err(Failure::Usage(format!("{} holds a uniform state; this command needs a finite one", path.display()))),
    }
}

fn read_parity(path: Option<&Path>) -> Result<Option<ParityStructure>, Failure> {
    Ok(match path {
        Some(p) => Some(io::parity_from_str(&io::read_text(p)?)?),
        None => None,
    })
}

fn check(input: &Path, order: usize, parity: Option<&Path>, tol: f64) -> Result<Output, Failure> {
    let state = io::read_state(input)?;
    let parity = read_parity(parity)?;
    let mut reports = Vec::new();
    for n in 1..=order.max(1) {
        let rep = match (&state, n) {
            (StateFile::Uniform(u), 1) => regularity::check_first_order_tol(u, tol),
            (StateFile::Uniform(u), n) => regularity::check_higher_order_with(u, n, tol, regularity::DEFAULT_ORDER_CAP)?,
            (StateFile::Finite(f), 1) => regularity::check_first_order_finite(f, tol),
            (StateFile::Finite(f), n) => regularity::check_higher_order_finite(f, n, None, tol, regularity::DEFAULT_ORDER_CAP)?,
        };
        reports.push(rep);
    }
    let mut passed = reports.iter().all(|r| r.passed);
    let max_residual = reports.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    let mut result = json!({
        "order": order,
        "residuals": reports.iter().map(|r| json!({"order": r.order, "residuals": r.residuals, "max": r.max_residual})).collect::<Vec<_>>(),
        "tolerance": tol,
    });
    let mut o = Output::new(Value::Null);
    if let Some(p) = parity {
        let u = match &state {
            StateFile::Uniform(u) => u,
            StateFile::Finite(_) => return Err(Failure::Usage("--parity applies to uniform states".into())),
        };
        let pr = regularity::check_parity_tol(u, &p, tol)?;
        passed &= pr.passed;
        result["parity"] = serde_json::to_value(&pr).expect("serializes");
    }
    result["passed"] = json!(passed);
    if !passed {
        let msg = format!("regularity check failed (max residual {max_residual:e}, tolerance {tol:e})");
        o.failure = Some((EXIT_VALIDATION, error_object("RegularityViolation", "validation", &msg)));
    }
    o.result = result;
    Ok(o.residual("max_residual", max_residual))
}

fn gauge_cmd(input: &Path, to: Target, out: &Path, emit_g: Option<&Path>, cfg: &RunConfig) -> Result<Output, Failure> {
    let target = match to {
        Target::Left => GaugeTarget::Left,
        Target::Right => GaugeTarget::Right,
        Target::Qzero => GaugeTarget::Qzero,
    };
    match io::read_state(input)? {
        StateFile::Uniform(u) => {
            let ns = Normalized::new(&u, None, cfg.eval())?;
            let can = match target {
                GaugeTarget::Left => gauge::left_canonicalize_uniform(&ns)?,
                GaugeTarget::Right => gauge::right_canonicalize_uniform(&ns)?,
                GaugeTarget::Qzero => return Err(Failure::Usage("--to qzero applies to finite states".into())),
            };
            let res = match target {
                GaugeTarget::Left => crate::transfer::left_orthonormal_residual(&can.state),
                _ => crate::transfer::right_orthonormal_residual(&can.state),
            };
            io::write_text(out, &to_json_string(&io::uniform_to_value(&can.state)))?;
            if let Some(p) = emit_g {
                io::write_text(p, &to_json_string(&json!({"g": io::matrix_to_value(&can.g)})))?;
            }
            let result = json!({"kind": "uniform", "target": target, "output": out.display().to_string(), "spectrum": can.diag, "shift": ns.fp.mu});
            Ok(Output::new(result).residual("orthonormality", res).residual("fixed_point_l", ns.fp.residual_l).residual("fixed_point_r", ns.fp.residual_r))
        }
        StateFile::Finite(f) => {
            let res = match target {
                GaugeTarget::Left => gauge::left_orthonormalize_finite(&f)?,
                GaugeTarget::Right => gauge::right_orthonormalize_finite(&f)?,
                GaugeTarget::Qzero => gauge::eliminate_q_gauge(&f)?,
            };
            io::write_text(out, &to_json_string(&io::finite_to_value(&res.state)))?;
            if let Some(p) = emit_g {
                let gs: Vec<Value> = res.g.iter().map(io::matrix_to_value).collect();
                io::write_text(p, &to_json_string(&json!({"g_samples": gs})))?;
            }
            let result = json!({"kind": "finite", "target": target, "output": out.display().to_string()});
            Ok(Output::new(result).residual("gauge_condition", res.residual))
        }
    }
}

fn parse_interaction(s: Option<&str>) -> Result<Option<InteractionKernel>, Failure> {
    let Some(s) = s else { return Ok(None) };
    let bad = || Failure::Usage(format!("--interaction expects delta:c or exp:c,ell, got {s:?}"));
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let nums: Vec<f64> = rest.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let k = match (kind, nums.as_slice()) {
        ("delta", [c]) => InteractionKernel::Delta { c: *c },
        ("exp", [c, ell]) => InteractionKernel::Exponential { c: *c, ell: *ell },
        _ => return Err(bad()),
    };
    k.validate()?;
    Ok(Some(k))
}

fn masses(m: &[f64], q: usize) -> Result<Vec<f64>, Failure> {
    match m.len() {
        1 => Ok(vec![m[0]; q]),
        n if n == q => Ok(m.to_vec()),
        n => Err(Failure::Usage(format!("--mass takes 1 or {q} values, got {n}"))),
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![a];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

fn series_json(x: &[f64], v: &[crate::C64]) -> Value {
    json!({"x": x, "re": v.iter().map(|z| z.re).collect::<Vec<_>>(), "im": v.iter().map(|z| z.im).collect::<Vec<_>>()})
}

#[allow(clippy::too_many_arguments)]
fn finite_cmd(
    input: &Path,
    obs: FiniteObs,
    energy: &EnergyOpts,
    potential: Option<&Path>,
    a: usize,
    b: usize,
    x: f64,
    cfg: &RunConfig,
) -> Result<Output, Failure> {
    let st = read_finite(input)?;
    let vdp = finite::propagate(&st)?;
    let mut warnings = Vec::new();
    if vdp.max_deviation > cfg.ode_tol {
        warnings.push(format!("tr[l r] varies by {:e} across the grid (ode_tol {:e}); refine N", vdp.max_deviation, cfg.ode_tol));
    }
    let mut o = match obs {
        FiniteObs::Norm => Output::new(json!({"norm": vdp.norm, "max_deviation": vdp.max_deviation, "min_eig_ratio": vdp.min_eig_ratio})),
        FiniteObs::Density => {
            let prof = finite::density_profile(&st, &vdp, a, b)?;
            let xs = st.grid();
            let mut o = Output::new(json!({"species": [a, b], "series": series_json(&xs, &prof)}));
            o.series = Some(Csv::series(&xs, &prof));
            o
        }
        FiniteObs::G2 => {
            let xs = st.grid();
            let vals = xs.iter().map(|&y| finite::two_point(&st, &vdp, a, b, x, y)).collect::<Result<Vec<_>, _>>()?;
            let mut o = Output::new(json!({"species": [a, b], "x": x, "series": series_json(&xs, &vals)}));
            o.series = Some(Csv::series(&xs, &vals));
            o
        }
        FiniteObs::Energy => {
            let pot = match potential {
                Some(p) => {
                    let v: Vec<f64> = serde_json::from_str(&io::read_text(p)?).map_err(|e| io::IoError::ParseError(e.to_string()))?;
                    Some(v)
                }
                None => None,
            };
            let params = FiniteEnergyParams {
                masses: masses(&energy.mass, st.num_species())?,
                potential: pot,
                interaction: parse_interaction(energy.interaction.as_deref())?,
            };
            let e = finite::energy(&st, &vdp, &params)?;
            Output::new(json!({"kinetic": e.kinetic, "potential": e.potential, "interaction": e.interaction,
                "total": e.kinetic + e.potential + e.interaction, "norm": e.norm}))
            .residual("max_imag", e.max_imag)
        }
    };
    o.warnings.extend(warnings);
    Ok(o.residual("norm_deviation", vdp.max_deviation))
}

struct UniformArgs<'a> {
    energy: &'a EnergyOpts,
    potential: f64,
    a: usize,
    b: usize,
    pmax: Option<f64>,
    pn: usize,
    xmax: Option<f64>,
    xn: usize,
    other: Option<&'a Path>,
    parity: Option<&'a Path>,
}

fn uniform_cmd(input: &Path, obs: UniformObs, u: &UniformArgs, cfg: &RunConfig) -> Result<Output, Failure> {
    let st = read_uniform(input)?;
    let parity = read_parity(u.parity)?;
    let ns = Normalized::balanced(&st, parity, cfg.eval())?;
    let scale = TransferOp::plain(&ns.state).norm_bound().max(1e-300);
    let (a, b) = (u.a, u.b);
    let mut o = match obs {
        UniformObs::Density => {
            let v = uniform::density(&ns, a, b)?;
            Output::new(json!({"species": [a, b], "density": v.re, "imag": v.im}))
        }
        UniformObs::Energy => {
            let params = EnergyParams {
                masses: masses(&u.energy.mass, st.num_species())?,
                potential: u.potential,
                interaction: parse_interaction(u.energy.interaction.as_deref())?,
            };
            let e = uniform::energy_densities(&ns, &params)?;
            Output::new(json!({"kinetic": e.kinetic, "potential": e.potential, "interaction": e.interaction,
                "total": e.kinetic + e.potential + e.interaction}))
            .residual("max_imag", e.max_imag)
        }
        UniformObs::Corr => {
            let xs = linspace(0.0, u.xmax.unwrap_or(10.0 / scale), u.xn);
            let c = uniform::correlation(&ns, a, b, &xs)?;
            let mut o = Output::new(json!({"species": [a, b], "long_range": complex(c.long_range), "series": series_json(&c.x, &c.values)}));
            o.series = Some(Csv::series(&c.x, &c.values));
            o
        }
        UniformObs::Np => {
            let pmax = u.pmax.unwrap_or(100.0 * scale);
            let ps = linspace(-pmax, pmax, u.pn);
            let n = uniform::momentum_occupation(&ns, a, b, &ps)?;
            let mut o = Output::new(json!({"species": [a, b], "condensate_weight": complex(n.condensate_weight), "series": series_json(&n.p, &n.values)}));
            let reg = regularity::check_first_order_tol(&ns.state, cfg.solve_tol);
            if !reg.passed {
                o.warnings.push(format!(
                    "regularity condition violated (residual {:e}): n(p) does not decay as p^-4 and the kinetic energy diverges",
                    reg.max_residual
                ));
            }
            o.series = Some(Csv::series(&n.p, &n.values));
            o
        }
        UniformObs::Cutoff => {
            let c = uniform::uv_cutoff(&ns, a, b)?;
            let mut o = Output::new(json!({"species": [a, b], "lambda": c.lambda, "lambda4": {"re": c.lambda4_re, "im": c.lambda4_im}, "regular": c.regular}));
            o.warnings.extend(c.warnings);
            o
        }
        UniformObs::Xi => Output::new(json!({"xi": uniform::correlation_length(&ns, None)?})),
        UniformObs::Match => {
            let other = u.other.ok_or_else(|| Failure::Usage("--observable match needs --other".into()))?;
            let s2 = Normalized::new(&read_uniform(other)?, None, cfg.eval())?;
            // g must relate the inputs as given, so no balancing here
            let s1 = Normalized::new(&st, parity, cfg.eval())?;
            let m = uniform::match_states(&s1, &s2.state)?;
            let mut r = json!({"lambda": complex(m.lambda), "equivalent": m.equivalent, "phi": m.phi});
            if let Some(g) = &m.g {
                r["g"] = io::matrix_to_value(g);
            }
            let mut o = Output::new(r);
            if let Some(res) = m.residual {
                o = o.residual("match", res);
            }
            o
        }
    };
    o.residuals.insert("fixed_point_l".into(), json!(ns.fp.residual_l));
    o.residuals.insert("fixed_point_r".into(), json!(ns.fp.residual_r));
    o.residuals.insert("shift".into(), json!(ns.fp.mu));
    Ok(o)
}

fn tangent_cmd(base: &Path, t1: &Path, t2: &Path, p: Option<f64>, fix: bool, cfg: &RunConfig) -> Result<Output, Failure> {
    let state = io::read_state(base)?;
    let q = state.species().len();
    let read = |path: &Path| -> Result<TangentFile, Failure> { Ok(io::tangent_from_str(&io::read_text(path)?, q)?) };
    let (a, b) = (read(t1)?, read(t2)?);
    match (state, a, b) {
        (StateFile::Uniform(u), TangentFile::Uniform(mut x), TangentFile::Uniform(mut y)) => {
            if let Some(p) = p {
                x.p = p;
                y.p = p;
            }
            let ns = Normalized::new(&u, None, cfg.eval())?;
            let mut o = Output::new(Value::Null);
            if fix {
                let fx = tangent::left_gauge_fix_uniform(&ns, &x, true)?;
                let fy = tangent::left_gauge_fix_uniform(&ns, &y, true)?;
                o = o.residual("gauge_fix_t1", fx.residual).residual("gauge_fix_t2", fy.residual);
                x = fx.tangent;
                y = fy.tangent;
            }
            let ov = tangent::overlap_uniform(&ns, &x, &y)?;
            o.result = json!({
                "kind": "uniform",
                "p": [x.p, y.p],
                "delta_coefficient": complex(ov.delta_coefficient),
                "p0_extra": complex(ov.p0_extra),
                "base_overlap": [complex(tangent::base_overlap_uniform(&ns, &x)?), complex(tangent::base_overlap_uniform(&ns, &y)?)],
                "left_residual": [tangent::left_residual_uniform(&ns, &x), tangent::left_residual_uniform(&ns, &y)],
            });
            Ok(o)
        }
        (StateFile::Finite(f), TangentFile::Finite(mut x), TangentFile::Finite(mut y)) => {
            if p.is_some() {
                return Err(Failure::Usage("--p applies to uniform tangents".into()));
            }
            let space = tangent::FiniteTangentSpace::new(&f)?;
            let mut o = Output::new(Value::Null);
            if fix {
                let fx = space.left_gauge_fix(&x)?;
                let fy = space.left_gauge_fix(&y)?;
                o = o.residual("gauge_fix_t1", fx.residual).residual("gauge_fix_t2", fy.residual);
                x = fx.tangent;
                y = fy.tangent;
            }
            o.result = json!({
                "kind": "finite",
                "overlap": complex(space.overlap(&x, &y)?),
                "base_overlap": [complex(space.base_overlap(&x)?), complex(space.base_overlap(&y)?)],
                "left_residual": [space.left_residual(&x)?, space.left_residual(&y)?],
                "norm": space.norm(),
            });
            Ok(o)
        }
        _ => Err(Failure::Usage("base state and tangents must be all uniform or all finite".into())),
    }
}

fn ratio_rows(t: &mut Csv, rows: &mut Vec<Value>, obs: &str, pts: &[(f64, f64)]) {
    for (i, &(a, e)) in pts.iter().enumerate() {
        let ratio = if i == 0 { f64::NAN } else { pts[i - 1].1 / e };
        t.push(vec![a.into(), obs.into(), e.into(), ratio.into()]);
        rows.push(json!({"a": a, "observable": obs, "error": e, "ratio": if ratio.is_finite() { json!(ratio) } else { Value::Null }}));
    }
}

fn lattice_cmd(input: &Path, a0: Option<f64>, halvings: usize, nmax: usize, cfg: &RunConfig) -> Result<Output, Failure> {
    use rayon::prelude::*;
    let mut t = Csv::new(&["a", "observable", "error", "ratio"]);
    let mut rows = Vec::new();
    match io::read_state(input)? {
        StateFile::Uniform(u) => {
            let ns = Normalized::new(&u, None, cfg.eval())?;
            let q = u.num_species();
            let rho: f64 = (0..q).map(|s| uniform::density(&ns, s, s).map(|z| z.re)).sum::<Result<f64, _>>()?;
            let kin = uniform::energy_densities(&ns, &EnergyParams { masses: vec![0.5; q], potential: 0.0, interaction: None })?.kinetic;
            let a0 = a0.unwrap_or(1e-2 / TransferOp::plain(&ns.state).norm_bound().max(1e-300));
            let spacings: Vec<f64> = (0..=halvings).map(|k| a0 / 2f64.powi(k as i32)).collect();
            let res = spacings
                .par_iter()
                .map(|&a| -> Result<(f64, f64, f64), Error> {
                    let o = lattice::lattice_observables(&lattice::discretize_uniform(&ns.state, a, nmax)?)?;
                    let tr = lattice::lattice_transfer_check(&ns.state, a)?;
                    Ok(((o.density.iter().sum::<f64>() - rho).abs(), (o.kinetic - kin).abs(), tr))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let pts = |f: fn(&(f64, f64, f64)) -> f64| spacings.iter().zip(&res).map(|(a, r)| (*a, f(r))).collect::<Vec<_>>();
            ratio_rows(&mut t, &mut rows, "density", &pts(|r| r.0));
            ratio_rows(&mut t, &mut rows, "kinetic", &pts(|r| r.1));
            ratio_rows(&mut t, &mut rows, "transfer_residual", &pts(|r| r.2));
        }
        StateFile::Finite(f) => {
            let vdp = finite::propagate(&f)?;
            let q = f.num_species();
            let num: f64 = (0..q)
                .map(|s| finite::density_profile(&f, &vdp, s, s).map(|p| crate::linalg::trapezoid(&p, f.h()).re))
                .sum::<Result<f64, _>>()?;
            let a0 = a0.unwrap_or(f.h());
            let spacings: Vec<f64> = (0..=halvings).map(|k| a0 / 2f64.powi(k as i32)).collect();
            let res = spacings
                .par_iter()
                .map(|&a| -> Result<(f64, f64), Error> {
                    let o = lattice::lattice_observables_finite(&lattice::discretize_finite(&f, a, nmax)?)?;
                    Ok(((o.particle_number.iter().sum::<f64>() - num).abs(), (o.norm - vdp.norm).abs()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let pts = |g: fn(&(f64, f64)) -> f64| spacings.iter().zip(&res).map(|(a, r)| (*a, g(r))).collect::<Vec<_>>();
            ratio_rows(&mut t, &mut rows, "particle_number", &pts(|r| r.0));
            ratio_rows(&mut t, &mut rows, "norm", &pts(|r| r.1));
        }
    }
    let mut o = Output::new(json!({"rows": rows}));
    o.series = Some(t);
    Ok(o)
}

fn validate(input: &Path) -> Result<Output, Failure> {
    let st = io::read_state(input)?;
    let species: Vec<Value> = st.species().species().iter().map(|s| json!({"name": s.name, "statistics": s.statistics})).collect();
    let result = match &st {
        StateFile::Uniform(u) => json!({"kind": "uniform", "D": u.d(), "species": species}),
        StateFile::Finite(f) => {
            let boundary = match f.boundary() {
                crate::state::BoundaryKind::Open => "open",
                crate::state::BoundaryKind::Periodic => "periodic",
            };
            json!({"kind": "finite", "D": f.d(), "species": species, "L": f.length(), "N": f.n(), "boundary": boundary})
        }
    };
    Ok(Output::new(json!({"valid": true, "state": result})))
}
