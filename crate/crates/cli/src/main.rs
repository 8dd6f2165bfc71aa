//! `respec` command line: meshing, capacities, convergence sweeps, eigenvalue
//! design and report rendering. Every run writes its outputs and a
//! `manifest.json` with their digests into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use respec::capacity::{self, CapacityError};
use respec::designer::{self, DesignError, DesignOptions, DesignProblem, FemOracle, Placement};
use respec::geometry::{GeometryError, OuterSpec, ScalingLaw, Scene};
use respec::harness::{self, HarnessError, SolveConfig};
use respec::mesh::{self, GradingSpec, MeshError};
use respec::numerics::{self, EigenConfig, NumericsError};

#[derive(Parser, Debug)]
#[command(name = "respec", version, about = "Spectra of domains with small resonators")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Scene file (JSON) describing the outer domain and the resonators.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Seed of the eigensolver start block.
    #[arg(long, global = true, default_value_t = EigenConfig::default().seed)]
    seed: u64,
    #[arg(long, global = true, env = "RESPEC_THREADS")]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Discretization {
    /// Largest element size.
    #[arg(long, default_value_t = 1.0 / 32.0)]
    base_h: f64,
    /// Size ratio between neighbouring refinement levels.
    #[arg(long, default_value_t = GradingSpec::DEFAULT_RATIO)]
    ratio: f64,
    /// Relative eigenvalue residual tolerance.
    #[arg(long, default_value_t = 1e-6)]
    eig_tol: f64,
    /// Eigensolver iteration cap.
    #[arg(long, default_value_t = EigenConfig::default().max_iter)]
    eig_max_iter: usize,
}

impl Discretization {
    fn config(&self, seed: u64) -> SolveConfig {
        SolveConfig {
            base_h: self.base_h,
            ratio: self.ratio,
            eig_tol: self.eig_tol,
            eigen: EigenConfig { seed, max_iter: self.eig_max_iter, ..EigenConfig::default() },
            ..SolveConfig::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Triangulate the scene; optionally assemble and solve.
    Mesh {
        /// Plain-text mesh file, relative to the output directory.
        #[arg(long, alias = "mesh-out", default_value = "mesh.txt")]
        out: PathBuf,
        /// Also write an SVG rendering next to the mesh file.
        #[arg(long)]
        svg: bool,
        /// Write the reduced stiffness and mass matrices in MatrixMarket format.
        #[arg(long)]
        dump_matrices: bool,
        /// Number of eigenpairs to compute (0 skips the solve).
        #[arg(long, default_value_t = 0)]
        count: usize,
        #[command(flatten)]
        disc: Discretization,
    },
    /// Capacity of a planar window of half-width `a`.
    Capacity {
        #[arg(long)]
        half_width: f64,
        /// `fem` or `asymptotic`.
        #[arg(long, default_value = "fem")]
        method: String,
        /// Smallest element size (default a/8).
        #[arg(long)]
        min_h: Option<f64>,
    },
    /// Sweep eps along scaling laws and compare with the limit spectrum.
    Converge {
        /// Scaling coefficient per resonator (one value applies to all).
        #[arg(long, value_delimiter = ',', required = true)]
        law: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.3,0.2,0.15")]
        schedule: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 60.0)]
        lambda_max: f64,
        #[command(flatten)]
        disc: Discretization,
    },
    /// Choose windows so that the eigenvalues below the threshold hit targets.
    Design {
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 0.25)]
        eps: f64,
        #[arg(long, default_value_t = 0.02)]
        tol: f64,
        /// Bracket half-width (default from the target gaps).
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = DesignOptions::default().max_sweeps)]
        max_sweeps: usize,
        /// Re-solve at the solution with the truncation length doubled.
        #[arg(long)]
        check_truncation: bool,
        #[command(flatten)]
        disc: Discretization,
    },
    /// Render a convergence CSV as SVG plots.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Mesh { .. } => "mesh",
            Command::Capacity { .. } => "capacity",
            Command::Converge { .. } => "converge",
            Command::Design { .. } => "design",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Domain,
    Numerical,
    Io,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Domain => 1,
            Kind::Numerical => 2,
            Kind::Io => 3,
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
    details: Value,
}

impl CliError {
    fn domain(message: impl Into<String>) -> Self {
        CliError { kind: Kind::Domain, message: message.into(), details: Value::Null }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError { kind: Kind::Io, message: format!("{}: {e}", path.display()), details: json!({ "path": path }) }
    }

    fn to_json(&self) -> String {
        let mut v = json!({ "error": self.kind, "exit_code": self.kind.code(), "message": self.message });
        if !self.details.is_null() {
            v["details"] = self.details.clone();
        }
        v.to_string()
    }
}

fn geometry_details(e: &GeometryError) -> Value {
    match e {
        GeometryError::Overlap { first, second } => json!({ "resonators": [first, second] }),
        GeometryError::InvalidResonator { index, .. }
        | GeometryError::OutsideDomain { index }
        | GeometryError::Window { index, .. } => json!({ "resonator": index }),
        _ => Value::Null,
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError { kind: Kind::Domain, details: geometry_details(&e), message: e.to_string() }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::Geometry(g) => g.into(),
            other => CliError::domain(other.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        let kind = match e {
            NumericsError::Dimension(_) | NumericsError::CountTooLarge { .. } => Kind::Domain,
            _ => Kind::Numerical,
        };
        CliError { kind, message: e.to_string(), details: Value::Null }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Geometry(g) => g.into(),
            HarnessError::Mesh(m) => m.into(),
            HarnessError::Numerics(n) => n.into(),
            other => {
                let kind = if other.is_numerical() { Kind::Numerical } else { Kind::Domain };
                CliError { kind, message: other.to_string(), details: Value::Null }
            }
        }
    }
}

impl From<CapacityError> for CliError {
    fn from(e: CapacityError) -> Self {
        match e {
            CapacityError::Mesh(m) => m.into(),
            CapacityError::Numerics(n) => n.into(),
            other => CliError::domain(other.to_string()),
        }
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::Geometry(g) => g.into(),
            DesignError::Oracle(h) => h.into(),
            other => {
                let kind = if other.is_numerical() { Kind::Numerical } else { Kind::Domain };
                CliError { kind, message: other.to_string(), details: Value::Null }
            }
        }
    }
}

#[derive(Serialize)]
struct OutputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    scene: Option<PathBuf>,
    parameters: BTreeMap<String, Value>,
    seed: u64,
    version: String,
    wall_clock_seconds: f64,
    outputs: Vec<OutputDigest>,
}

/// Collects outputs of one run and writes the manifest.
struct Run {
    out_dir: PathBuf,
    outputs: Vec<OutputDigest>,
    verbose: bool,
}

impl Run {
    fn write(&mut self, name: &Path, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        let digest = Sha256::digest(bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        if self.verbose {
            eprintln!("wrote {} ({} bytes)", path.display(), bytes.len());
        }
        self.outputs.push(OutputDigest { path: name.display().to_string(), sha256: hex });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::domain(e.to_string()))?;
        text.push('\n');
        self.write(Path::new(name), text.as_bytes())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_scene(global: &Global) -> Result<Scene, CliError> {
    let path = global.scene.as_ref().ok_or_else(|| CliError::domain("--scene is required"))?;
    let text = read_text(path)?;
    Scene::from_json(&text).map_err(|e| CliError::domain(format!("{}: {e}", path.display())))
}

fn parameters(cmd: &Command) -> BTreeMap<String, Value> {
    let mut p = BTreeMap::new();
    let mut put = |k: &str, v: Value| {
        p.insert(k.to_string(), v);
    };
    match cmd {
        Command::Mesh { out, svg, dump_matrices, count, disc } => {
            put("out", json!(out));
            put("svg", json!(svg));
            put("dump_matrices", json!(dump_matrices));
            put("count", json!(count));
            put("discretization", json!(disc));
        }
        Command::Capacity { half_width, method, min_h } => {
            put("half_width", json!(half_width));
            put("method", json!(method));
            put("min_h", json!(min_h));
        }
        Command::Converge { law, schedule, count, lambda_max, disc } => {
            put("law", json!(law));
            put("schedule", json!(schedule));
            put("count", json!(count));
            put("lambda_max", json!(lambda_max));
            put("discretization", json!(disc));
        }
        Command::Design { targets, eps, tol, eta, max_sweeps, check_truncation, disc } => {
            put("targets", json!(targets));
            put("eps", json!(eps));
            put("tol", json!(tol));
            put("eta", json!(eta));
            put("max_sweeps", json!(max_sweeps));
            put("check_truncation", json!(check_truncation));
            put("discretization", json!(disc));
        }
        Command::Report { csv } => put("csv", json!(csv)),
    }
    p
}

fn run_mesh(
    run: &mut Run,
    global: &Global,
    out: &Path,
    svg: bool,
    dump: bool,
    count: usize,
    disc: &Discretization,
) -> Result<(), CliError> {
    let domain = load_scene(global)?.build()?;
    let cfg = disc.config(global.seed);
    let grading = cfg.grading(&domain);
    let slit = mesh::triangulate(&domain, &grading)?;
    run.write(out, slit.to_text().as_bytes())?;
    if svg {
        run.write(&out.with_extension("svg"), slit.to_svg().as_bytes())?;
    }
    if dump || count > 0 {
        let (k, m) = numerics::assemble(&slit)?;
        let (k, m, _) = numerics::apply_dirichlet(&k, &m, &slit)?;
        if dump {
            run.write(Path::new("stiffness.mtx"), k.to_matrix_market().as_bytes())?;
            run.write(Path::new("mass.mtx"), m.to_matrix_market().as_bytes())?;
        }
        if count > 0 {
            let spectrum = numerics::smallest_eigenpairs_with(&k, &m, count, cfg.eig_tol, &cfg.eigen)?;
            run.json("spectrum.json", &spectrum)?;
        }
    }
    let report = mesh::validate(&slit);
    if global.verbose {
        eprintln!("{} nodes, {} triangles, h_min {:e}", slit.nodes.len(), slit.triangles.len(), slit.h_min);
    }
    if !report.is_valid() {
        return Err(CliError { kind: Kind::Numerical, message: "mesh failed validation".into(), details: json!(report) });
    }
    Ok(())
}

fn run_capacity(run: &mut Run, a: f64, method: &str, min_h: Option<f64>) -> Result<(), CliError> {
    let result = match method {
        "fem" => {
            let mut grading = capacity::default_grading(a);
            if let Some(h) = min_h {
                grading.min_h = h;
            }
            capacity::capacity_fem_2d(a, &grading)?
        }
        "asymptotic" => capacity::capacity_asymptotic(2, a, 0.0)?,
        other => return Err(CliError::domain(format!("unknown capacity method {other:?}"))),
    };
    run.json("capacity.json", &json!({ "half_width": a, "result": result }))
}

fn run_converge(
    run: &mut Run,
    global: &Global,
    law: &[f64],
    schedule: &[f64],
    count: usize,
    lambda_max: f64,
    disc: &Discretization,
) -> Result<(), CliError> {
    let scene = load_scene(global)?;
    let laws: Vec<ScalingLaw> = law.iter().map(|&c| ScalingLaw::planar(c)).collect();
    let cfg = disc.config(global.seed);
    let conv = harness::run_convergence(&scene.outer, &scene.resonators, &laws, schedule, count, lambda_max, &cfg)?;
    run.write(Path::new("converge.csv"), conv.to_csv().as_bytes())?;
    run.json("converge.json", &conv)?;
    let failed: Vec<String> = conv
        .rows
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| format!("eps {}", r.eps))
        .collect();
    if !failed.is_empty() {
        return Err(CliError {
            kind: Kind::Numerical,
            message: format!("{} of {} rows failed", failed.len(), conv.rows.len()),
            details: json!({ "rows": failed }),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_design(
    run: &mut Run,
    global: &Global,
    targets: &[f64],
    eps: f64,
    tol: f64,
    eta: Option<f64>,
    max_sweeps: usize,
    check_truncation: bool,
    disc: &Discretization,
) -> Result<(), CliError> {
    let scene = load_scene(global)?;
    if !matches!(scene.outer, OuterSpec::TruncatedWaveguide { .. }) {
        return Err(CliError::domain("design needs a truncated waveguide scene"));
    }
    let problem = DesignProblem {
        waveguide: scene.outer,
        resonators: scene.resonators.iter().map(|r| Placement { center: r.center, ell: r.ell }).collect(),
        eps,
        targets: targets.to_vec(),
        eta,
        tol,
    };
    let oracle = FemOracle::new(&problem, disc.config(global.seed));
    let options = DesignOptions { max_sweeps, ..DesignOptions::default() };
    let result = match designer::design(&problem, &oracle, &options) {
        Ok(r) => r,
        Err(DesignError::NoConvergence { sweeps, worst, trace }) => {
            let partial = designer::DesignResult {
                d_tilde: Vec::new(),
                achieved: Vec::new(),
                brackets: Vec::new(),
                eta: 0.0,
                lambda_prime: 0.0,
                lambda_double_prime: 0.0,
                below_threshold: 0,
                sweeps,
                trace: *trace.clone(),
            };
            run.write(Path::new("design_trace.csv"), partial.to_csv().as_bytes())?;
            return Err(DesignError::NoConvergence { sweeps, worst, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    run.write(Path::new("design_trace.csv"), result.to_csv().as_bytes())?;
    let shift = if check_truncation {
        Some(designer::truncation_shift(&oracle, &result.d_tilde)?)
    } else {
        None
    };
    run.json("design.json", &json!({ "problem": problem, "result": result, "truncation_shift": shift }))
}

fn run_report(run: &mut Run, csv: &Path) -> Result<(), CliError> {
    let text = read_text(csv)?;
    let (trajectory, rate) = harness::report_svgs(&text)?;
    run.write(Path::new("trajectory.svg"), trajectory.as_bytes())?;
    run.write(Path::new("rate.svg"), rate.as_bytes())
}

fn dispatch(cli: &Cli, run: &mut Run) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Mesh { out, svg, dump_matrices, count, disc } => run_mesh(run, g, out, *svg, *dump_matrices, *count, disc),
        Command::Capacity { half_width, method, min_h } => run_capacity(run, *half_width, method, *min_h),
        Command::Converge { law, schedule, count, lambda_max, disc } => {
            run_converge(run, g, law, schedule, *count, *lambda_max, disc)
        }
        Command::Design { targets, eps, tol, eta, max_sweeps, check_truncation, disc } => {
            run_design(run, g, targets, *eps, *tol, *eta, *max_sweeps, *check_truncation, disc)
        }
        Command::Report { csv } => run_report(run, csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::domain(format!("thread pool: {e}")).to_json());
            return ExitCode::from(Kind::Domain.code());
        }
    }
    let start = Instant::now();
    let mut run = Run { out_dir: cli.global.out_dir.clone(), outputs: Vec::new(), verbose: cli.global.verbose };
    let outcome = dispatch(&cli, &mut run);
    let mut result = outcome;
    if !run.outputs.is_empty() {
        let manifest = RunManifest {
            subcommand: cli.command.name().to_string(),
            scene: cli.global.scene.clone(),
            parameters: parameters(&cli.command),
            seed: cli.global.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            outputs: std::mem::take(&mut run.outputs),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = run.out_dir.join("manifest.json");
        if let Err(e) = fs::write(&path, text + "\n") {
            if result.is_ok() {
                result = Err(CliError::io(&path, e));
            }
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.code())
        }
    }
}
