//! Pipeline driver for the region-of-attraction toolchain.
//!
//! Each subcommand reads its predecessor's artifacts from the output
//! directory and writes its own, so every stage of the certification
//! procedure is independently inspectable: find-cycle -> surfaces ->
//! linearize -> design-lqr -> verify -> audit / export-plot. The `verify`
//! subcommand fills in any missing prerequisite itself, so it also works
//! end-to-end when given only a system name. A `manifest.json` describing
//! the run is kept alongside the artifacts; re-running a subcommand with the
//! same manifest reproduces its outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use roa_core::hybrid::{builtin, HybridSystem, SystemParams};
use roa_core::orbit::{find_limit_cycle, CycleOptions, PeriodicOrbit};
use roa_core::plqr::{
    feedback, jump_riccati, periodic_lyapunov, spectral_radius, transverse_monodromy,
    PeriodicMatrixFunction, TransverseController,
};
use roa_core::sos::{
    boundary_audit, export_region, polynomial_transverse_dynamics, verify_roa, Certificate,
    CertificateFile, RoaOptions,
};
use roa_core::transverse::{linearize, make_surfaces, Strategy, TransversalFamily, TransverseLTV};
use roa_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "roa",
    about = "Certify inner region-of-attraction estimates for hybrid limit cycles"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the periodic orbit and write orbit.json.
    FindCycle(FindCycleArgs),
    /// Build the transversal-surface family and write surfaces.json.
    Surfaces(SurfacesArgs),
    /// Compute the transverse linearization and write ltv.json.
    Linearize(CommonArgs),
    /// Solve the periodic Riccati/Lyapunov equation; write value.json and,
    /// for actuated systems, controller.json.
    DesignLqr(CommonArgs),
    /// Run the full four-step certification and write certificate.json.
    Verify(VerifyArgs),
    /// Monte Carlo check of the certificate boundary; write audit.csv.
    Audit(AuditArgs),
    /// Export certified-region boundary data from stored artifacts.
    ExportPlot(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory holding the manifest and artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Built-in system name: van-der-pol | rimless-wheel | compass-gait.
    #[arg(long)]
    system: Option<String>,
    /// JSON file with system parameters (SystemParams schema).
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct FindCycleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of phase intervals recorded along the orbit.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated initial guess overriding the built-in default.
    #[arg(long)]
    guess: Option<String>,
}

#[derive(Args)]
struct SurfacesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Surface strategy: orthogonal | radial | vertical | optimized.
    #[arg(long)]
    surfaces: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    surfaces: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    /// Taylor order of the polynomial transverse dynamics.
    #[arg(long)]
    taylor_order: Option<u32>,
    /// Degree of the Bernstein level-rescaling polynomial rho(tau).
    #[arg(long)]
    rho_degree: Option<usize>,
    /// Cap on bilinear alternation iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of concurrent L-step subproblem solves.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Boundary samples drawn per recorded phase.
    #[arg(long, default_value_t = 1000)]
    samples_per_phase: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Boundary points per recorded phase.
    #[arg(long, default_value_t = 64)]
    points_per_phase: usize,
}

/// Everything that determines a run; serialized next to the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    schema: u32,
    system: String,
    params_file: Option<String>,
    surfaces: String,
    samples: usize,
    taylor_order: u32,
    rho_degree: usize,
    max_iters: usize,
    /// Row-major weight matrices actually used by design-lqr/verify.
    q: Option<Vec<f64>>,
    r: Option<Vec<f64>>,
    qi: Option<Vec<f64>>,
    seed: u64,
    jobs: Option<usize>,
}

impl RunManifest {
    fn new(system: String) -> Self {
        RunManifest {
            schema: 1,
            system,
            params_file: None,
            surfaces: "orthogonal".into(),
            samples: 40,
            taylor_order: 3,
            rho_degree: 0,
            max_iters: 10,
            q: None,
            r: None,
            qi: None,
            seed: 12345,
            jobs: None,
        }
    }
}

/// Artifact file names inside the output directory.
struct Store {
    out: PathBuf,
}

impl Store {
    fn new(out: &Path) -> Result<Store> {
        fs::create_dir_all(out)?;
        Ok(Store {
            out: out.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: &str) -> Result<T> {
        let text = fs::read_to_string(self.path(name)).map_err(|_| Error::MissingArtifact {
            artifact: name.into(),
            subcommand: producer.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn manifest(&self) -> Option<RunManifest> {
        let text = fs::read_to_string(self.path("manifest.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn save_manifest(&self, man: &RunManifest) -> Result<()> {
        self.write_json("manifest.json", man)
    }
}

/// Resolves the manifest for a command: stored manifest updated by flags, or
/// a fresh one if the directory is new (then --system is required).
fn resolve_manifest(store: &Store, common: &CommonArgs) -> Result<RunManifest> {
    let mut man = match (store.manifest(), &common.system) {
        (Some(m), _) => m,
        (None, Some(name)) => RunManifest::new(name.clone()),
        (None, None) => {
            return Err(Error::InvalidParams(
                "no manifest in the output directory; pass --system".into(),
            ))
        }
    };
    if let Some(name) = &common.system {
        man.system = name.clone();
    }
    if let Some(p) = &common.params {
        man.params_file = Some(p.display().to_string());
    }
    Ok(man)
}

fn load_params(man: &RunManifest) -> Result<Option<SystemParams>> {
    match &man.params_file {
        None => Ok(None),
        Some(path) => {
            let text = fs::read_to_string(path)?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

fn build_system(man: &RunManifest) -> Result<HybridSystem> {
    builtin(&man.system, load_params(man)?)
}

/// Built-in initial guesses for the cycle search.
fn default_guess(sys: &HybridSystem) -> Result<Vec<f64>> {
    match sys.name.as_str() {
        "van-der-pol" => Ok(vec![2.0, 0.0]),
        "rimless-wheel" => {
            let p = roa_core::hybrid::RimlessWheelParams::default();
            Ok(vec![p.gamma - p.alpha, 0.8])
        }
        "compass-gait" => Ok(vec![-0.32, 0.22, -0.38, -1.09]),
        other => Err(Error::UnknownSystem(other.into())),
    }
}

fn parse_strategy(name: &str, state_dim: usize) -> Result<Strategy> {
    match name {
        "orthogonal" => Ok(Strategy::Orthogonal),
        "radial" => Ok(Strategy::Radial {
            center: vec![0.0; state_dim],
        }),
        "vertical" => Ok(Strategy::Vertical),
        "optimized" => Ok(Strategy::Optimized),
        other => Err(Error::InvalidParams(format!(
            "unknown surface strategy '{other}' (orthogonal | radial | vertical | optimized)"
        ))),
    }
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn rows_mat(rows: &[f64], nr: usize, nc: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nr * nc {
        return Err(Error::DimensionMismatch {
            expected: nr * nc,
            got: rows.len(),
            context: "serialized matrix",
        });
    }
    Ok(DMatrix::from_row_slice(nr, nc, rows))
}

/// Serialized transverse linearization.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LtvFile {
    schema: u32,
    period: f64,
    dim: usize,
    input_dim: usize,
    taus: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    a_d: Vec<Vec<f64>>,
}

impl LtvFile {
    fn from_ltv(ltv: &TransverseLTV) -> LtvFile {
        let d = ltv.a[0].nrows();
        LtvFile {
            schema: 1,
            period: ltv.period,
            dim: d,
            input_dim: ltv.b[0].ncols(),
            taus: ltv.taus.clone(),
            a: ltv.a.iter().map(mat_rows).collect(),
            b: ltv.b.iter().map(mat_rows).collect(),
            a_d: ltv.a_d.iter().map(mat_rows).collect(),
        }
    }

    fn to_ltv(&self) -> Result<TransverseLTV> {
        let d = self.dim;
        Ok(TransverseLTV {
            taus: self.taus.clone(),
            a: self
                .a
                .iter()
                .map(|r| rows_mat(r, d, d))
                .collect::<Result<_>>()?,
            b: self
                .b
                .iter()
                .map(|r| rows_mat(r, d, self.input_dim))
                .collect::<Result<_>>()?,
            a_d: self
                .a_d
                .iter()
                .map(|r| rows_mat(r, d, d))
                .collect::<Result<_>>()?,
            period: self.period,
        })
    }
}

/// Serialized periodic value function P(tau).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValueFile {
    schema: u32,
    period: f64,
    hybrid: bool,
    dim: usize,
    taus: Vec<f64>,
    p: Vec<Vec<f64>>,
    pdot: Vec<Vec<f64>>,
    /// Spectral radius of the closed-loop transverse monodromy.
    monodromy_radius: f64,
}

impl ValueFile {
    fn from_value(p: &PeriodicMatrixFunction, radius: f64) -> ValueFile {
        ValueFile {
            schema: 1,
            period: p.period,
            hybrid: p.hybrid,
            dim: p.dim(),
            taus: p.taus.clone(),
            p: p.p.iter().map(mat_rows).collect(),
            pdot: p.pdot.iter().map(mat_rows).collect(),
            monodromy_radius: radius,
        }
    }
}

/// Serialized gain schedule K(tau).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControllerFile {
    schema: u32,
    period: f64,
    hybrid: bool,
    dim: usize,
    input_dim: usize,
    taus: Vec<f64>,
    gains: Vec<Vec<f64>>,
    q: Vec<f64>,
    r: Vec<f64>,
    qi: Vec<f64>,
}

impl ControllerFile {
    fn from_controller(c: &TransverseController) -> ControllerFile {
        ControllerFile {
            schema: 1,
            period: c.period,
            hybrid: c.hybrid,
            dim: c.q.nrows(),
            input_dim: c.r.nrows(),
            taus: c.taus.clone(),
            gains: c.gains.iter().map(mat_rows).collect(),
            q: mat_rows(&c.q),
            r: mat_rows(&c.r),
            qi: mat_rows(&c.qi),
        }
    }

    fn to_controller(&self) -> Result<TransverseController> {
        Ok(TransverseController {
            taus: self.taus.clone(),
            gains: self
                .gains
                .iter()
                .map(|r| rows_mat(r, self.input_dim, self.dim))
                .collect::<Result<_>>()?,
            q: rows_mat(&self.q, self.dim, self.dim)?,
            r: rows_mat(&self.r, self.input_dim, self.input_dim)?,
            qi: rows_mat(&self.qi, self.dim, self.dim)?,
            period: self.period,
            hybrid: self.hybrid,
        })
    }
}

/// Audit summary written next to the per-sample CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AuditSummary {
    schema: u32,
    samples: usize,
    violations: usize,
    fraction_negative: f64,
    max_violation: f64,
    samples_per_phase: usize,
    seed: u64,
}

fn load_orbit(store: &Store) -> Result<PeriodicOrbit> {
    store.read_json("orbit.json", "find-cycle")
}

fn load_family(store: &Store) -> Result<TransversalFamily> {
    let mut family: TransversalFamily = store.read_json("surfaces.json", "surfaces")?;
    family.rebuild_frames();
    Ok(family)
}

fn load_ltv(store: &Store) -> Result<TransverseLTV> {
    let file: LtvFile = store.read_json("ltv.json", "linearize")?;
    file.to_ltv()
}

fn load_controller(store: &Store) -> Result<Option<TransverseController>> {
    if !store.path("controller.json").exists() {
        return Ok(None);
    }
    let file: ControllerFile = store.read_json("controller.json", "design-lqr")?;
    Ok(Some(file.to_controller()?))
}

fn load_certificate(store: &Store) -> Result<Certificate> {
    let file: CertificateFile = store.read_json("certificate.json", "verify")?;
    Certificate::from_file(&file)
}

fn cmd_find_cycle(args: &FindCycleArgs) -> Result<()> {
    let store = Store::new(&args.common.out)?;
    let mut man = resolve_manifest(&store, &args.common)?;
    if let Some(s) = args.samples {
        man.samples = s;
    }
    let sys = build_system(&man)?;
    let guess = match &args.guess {
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidParams(format!("bad guess entry '{s}'")))
            })
            .collect::<Result<Vec<f64>>>()?,
        None => default_guess(&sys)?,
    };
    let opts = CycleOptions {
        samples: man.samples,
        ..CycleOptions::default()
    };
    let orbit = find_limit_cycle(&sys, &guess, &opts)?;
    store.write_json("orbit.json", &orbit)?;
    store.save_manifest(&man)?;
    println!(
        "find-cycle: {} period {:.9} ({} samples)",
        man.system, orbit.period, man.samples
    );
    Ok(())
}

fn cmd_surfaces(args: &SurfacesArgs) -> Result<()> {
    let store = Store::new(&args.common.out)?;
    let mut man = resolve_manifest(&store, &args.common)?;
    if let Some(s) = &args.surfaces {
        man.surfaces = s.clone();
    }
    let sys = build_system(&man)?;
    let orbit = load_orbit(&store)?;
    let strategy = parse_strategy(&man.surfaces, sys.state_dim())?;
    let family = make_surfaces(&orbit, &sys, strategy)?;
    store.write_json("surfaces.json", &family)?;
    store.save_manifest(&man)?;
    println!("surfaces: {} strategy over {} phases", man.surfaces, family.taus.len());
    Ok(())
}

fn cmd_linearize(common: &CommonArgs) -> Result<()> {
    let store = Store::new(&common.out)?;
    let man = resolve_manifest(&store, common)?;
    let sys = build_system(&man)?;
    let orbit = load_orbit(&store)?;
    let family = load_family(&store)?;
    let ltv = linearize(&family, &orbit, &sys)?;
    store.write_json("ltv.json", &LtvFile::from_ltv(&ltv))?;
    store.save_manifest(&man)?;
    println!(
        "linearize: {} phases, input dim {}",
        ltv.taus.len(),
        ltv.b[0].ncols()
    );
    Ok(())
}

/// Weight matrices from the manifest, or identity defaults matching the
/// verifier's conventions (Q = I, R = I, Qi = 0.1 I).
fn weights(man: &RunManifest, d: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let q = match &man.q {
        Some(rows) => rows_mat(rows, d, d)?,
        None => DMatrix::identity(d, d),
    };
    let r = match &man.r {
        Some(rows) => rows_mat(rows, m, m)?,
        None => DMatrix::identity(m, m),
    };
    let qi = match &man.qi {
        Some(rows) => rows_mat(rows, d, d)?,
        None => DMatrix::identity(d, d) * 0.1,
    };
    Ok((q, r, qi))
}

fn cmd_design_lqr(common: &CommonArgs) -> Result<()> {
    let store = Store::new(&common.out)?;
    let mut man = resolve_manifest(&store, common)?;
    let sys = build_system(&man)?;
    let ltv = load_ltv(&store)?;
    let d = ltv.a[0].nrows();
    let m = ltv.b[0].ncols();
    let (q, r, qi) = weights(&man, d, m)?;
    let (value, controller) = if sys.input_dim() > 0 {
        let p = jump_riccati(&ltv, &q, &r, &qi)?;
        let c = feedback(&p, &ltv, &q, &r, &qi)?;
        (p, Some(c))
    } else {
        (periodic_lyapunov(&ltv, &q, &qi)?, None)
    };
    // closed-loop transverse monodromy radius for the report
    let mut closed = ltv.clone();
    if let Some(c) = &controller {
        for ((a, b), &tau) in closed.a.iter_mut().zip(&closed.b).zip(&closed.taus) {
            *a -= b * c.gain_at(tau);
        }
    }
    let radius = spectral_radius(&transverse_monodromy(&closed)?);
    store.write_json("value.json", &ValueFile::from_value(&value, radius))?;
    if let Some(c) = &controller {
        store.write_json("controller.json", &ControllerFile::from_controller(c))?;
    }
    man.q = Some(mat_rows(&q));
    man.r = Some(mat_rows(&r));
    man.qi = Some(mat_rows(&qi));
    store.save_manifest(&man)?;
    println!(
        "design-lqr: {} monodromy radius {:.6}",
        if controller.is_some() {
            "closed-loop"
        } else {
            "open-loop"
        },
        radius
    );
    Ok(())
}

fn roa_options(man: &RunManifest, d: usize) -> Result<RoaOptions> {
    let mut opts = RoaOptions {
        taylor_order: man.taylor_order,
        rho_degree: man.rho_degree,
        max_iters: man.max_iters,
        seed: man.seed,
        ..RoaOptions::default()
    };
    if let Some(rows) = &man.q {
        opts.q = Some(rows_mat(rows, d, d)?);
    }
    if let Some(rows) = &man.qi {
        opts.qi = Some(rows_mat(rows, d, d)?);
    }
    Ok(opts)
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let store = Store::new(&args.common.out)?;
    let mut man = resolve_manifest(&store, &args.common)?;
    if let Some(s) = &args.surfaces {
        man.surfaces = s.clone();
    }
    if let Some(v) = args.samples {
        man.samples = v;
    }
    if let Some(v) = args.taylor_order {
        man.taylor_order = v;
    }
    if let Some(v) = args.rho_degree {
        man.rho_degree = v;
    }
    if let Some(v) = args.iters {
        man.max_iters = v;
    }
    if let Some(v) = args.seed {
        man.seed = v;
    }
    if let Some(v) = args.jobs {
        man.jobs = Some(v);
        rayon::ThreadPoolBuilder::new()
            .num_threads(v)
            .build_global()
            .map_err(|e| Error::Other(format!("thread pool: {e}")))?;
    }
    store.save_manifest(&man)?;
    let sys = build_system(&man)?;

    // fill in any missing pipeline stage, reusing stored artifacts otherwise
    if !store.path("orbit.json").exists() {
        let opts = CycleOptions {
            samples: man.samples,
            ..CycleOptions::default()
        };
        let orbit = find_limit_cycle(&sys, &default_guess(&sys)?, &opts)?;
        store.write_json("orbit.json", &orbit)?;
    }
    let orbit = load_orbit(&store)?;
    if !store.path("surfaces.json").exists() {
        let strategy = parse_strategy(&man.surfaces, sys.state_dim())?;
        let family = make_surfaces(&orbit, &sys, strategy)?;
        store.write_json("surfaces.json", &family)?;
    }
    let family = load_family(&store)?;
    if !store.path("ltv.json").exists() {
        let ltv = linearize(&family, &orbit, &sys)?;
        store.write_json("ltv.json", &LtvFile::from_ltv(&ltv))?;
    }
    if sys.input_dim() > 0 && !store.path("controller.json").exists() {
        let ltv = load_ltv(&store)?;
        let (q, r, qi) = weights(&man, ltv.a[0].nrows(), ltv.b[0].ncols())?;
        let p = jump_riccati(&ltv, &q, &r, &qi)?;
        let c = feedback(&p, &ltv, &q, &r, &qi)?;
        let mut closed = ltv.clone();
        for ((a, b), &tau) in closed.a.iter_mut().zip(&closed.b).zip(&closed.taus) {
            *a -= b * c.gain_at(tau);
        }
        let radius = spectral_radius(&transverse_monodromy(&closed)?);
        store.write_json("value.json", &ValueFile::from_value(&p, radius))?;
        store.write_json("controller.json", &ControllerFile::from_controller(&c))?;
    }
    let controller = load_controller(&store)?;

    let opts = roa_options(&man, sys.state_dim() - 1)?;
    let cert = verify_roa(&family, &orbit, &sys, controller.as_ref(), &opts)?;
    store.write_json("certificate.json", &cert.to_file())?;
    let integral = cert.rho.integral();
    println!(
        "verify: certified level integral {:.6e} in {} iterations (sigma0 {:.6e})",
        integral,
        cert.history.len(),
        cert.sigma0
    );
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let store = Store::new(&args.common.out)?;
    let man = resolve_manifest(&store, &args.common)?;
    let seed = args.seed.unwrap_or(man.seed);
    let sys = build_system(&man)?;
    let orbit = load_orbit(&store)?;
    let family = load_family(&store)?;
    let controller = load_controller(&store)?;
    let cert = load_certificate(&store)?;
    let dynamics = polynomial_transverse_dynamics(
        &family,
        &orbit,
        &sys,
        controller.as_ref(),
        cert.taylor_order,
    )?;
    let report = boundary_audit(
        &cert,
        &family,
        &orbit,
        &sys,
        controller.as_ref(),
        &dynamics,
        args.samples_per_phase,
        seed,
    );
    fs::write(store.path("audit.csv"), report.to_csv())?;
    let summary = AuditSummary {
        schema: 1,
        samples: report.samples,
        violations: report.violations,
        fraction_negative: report.fraction_negative(),
        max_violation: report.max_violation,
        samples_per_phase: args.samples_per_phase,
        seed,
    };
    store.write_json("audit_summary.json", &summary)?;
    println!(
        "audit: {}/{} negative dV/dt ({:.4}%), max violation {:.6e}",
        report.samples - report.violations,
        report.samples,
        100.0 * summary.fraction_negative,
        report.max_violation
    );
    Ok(())
}

fn cmd_export_plot(args: &ExportArgs) -> Result<()> {
    let store = Store::new(&args.common.out)?;
    let _ = resolve_manifest(&store, &args.common)?;
    let orbit = load_orbit(&store)?;
    let family = load_family(&store)?;
    let cert = load_certificate(&store)?;
    let region = export_region(&cert, &family, &orbit, args.points_per_phase);
    fs::write(store.path("region.csv"), &region)?;

    // orbit trace for overplotting
    let mut orbit_csv = String::from("tau");
    let n = orbit.states[0].len();
    for i in 0..n {
        orbit_csv.push_str(&format!(",x{i}"));
    }
    orbit_csv.push('\n');
    for (tau, x) in orbit.taus.iter().zip(&orbit.states) {
        orbit_csv.push_str(&format!("{tau:.17e}"));
        for v in x {
            orbit_csv.push_str(&format!(",{v:.17e}"));
        }
        orbit_csv.push('\n');
    }
    fs::write(store.path("orbit.csv"), &orbit_csv)?;

    // planar projections for 4-state walkers: (q1, q1dot) and (q2, q2dot)
    if n == 4 {
        for (name, (a, b)) in [("region_leg1.csv", (0, 2)), ("region_leg2.csv", (1, 3))] {
            let mut proj = String::from("tau,q,qdot\n");
            for line in region.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                proj.push_str(&format!("{},{},{}\n", cols[0], cols[1 + a], cols[1 + b]));
            }
            fs::write(store.path(name), proj)?;
        }
    }
    println!(
        "export-plot: region.csv with {} boundary points",
        region.lines().count().saturating_sub(1)
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Command::FindCycle(a) => cmd_find_cycle(a),
        Command::Surfaces(a) => cmd_surfaces(a),
        Command::Linearize(a) => cmd_linearize(a),
        Command::DesignLqr(a) => cmd_design_lqr(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Audit(a) => cmd_audit(a),
        Command::ExportPlot(a) => cmd_export_plot(a),
    }
}

fn main() -> std::process::ExitCode {
    match run() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
