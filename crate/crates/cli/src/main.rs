//! `truckloop`: generate instances, assign truck routes, simulate them and
//! compare runs.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use truckloop::anneal::{AnnealError, CoolingKind, Schedule, SolverRegistry};
use truckloop::model::{generate_instance, GeneratorConfig, ModelError, ProblemInstance, TimeMatrix};
use truckloop::pubo_builder::Route;
use truckloop::seed::derive_seed;
use truckloop::simulate::{self, PickupOrder, SimError, SimOptions, SimReport};
use truckloop::truck_loop::{self, LoopConfig, LoopError};

#[derive(Parser)]
#[command(name = "truckloop", version, about = "Truck-by-truck PUBO routing and box-level simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance.
    Gen(GenArgs),
    /// Assign routes truck by truck.
    Solve(SolveArgs),
    /// Simulate a plan box by box and apply route correction.
    Simulate(SimulateArgs),
    /// Tabulate simulation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "instance.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 23)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    boxes: usize,
    #[arg(long, default_value_t = 115)]
    paths: usize,
    #[arg(long, default_value_t = 0.3)]
    rank3_fraction: f64,
    #[arg(long, default_value_t = 57_600.0)]
    window_s: f64,
    #[arg(long)]
    asymmetric: bool,
    /// Replace the generated driving times with an n x n CSV matrix.
    #[arg(long)]
    time_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Sa,
    External,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Sa)]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    delta_max: Option<usize>,
    #[arg(long)]
    a_local: Option<f64>,
    #[arg(long)]
    a_demand: Option<f64>,
    #[arg(long)]
    a_time: Option<f64>,
    #[arg(long)]
    a_nonredundant: Option<f64>,
    #[arg(long)]
    redundancy_threshold: Option<f64>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    max_trucks: Option<usize>,
    #[arg(long)]
    solver: Option<String>,
    /// Annealing sweeps per restart.
    #[arg(long)]
    sa_steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Plan or corrected-routes file; only its "routes" are read.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = simulate::DEFAULT_ROUNDS)]
    rounds: usize,
    /// Simulate only the first K routes.
    #[arg(long)]
    keep_trucks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load eligible boxes in seeded random order instead of by id.
    #[arg(long)]
    shuffle_pickup: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Param(String),
    Io(String),
    Parse(String),
    Solver(String),
    Validation(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "ERR_USAGE",
            CliError::Param(_) => "ERR_PARAM",
            CliError::Io(_) => "ERR_IO",
            CliError::Parse(_) => "ERR_PARSE",
            CliError::Solver(_) => "ERR_SOLVER",
            CliError::Validation(_) => "ERR_VALIDATION",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (CliError::Usage(m)
        | CliError::Param(m)
        | CliError::Io(m)
        | CliError::Parse(m)
        | CliError::Solver(m)
        | CliError::Validation(m)) = self;
        // One line, whatever the source said.
        write!(f, "{}: {}", self.code(), m.replace('\n', " "))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Parse(_) => CliError::Parse(e.to_string()),
            ModelError::Parameter(_) => CliError::Param(e.to_string()),
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Validation { .. } | ModelError::UnsupportedRank(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Solver { .. } => CliError::Solver(e.to_string()),
            LoopError::Pubo(_) | LoopError::Config(_) => CliError::Param(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let cfg = GeneratorConfig {
        n: a.n,
        boxes: a.boxes,
        paths: a.paths,
        rank3_fraction: a.rank3_fraction,
        window_s: a.window_s,
        symmetric: !a.asymmetric,
        ..GeneratorConfig::default()
    };
    let mut inst = generate_instance(&cfg, a.seed)?;
    if let Some(csv) = &a.time_csv {
        let time = TimeMatrix::from_csv_path(csv)?;
        if time.n() != inst.n {
            return Err(CliError::Validation(format!(
                "{} is {1}x{1} but the instance has n = {2}",
                csv.display(),
                time.n(),
                inst.n
            )));
        }
        inst.time = time;
    }
    inst.save(&a.out)?;
    let paths = truckloop::model::group_boxes(&inst.boxes).len();
    println!("n: {}", inst.n);
    println!("boxes: {}", inst.boxes.len());
    println!("distinct paths: {paths}");
    println!("total volume: {:.4}", inst.total_volume());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn loop_config(a: &SolveArgs, inst: &ProblemInstance) -> LoopConfig {
    let mut cfg = match a.profile {
        Profile::Sa => LoopConfig::sa_profile(inst.window),
        Profile::External => LoopConfig::external_profile(inst.window),
    };
    let p = &mut cfg.params;
    p.tau = a.tau.unwrap_or(p.tau);
    p.delta_max = a.delta_max.unwrap_or(p.delta_max);
    p.a_local = a.a_local.unwrap_or(p.a_local);
    p.a_demand = a.a_demand.unwrap_or(p.a_demand);
    p.a_time = a.a_time.unwrap_or(p.a_time);
    p.a_nonredundant = a.a_nonredundant.unwrap_or(p.a_nonredundant);
    p.redundancy_threshold = a.redundancy_threshold.unwrap_or(p.redundancy_threshold);
    cfg.demand_cutoff = a.cutoff.unwrap_or(cfg.demand_cutoff);
    cfg.max_trucks = a.max_trucks.unwrap_or(cfg.max_trucks);
    if let Some(s) = &a.solver {
        cfg.solver_name = s.clone();
    }
    if let Some(steps) = a.sa_steps {
        cfg.solver_cfg.schedule = Schedule::Auto {
            kind: CoolingKind::Geometric,
            num_steps: steps,
        };
    }
    cfg.solver_cfg.num_restarts = a.restarts.unwrap_or(cfg.solver_cfg.num_restarts);
    cfg.solver_cfg.seed = derive_seed(a.seed, "solve");
    cfg
}

fn cmd_solve(a: SolveArgs) -> Result<(), CliError> {
    let inst = ProblemInstance::load(&a.instance)?;
    let cfg = loop_config(&a, &inst);
    let registry = SolverRegistry::from_env();
    if !registry.contains(&cfg.solver_name) {
        let known: Vec<&str> = registry.names().collect();
        return Err(CliError::Solver(format!(
            "{}; available: {}",
            AnnealError::UnknownSolver(cfg.solver_name.clone()),
            known.join(", ")
        )));
    }
    ensure_dir(&a.out)?;
    let dbar = inst.overall_demand()?;
    let mut records = Vec::new();
    let plan = truck_loop::run_truck_loop_with(&registry, &dbar, &inst.time, &cfg, |r| {
        log::info!("truck {}: estimated {:.5}, residual max {:.5}", r.truck, r.estimated, r.residual_max);
        records.push(*r);
    })?;
    let plan_path = a.out.join("plan.json");
    write_file(&plan_path, &plan.to_json())?;
    let log_path = a.out.join("trucks.csv");
    let mut w = create(&log_path)?;
    truck_loop::write_truck_log(&mut w, &records)
        .and_then(|_| w.flush())
        .map_err(io_err(&log_path))?;
    println!("solver: {}, tau: {}", cfg.solver_name, cfg.tau());
    println!("trucks: {}", plan.routes.len());
    println!("estimated demand served: {:.4}", plan.per_truck_estimated_demand.iter().sum::<f64>());
    println!("residual max: {:.6}", plan.residual_demand.max());
    println!("wrote {} and {}", plan_path.display(), log_path.display());
    Ok(())
}

#[derive(Deserialize)]
struct RoutesFile {
    routes: Vec<Route>,
}

fn load_routes(path: &Path, inst: &ProblemInstance) -> Result<Vec<Route>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: RoutesFile =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    simulate::validate_routes(inst, &file.routes)?;
    Ok(file
        .routes
        .into_iter()
        .map(|r| Route::new(r.nodes, &inst.time))
        .collect())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let inst = ProblemInstance::load(&a.instance)?;
    let mut routes = load_routes(&a.plan, &inst)?;
    if let Some(k) = a.keep_trucks {
        routes.truncate(k);
    }
    let opts = SimOptions {
        pickup_order: if a.shuffle_pickup {
            PickupOrder::Shuffled {
                seed: derive_seed(a.seed, "pickup"),
            }
        } else {
            PickupOrder::AscendingId
        },
        strict: false,
    };
    let before = simulate::run_full_simulation(&inst, &routes)?;
    let (routes, sim) = simulate::correct_routes(&inst, &routes, a.rounds, &opts)?;
    if !sim.report.violations.is_empty() {
        return Err(CliError::Validation(format!(
            "simulation recorded {} violations, first: {}",
            sim.report.violations.len(),
            sim.report.violations[0]
        )));
    }
    ensure_dir(&a.out)?;
    write_file(&a.out.join("report.json"), &sim.report.to_json())?;
    let corrected = serde_json::json!({ "routes": routes });
    write_file(
        &a.out.join("corrected_routes.json"),
        &serde_json::to_string_pretty(&corrected).expect("routes serialize"),
    )?;
    let events_path = a.out.join("events.jsonl");
    let mut w = create(&events_path)?;
    simulate::write_event_log(&mut w, &sim.report.event_log)
        .and_then(|_| w.flush())
        .map_err(io_err(&events_path))?;
    write_file(
        &a.out.join("itineraries.json"),
        &serde_json::to_string_pretty(&sim.itineraries).expect("itineraries serialize"),
    )?;
    println!("trucks: {}", routes.len());
    println!("satisfied volume before correction: {:.2}%", 100.0 * before.satisfied_volume_fraction);
    println!("satisfied volume: {:.2}%", 100.0 * sim.report.satisfied_volume_fraction);
    println!("satisfied boxes: {:.2}%", 100.0 * sim.report.satisfied_box_fraction);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &a.reports {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let report = SimReport::from_json(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        let run = path.display().to_string();
        rows.push((run, report));
    }
    rows.sort_by(|a, b| {
        b.1.satisfied_volume_fraction
            .total_cmp(&a.1.satisfied_volume_fraction)
            .then_with(|| a.0.cmp(&b.0))
    });
    ensure_dir(&a.out)?;

    let table_path = a.out.join("comparison.csv");
    let mut w = create(&table_path)?;
    let mut edges_out = create(&a.out.join("edges.csv"))?;
    let write = |w: &mut BufWriter<fs::File>, e: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "run,satisfied_volume_fraction,satisfied_box_fraction,trucks,total_drive_time_s,edges")?;
        writeln!(e, "run,from,to")?;
        for (run, r) in &rows {
            writeln!(
                w,
                "{run},{},{},{},{},{}",
                r.satisfied_volume_fraction,
                r.satisfied_box_fraction,
                r.truck_count,
                r.total_drive_time_s,
                r.driven_edges.len()
            )?;
            for (i, j) in &r.driven_edges {
                writeln!(e, "{run},{i},{j}")?;
            }
        }
        w.flush()?;
        e.flush()
    };
    write(&mut w, &mut edges_out).map_err(io_err(&a.out))?;

    println!("{:<40} {:>10} {:>7} {:>14} {:>6}", "run", "satisfied", "trucks", "drive_time_h", "edges");
    for (run, r) in &rows {
        println!(
            "{:<40} {:>9.2}% {:>7} {:>14.1} {:>6}",
            run,
            100.0 * r.satisfied_volume_fraction,
            r.truck_count,
            r.total_drive_time_s / 3600.0,
            r.driven_edges.len()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{err}");
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
