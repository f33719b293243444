//! Command-line driver: `simulate`, `analyze`, `compare` and `presets list`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diffusim::config::{Config, Overrides};
use diffusim::metrics::{
    db, max_db_gap, msd_curve_from_ensemble, steady_state_db_gap, tail_average, weighting_for,
    Measure, PerformanceCurve, Source, TAIL_FRACTION,
};
use diffusim::presets;
use diffusim::simulator::{communication_per_iteration, run_ensemble, Communication, ScenarioConfig};
use diffusim::theory::{
    iterate_transient, steady_state, tracking_steady_state, GlobalModel, TheoryMode,
};

pub const TOOL_VERSION: &str = concat!("diffusim ", env!("CARGO_PKG_VERSION"));
pub const CSV_HEADER: [&str; 5] = ["iteration", "measure", "source", "value_linear", "value_db"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] diffusim::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    /// 2 config, 3 numerical, 4 unsupported, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use diffusim::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Config { .. } | E::Parse { .. } | E::Combination(_) | E::Topology(_) => 2,
                E::Shape(_) | E::Domain(_) => 2,
                E::Instability { .. } | E::Convergence { .. } | E::Divergence { .. } => 3,
                E::Unsupported(_) => 4,
            },
            CliError::Input(_) => 2,
            CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(name = "diffusim", version, about = "Compressive diffusion LMS: simulation and theory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the Monte Carlo ensemble and write one CSV per measure.
    Simulate(RunArgs),
    /// Evaluate the theory curves and steady-state predictions.
    Analyze(RunArgs),
    /// Run both and report their agreement.
    Compare(CompareArgs),
    /// Inspect the shipped scenarios.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand, Debug)]
pub enum PresetAction {
    List,
    /// Print a preset's JSON.
    Show { name: String },
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Scenario JSON file (or a manifest.json from an earlier run).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Name of a shipped scenario.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Reuse the simulation CSVs in this directory instead of simulating.
    #[arg(long)]
    pub from_sim: Option<PathBuf>,
    /// Iterations skipped before the pointwise gap is measured.
    #[arg(long, default_value_t = 50)]
    pub burn_in: usize,
}

/// Echo of what was run, written to every output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub scenario: String,
    pub commands: Vec<String>,
    pub output_dir: String,
    pub master_seed: u64,
    pub config: Config,
}

/// A loaded scenario with overrides applied.
pub struct Loaded {
    pub scenario: String,
    pub config: Config,
    pub resolved: ScenarioConfig,
}

pub fn load(args: &RunArgs) -> CliResult<Loaded> {
    let (scenario, mut config) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let scenario = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .filter(|v| v.get("tool_version").is_some())
                .and_then(|v| v.get("scenario").and_then(|s| s.as_str()).map(String::from))
                .unwrap_or_else(|| path.display().to_string());
            (scenario, Config::from_json(&text)?)
        }
        (None, Some(name)) => (format!("preset:{name}"), presets::load(name)?),
        (None, None) => return Err(CliError::Input("either --config or --preset is required".into())),
    };
    config.apply(Overrides {
        seed: args.seed,
        trials: args.trials,
        iterations: args.iterations,
    });
    let resolved = config.resolve()?;
    Ok(Loaded {
        scenario,
        config,
        resolved,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn csv_name(source: Source, measure: Measure) -> String {
    format!("{}_{}.csv", source.name(), measure.name())
}

pub fn write_curve(dir: &Path, curve: &PerformanceCurve) -> CliResult<PathBuf> {
    let path = dir.join(csv_name(curve.source, curve.measure));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Input(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (t, &v) in curve.values.iter().enumerate() {
        w.write_record([
            t.to_string(),
            curve.measure.name().to_string(),
            curve.source.name().to_string(),
            fmt(v),
            fmt(db(v)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_curve(path: &Path) -> CliResult<PerformanceCurve> {
    let bad = |msg: String| CliError::Input(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad("unexpected CSV header".into()));
    }
    let mut values = Vec::new();
    let mut tag: Option<(Measure, Source)> = None;
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let t: usize = rec[0].parse().map_err(|_| bad(format!("row {k}: bad iteration")))?;
        if t != k {
            return Err(bad(format!("row {k}: iteration {t} out of order")));
        }
        let measure: Measure = rec[1].parse()?;
        let source = match &rec[2] {
            "theory" => Source::Theory,
            "simulation" => Source::Simulation,
            other => return Err(bad(format!("unknown source `{other}`"))),
        };
        tag.get_or_insert((measure, source));
        values.push(rec[3].parse().map_err(|_| bad(format!("row {k}: bad value")))?);
    }
    let (measure, source) = tag.ok_or_else(|| bad("empty curve".into()))?;
    Ok(PerformanceCurve {
        measure,
        source,
        values,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_manifest(dir: &Path, loaded: &Loaded, command: &str) -> CliResult<()> {
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        scenario: loaded.scenario.clone(),
        commands: vec![command.into()],
        output_dir: dir.display().to_string(),
        master_seed: loaded.resolved.master_seed,
        config: loaded.config.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Level {
    pub linear: f64,
    pub db: f64,
}

impl Level {
    fn new(x: f64) -> Self {
        Level { linear: x, db: db(x) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub name: Option<String>,
    pub mode: diffusim::simulator::DiffusionMode,
    pub strategy: diffusim::simulator::Strategy,
    pub network_msd: Measure,
    pub iterations: usize,
    pub trials: usize,
    pub master_seed: u64,
    pub tail_fraction: f64,
    /// Mean over the last `tail_fraction` of the iterations.
    pub steady_state: BTreeMap<Measure, Level>,
    pub final_mean_confidence: f64,
    pub communication_per_iteration: Communication,
    /// Over one run of `iterations` steps.
    pub communication_total: Communication,
}

pub struct Simulated {
    pub curves: Vec<PerformanceCurve>,
    pub summary: SimulationSummary,
}

pub fn simulate(loaded: &Loaded) -> CliResult<Simulated> {
    let cfg = &loaded.resolved;
    let result = run_ensemble(cfg)?;
    let curves = Measure::for_mode(cfg.mode)
        .iter()
        .map(|&m| msd_curve_from_ensemble(&result, m))
        .collect::<diffusim::Result<Vec<_>>>()?;
    let summary = SimulationSummary {
        name: loaded.config.name.clone(),
        mode: cfg.mode,
        strategy: cfg.strategy,
        network_msd: Measure::network_msd(cfg.strategy),
        iterations: cfg.iterations,
        trials: cfg.trials,
        master_seed: cfg.master_seed,
        tail_fraction: TAIL_FRACTION,
        steady_state: curves
            .iter()
            .map(|c| (c.measure, Level::new(c.tail_average())))
            .collect(),
        final_mean_confidence: *result.mean_delta.last().expect("iterations >= 1"),
        communication_per_iteration: communication_per_iteration(cfg),
        communication_total: result.communication,
    };
    Ok(Simulated { curves, summary })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TheorySummary {
    pub name: Option<String>,
    pub mode: TheoryMode,
    pub strategy: diffusim::simulator::Strategy,
    pub network_msd: Measure,
    pub iterations: usize,
    pub stable: bool,
    pub spectral_radius: Option<f64>,
    /// Stationary values without drift.
    pub steady_state: BTreeMap<Measure, Level>,
    /// Stationary values including the random-walk drift, when tracking.
    pub tracking_steady_state: Option<BTreeMap<Measure, Level>>,
    /// Fixed-point `sigma_eps^2` (single-bit only).
    pub sigma_eps_sq: Option<Vec<f64>>,
    pub sigma_eps_floor_clamped: bool,
    /// Why no steady state was reported.
    pub error: Option<String>,
}

pub struct Analyzed {
    pub curves: Vec<PerformanceCurve>,
    pub summary: TheorySummary,
    /// Numerical failure of the stationary solve; curves are still valid.
    pub failure: Option<diffusim::Error>,
}

pub fn analyze(loaded: &Loaded) -> CliResult<Analyzed> {
    let cfg = &loaded.resolved;
    let (gm, mode) = GlobalModel::from_scenario(cfg)?;
    let measures = Measure::for_mode(cfg.mode);
    let targets = measures
        .iter()
        .map(|&m| weighting_for(m, &gm).map(|w| w.target()))
        .collect::<diffusim::Result<Vec<_>>>()?;
    let transient = iterate_transient(&gm, mode, &targets, cfg.iterations)?;
    let curves: Vec<PerformanceCurve> = measures
        .iter()
        .zip(transient.values)
        .map(|(&measure, values)| PerformanceCurve {
            measure,
            source: Source::Theory,
            values,
        })
        .collect();
    let table = |values: &[f64]| -> BTreeMap<Measure, Level> {
        measures.iter().zip(values).map(|(&m, &v)| (m, Level::new(v))).collect()
    };
    let mut summary = TheorySummary {
        name: loaded.config.name.clone(),
        mode,
        strategy: cfg.strategy,
        network_msd: Measure::network_msd(cfg.strategy),
        iterations: cfg.iterations,
        stable: false,
        spectral_radius: None,
        steady_state: BTreeMap::new(),
        tracking_steady_state: None,
        sigma_eps_sq: None,
        sigma_eps_floor_clamped: transient.floor_clamped,
        error: None,
    };
    let stationary = steady_state(&gm, mode, &targets).and_then(|ss| {
        let tracking = if gm.q2 > 0.0 {
            Some(tracking_steady_state(&gm, mode, &targets, gm.q2)?)
        } else {
            None
        };
        Ok((ss, tracking))
    });
    let failure = match stationary {
        Ok((ss, tracking)) => {
            summary.stable = true;
            summary.spectral_radius = Some(ss.spectral_radius);
            summary.steady_state = table(&ss.values);
            summary.sigma_eps_sq = ss.sigma_eps_sq.clone();
            summary.tracking_steady_state = tracking.map(|t| table(&t.values));
            None
        }
        Err(e) => {
            if let diffusim::Error::Instability { radius } = e {
                summary.spectral_radius = Some(radius);
            }
            summary.error = Some(e.to_string());
            Some(e)
        }
    };
    Ok(Analyzed {
        curves,
        summary,
        failure,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Agreement {
    /// `max |theory_db - simulation_db|` over iterations at or after the burn-in.
    pub max_abs_db_gap: f64,
    /// Gap between the tail averages.
    pub steady_state_db_gap: f64,
    pub theory_tail_db: f64,
    pub simulation_tail_db: f64,
    /// Gap between the stationary prediction and the simulation tail.
    pub predicted_steady_state_db_gap: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub name: Option<String>,
    pub network_msd: Measure,
    pub burn_in: usize,
    pub iterations: usize,
    pub measures: BTreeMap<Measure, Agreement>,
}

pub fn compare_curves(
    theory: &Analyzed,
    simulation: &[PerformanceCurve],
    burn_in: usize,
) -> CliResult<ComparisonSummary> {
    let mut measures = BTreeMap::new();
    let predictions = theory
        .summary
        .tracking_steady_state
        .as_ref()
        .unwrap_or(&theory.summary.steady_state);
    for th in &theory.curves {
        let Some(sim) = simulation.iter().find(|c| c.measure == th.measure) else {
            continue;
        };
        if sim.values.len() != th.values.len() {
            return Err(CliError::Input(format!(
                "{}: simulation has {} iterations, theory has {}",
                th.measure,
                sim.values.len(),
                th.values.len()
            )));
        }
        let sim_tail = tail_average(&sim.values, TAIL_FRACTION);
        measures.insert(
            th.measure,
            Agreement {
                max_abs_db_gap: max_db_gap(&th.values, &sim.values, burn_in)?,
                steady_state_db_gap: steady_state_db_gap(&th.values, &sim.values),
                theory_tail_db: db(th.tail_average()),
                simulation_tail_db: db(sim_tail),
                predicted_steady_state_db_gap: predictions
                    .get(&th.measure)
                    .map(|p| (p.db - db(sim_tail)).abs()),
            },
        );
    }
    Ok(ComparisonSummary {
        name: theory.summary.name.clone(),
        network_msd: theory.summary.network_msd,
        burn_in,
        iterations: theory.summary.iterations,
        measures,
    })
}

fn write_comparison(dir: &Path, theory: &[PerformanceCurve], sim: &[PerformanceCurve]) -> CliResult<()> {
    let path = dir.join("comparison.csv");
    let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record([
        "iteration",
        "measure",
        "theory_linear",
        "simulation_linear",
        "theory_db",
        "simulation_db",
        "delta_db",
    ])
    .map_err(csv_err)?;
    for th in theory {
        let Some(s) = sim.iter().find(|c| c.measure == th.measure) else {
            continue;
        };
        for (t, (&a, &b)) in th.values.iter().zip(&s.values).enumerate() {
            w.write_record([
                t.to_string(),
                th.measure.name().to_string(),
                fmt(a),
                fmt(b),
                fmt(db(a)),
                fmt(db(b)),
                fmt(db(a) - db(b)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(&path))
}

fn cmd_simulate(args: &RunArgs) -> CliResult<String> {
    let loaded = load(args)?;
    prepare_dir(&args.out)?;
    let sim = simulate(&loaded)?;
    for c in &sim.curves {
        write_curve(&args.out, c)?;
    }
    write_json(&args.out.join("simulation_summary.json"), &sim.summary)?;
    write_manifest(&args.out, &loaded, "simulate")?;
    let msd = &sim.summary.steady_state[&sim.summary.network_msd];
    Ok(format!(
        "simulated {} curves, {} = {:.3} dB (tail mean)",
        sim.curves.len(),
        sim.summary.network_msd,
        msd.db
    ))
}

fn finish_analysis(dir: &Path, analyzed: &Analyzed) -> CliResult<()> {
    for c in &analyzed.curves {
        write_curve(dir, c)?;
    }
    write_json(&dir.join("theory_summary.json"), &analyzed.summary)
}

fn cmd_analyze(args: &RunArgs) -> CliResult<String> {
    let loaded = load(args)?;
    let analyzed = analyze(&loaded)?;
    prepare_dir(&args.out)?;
    finish_analysis(&args.out, &analyzed)?;
    write_manifest(&args.out, &loaded, "analyze")?;
    if let Some(e) = analyzed.failure {
        return Err(e.into());
    }
    let s = &analyzed.summary;
    Ok(format!(
        "spectral radius {:.10}, steady-state {} = {:.3} dB",
        s.spectral_radius.unwrap_or(f64::NAN),
        s.network_msd,
        s.steady_state[&s.network_msd].db
    ))
}

fn cmd_compare(args: &CompareArgs) -> CliResult<String> {
    let loaded = load(&args.run)?;
    let analyzed = analyze(&loaded)?;
    let dir = &args.run.out;
    let (sim_curves, sim_summary) = match &args.from_sim {
        Some(src) => (
            Measure::for_mode(loaded.resolved.mode)
                .iter()
                .map(|&m| read_curve(&src.join(csv_name(Source::Simulation, m))))
                .collect::<CliResult<Vec<_>>>()?,
            None,
        ),
        None => {
            let sim = simulate(&loaded)?;
            (sim.curves, Some(sim.summary))
        }
    };
    let report = compare_curves(&analyzed, &sim_curves, args.burn_in)?;
    prepare_dir(dir)?;
    finish_analysis(dir, &analyzed)?;
    if let Some(summary) = &sim_summary {
        for c in &sim_curves {
            write_curve(dir, c)?;
        }
        write_json(&dir.join("simulation_summary.json"), summary)?;
    }
    write_comparison(dir, &analyzed.curves, &sim_curves)?;
    write_json(&dir.join("comparison_summary.json"), &report)?;
    write_manifest(dir, &loaded, "compare")?;
    if let Some(e) = analyzed.failure {
        return Err(e.into());
    }
    let a = &report.measures[&report.network_msd];
    Ok(format!(
        "{}: steady-state gap {:.3} dB, max gap after {} iterations {:.3} dB",
        report.network_msd, a.steady_state_db_gap, report.burn_in, a.max_abs_db_gap
    ))
}

pub fn execute(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Presets { action } => Ok(match action {
            PresetAction::List => presets::PRESETS
                .iter()
                .map(|p| format!("{:26} {}", p.name, p.summary))
                .collect::<Vec<_>>()
                .join("\n"),
            PresetAction::Show { name } => presets::find(name)
                .ok_or_else(|| CliError::Input(format!("unknown preset `{name}`")))?
                .json
                .trim_end()
                .to_string(),
        }),
    }
}

/// Parses arguments, runs the command, prints the outcome and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
