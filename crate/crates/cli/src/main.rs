//! `migfilter` command-line pipeline: simulate, ingest, calibrate, filter,
//! forecast, evaluate and backtest rating migration panels.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use migfilter::backtest::{backtest, BacktestConfig};
use migfilter::calibrate::{
    em_fit, em_fit_continuous, EmConfig, FineGrid, InitialRatings, StayerFactor,
};
use migfilter::continuous::{run_continuous_filter, spread_jumps, ContinuousOptions, SpreadConfig};
use migfilter::discrete::{run_filter, FilterTrajectory};
use migfilter::evaluate::{constant_forecasts, evaluate, EvaluationReport};
use migfilter::ingest::{build_panel, ingest_ratings, Alphabet, RatingPaths};
use migfilter::simulate::{simulate_events_continuous, simulate_panel_discrete, SimulationConfig};
use migfilter::{
    evolve_prior, predict_transition_probs, Conversion, Error, EventStream, MigrationPanel, Mode,
    Model, Result,
};

#[derive(Parser)]
#[command(
    name = "migfilter",
    version,
    about = "Regime-switching filters for rating migration data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel (discrete) or an event stream (continuous).
    Simulate(SimulateArgs),
    /// Aggregate entity rating histories into a migration panel.
    BuildPanel(BuildPanelArgs),
    /// Aggregate an event stream into a migration panel.
    Aggregate(AggregateArgs),
    /// Fit a hidden-state model by multi-start EM.
    Calibrate(CalibrateArgs),
    /// Run the filter over a panel or event stream.
    Filter(FilterArgs),
    /// Forecast transition matrices from filtered states.
    Forecast(ForecastArgs),
    /// Score forecasts against realized migration ratios.
    Evaluate(EvaluateArgs),
    /// Rolling out-of-sample recalibration.
    Backtest(BacktestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConversionArg {
    Linear,
    Exact,
}

impl From<ConversionArg> for Conversion {
    fn from(c: ConversionArg) -> Self {
        match c {
            ConversionArg::Linear => Conversion::Linear,
            ConversionArg::Exact => Conversion::Exact,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Simulation config JSON (entities_per_rating, horizon, seed, ...).
    #[arg(long)]
    config: PathBuf,
    /// Panel CSV (discrete) or event CSV (continuous); stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hidden path CSV.
    #[arg(long)]
    hidden_out: Option<PathBuf>,
}

#[derive(Args)]
struct RatingsArgs {
    /// `entity_id,date,rating` CSV.
    #[arg(long)]
    ratings: PathBuf,
    /// Rating labels from best to worst, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    /// Label marking a withdrawn or unrated spell.
    #[arg(long, default_value = "WR")]
    censor: String,
    /// First step boundary; defaults to the day after the earliest rating.
    #[arg(long)]
    origin: Option<NaiveDate>,
    /// Last usable boundary; defaults to the day after the latest rating.
    #[arg(long)]
    end: Option<NaiveDate>,
}

#[derive(Args)]
struct BuildPanelArgs {
    #[command(flatten)]
    ratings: RatingsArgs,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    floor: f64,
    /// Treat the ratings at the first boundary as unobserved.
    #[arg(long)]
    unknown_initial_ratings: bool,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        EmConfig {
            restarts: self.restarts,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            floor: self.floor,
            initial_ratings: if self.unknown_initial_ratings {
                InitialRatings::Unknown
            } else {
                InitialRatings::Observed
            },
            ..EmConfig::default()
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    /// Number of hidden states.
    #[arg(long)]
    states: usize,
    #[arg(long, value_enum, default_value = "discrete")]
    mode: ModeArg,
    #[command(flatten)]
    em: EmArgs,
    /// Fine-grid slots per panel step (continuous mode).
    #[arg(long, default_value_t = 64)]
    subintervals: usize,
    /// Seed for spreading jumps over the fine grid (continuous mode).
    #[arg(long, default_value_t = 0)]
    spread_seed: u64,
    /// Also score non-migrating entities in every fine interval.
    #[arg(long)]
    all_stayers: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ContinuousArgs {
    /// Reporting interval in days.
    #[arg(long, default_value_t = 30.0)]
    report_step: f64,
    /// Largest drift step in days.
    #[arg(long, default_value_t = 1.0)]
    grid_dt: f64,
    #[arg(long, value_enum, default_value = "exact")]
    conversion: ConversionArg,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    model: PathBuf,
    /// Panel CSV; in continuous mode its jumps are spread over `--subintervals` slots.
    #[arg(long, conflicts_with = "events", required_unless_present = "events")]
    panel: Option<PathBuf>,
    /// Event CSV (continuous models only).
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    #[arg(long, default_value_t = 64)]
    subintervals: usize,
    #[arg(long, default_value_t = 0)]
    spread_seed: u64,
    #[command(flatten)]
    continuous: ContinuousArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    /// Steps ahead of each filtered state.
    #[arg(long, default_value_t = 1)]
    horizon: u32,
    /// Step length in days for continuous models.
    #[arg(long, default_value_t = 30.0)]
    report_step: f64,
    #[arg(long, value_enum, default_value = "exact")]
    conversion: ConversionArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long, conflicts_with = "ratings", required_unless_present = "ratings")]
    panel: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    ratings: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, default_value = "WR")]
    censor: String,
    #[arg(long)]
    origin: Option<NaiveDate>,
    #[arg(long)]
    end: Option<NaiveDate>,
    #[arg(long, default_value_t = 30)]
    step_days: u32,
    #[arg(long)]
    states: usize,
    /// Steps in the first training window.
    #[arg(long)]
    train_steps: usize,
    /// Steps forecast between refits.
    #[arg(long, default_value_t = 12)]
    refit_steps: usize,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

fn read_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| {
                Error::InvalidData(format!("{}: {e}", p.display()))
            })?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn read_model(path: &Path) -> Result<Model> {
    Model::from_json(&read_string(path)?)
}

fn read_panel(path: &Path, step_days: u32) -> Result<MigrationPanel> {
    MigrationPanel::read_csv(open(path)?, step_days)
}

fn day_after(d: NaiveDate) -> NaiveDate {
    d + Days::new(1)
}

fn ratings_panel(
    ratings: &Path,
    labels: &[String],
    censor: &str,
    origin: Option<NaiveDate>,
    end: Option<NaiveDate>,
    step_days: u32,
) -> Result<MigrationPanel> {
    let alphabet = Alphabet::new(labels.iter().cloned(), censor)?;
    let paths: RatingPaths = ingest_ratings(open(ratings)?, &alphabet)?;
    if paths.duplicates > 0 {
        eprintln!(
            "warning: {} same-day duplicate ratings, later rows kept",
            paths.duplicates
        );
    }
    let origin = origin.or_else(|| paths.first_date().map(day_after));
    let end = end.or_else(|| paths.last_date().map(day_after));
    let (Some(origin), Some(end)) = (origin, end) else {
        return Err(Error::Empty("no dated ratings".into()));
    };
    build_panel(&paths, alphabet.p(), step_days, origin, end)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let config: SimulationConfig = serde_json::from_str(&read_string(&args.config)?)?;
    let mut out = output(args.out.as_deref())?;
    let path = match model.mode() {
        Mode::Discrete => {
            let (panel, path) = simulate_panel_discrete(&model.factor, &model.law, &config)?;
            panel.write_csv(&mut out)?;
            path
        }
        Mode::Continuous => {
            let (events, path) = simulate_events_continuous(&model.factor, &model.law, &config)?;
            events.write_csv(&mut out)?;
            path
        }
    };
    out.flush()?;
    if let Some(p) = &args.hidden_out {
        let mut w = output(Some(p))?;
        path.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn build(args: &BuildPanelArgs) -> Result<()> {
    let r = &args.ratings;
    let panel = ratings_panel(
        &r.ratings,
        &r.labels,
        &r.censor,
        r.origin,
        r.end,
        args.step_days,
    )?;
    let mut out = output(args.out.as_deref())?;
    panel.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn aggregate(args: &AggregateArgs) -> Result<()> {
    let panel = EventStream::read_csv(open(&args.events)?)?.aggregate(args.step_days)?;
    let mut out = output(args.out.as_deref())?;
    panel.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let panel = read_panel(&args.panel, args.step_days)?;
    let mut cfg = args.em.config();
    let result = match args.mode {
        ModeArg::Discrete => em_fit(&panel, args.states, &cfg)?,
        ModeArg::Continuous => {
            if args.all_stayers {
                cfg.stayer = StayerFactor::AllStayers;
            }
            let grid = FineGrid::from_panel(
                &panel,
                &SpreadConfig {
                    subintervals_per_step: args.subintervals,
                    seed: args.spread_seed,
                },
            )?;
            em_fit_continuous(&grid, args.states, &cfg)?
        }
    };
    if !result.converged {
        eprintln!("warning: best restart stopped at the iteration cap before converging");
    }
    write_text(args.out.as_deref(), &result.to_json()?)
}

fn filter(args: &FilterArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let trajectory = match model.mode() {
        Mode::Discrete => {
            let Some(panel) = &args.panel else {
                return Err(Error::InvalidData(
                    "discrete models filter a panel; pass --panel".into(),
                ));
            };
            run_filter(
                &read_panel(panel, args.step_days)?,
                &model.factor,
                &model.law,
                None,
            )?
        }
        Mode::Continuous => {
            let stream = match (&args.events, &args.panel) {
                (Some(e), _) => EventStream::read_csv(open(e)?)?,
                (None, Some(p)) => spread_jumps(
                    &read_panel(p, args.step_days)?,
                    &SpreadConfig {
                        subintervals_per_step: args.subintervals,
                        seed: args.spread_seed,
                    },
                )?,
                (None, None) => unreachable!("clap requires an input"),
            };
            let opts = ContinuousOptions {
                grid_dt: args.continuous.grid_dt,
                report_step: args.continuous.report_step,
                conversion: args.continuous.conversion.into(),
            };
            run_continuous_filter(&stream, &model.factor, &model.law, None, &opts)?.trajectory
        }
    };
    eprintln!("log-likelihood: {}", trajectory.loglik);
    let mut out = output(args.out.as_deref())?;
    trajectory.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn forecast(args: &ForecastArgs) -> Result<()> {
    if args.horizon == 0 {
        return Err(Error::InvalidData(
            "forecast horizon must be at least one step".into(),
        ));
    }
    let model = read_model(&args.model)?;
    let traj = FilterTrajectory::read_csv(open(&args.trajectory)?)?;
    let (factor, law) = match model.mode() {
        Mode::Discrete => (model.factor.clone(), model.law.clone()),
        Mode::Continuous => {
            let c = args.conversion.into();
            (
                model.factor.to_probabilities(args.report_step, c)?,
                model.law.to_probabilities(args.report_step, c)?,
            )
        }
    };
    let p = law.p();
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    let mut header = vec!["t".to_string(), "target".to_string()];
    for j in 1..=p {
        header.extend((1..=p).map(|k| format!("nu_{j}_{k}")));
    }
    w.write_record(&header).map_err(Error::from)?;
    for (t, state) in traj.states.iter().enumerate() {
        let mut prior = state.clone();
        if args.horizon > 1 {
            prior = evolve_prior(&prior, &factor, f64::from(args.horizon - 1))?;
        }
        let nu = predict_transition_probs(&law, &prior)?;
        let mut rec = vec![t.to_string(), (t + args.horizon as usize).to_string()];
        rec.extend(nu.iter().flatten().map(|x| x.to_string()));
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Filter forecasts next to the single-regime baseline.
#[derive(serde::Serialize)]
struct Evaluation {
    model: EvaluationReport,
    constant: EvaluationReport,
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let panel = read_panel(&args.panel, args.step_days)?;
    let traj = FilterTrajectory::read_csv(open(&args.trajectory)?)?;
    let report = Evaluation {
        model: evaluate(&traj.predicted, &panel)?,
        constant: evaluate(&constant_forecasts(&panel), &panel)?,
    };
    write_text(args.out.as_deref(), &to_json(&report)?)
}

fn backtest_cmd(args: &BacktestArgs) -> Result<()> {
    let panel = match (&args.panel, &args.ratings) {
        (Some(p), _) => read_panel(p, args.step_days)?,
        (None, Some(r)) => ratings_panel(
            r,
            &args.labels,
            &args.censor,
            args.origin,
            args.end,
            args.step_days,
        )?,
        (None, None) => unreachable!("clap requires an input"),
    };
    let cfg = BacktestConfig {
        states: args.states,
        train_steps: args.train_steps,
        refit_steps: args.refit_steps,
        em: args.em.config(),
    };
    write_text(args.out.as_deref(), &to_json(&backtest(&panel, &cfg)?)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::BuildPanel(a) => build(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Filter(a) => filter(a),
        Command::Forecast(a) => forecast(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Backtest(a) => backtest_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // bad arguments are input errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
