use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retime_core::error::{Error, Result};
use retime_core::gev::{block_maxima, fit_gev_mle, BlockLayout, BlockMaximaSeries};
use retime_core::harness::{
    compare_methods, io, presets, run_and_persist, run_control_and_persist, ExperimentConfig,
    Method,
};
use retime_core::returns::{curve_from_block_series, curve_from_ranked, Provenance, ReturnCurve};

#[derive(Parser)]
#[command(
    name = "retime",
    version,
    about = "Rare-event return-time estimation on stochastic dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment batch and write its outputs.
    Run(RunArgs),
    /// Run a long control trajectory and archive it as the reference.
    Control(RunArgs),
    /// Compare written result bundles at matched numerical cost.
    Compare(CompareArgs),
    /// Inspect the shipped experiment presets.
    Preset(PresetArgs),
    /// Fit a generalized extreme value model to a scalar series file.
    FitGev(FitGevArgs),
    /// Build a return-time curve from a series or ranked-mass file.
    Curve(CurveArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Named preset; `retime preset list` shows what ships.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Experiment configuration file (TOML).
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread override; 0 keeps the runtime default.
    #[arg(long)]
    workers: Option<usize>,
    /// Cost budget override in particle-trajectory units.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Result bundle directories, at least two.
    #[arg(required = true, num_args = 2..)]
    bundles: Vec<PathBuf>,
    /// Control-run directory whose curve and band anchor the comparison.
    #[arg(long)]
    control: Option<PathBuf>,
    /// Directory for the comparison report files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PresetArgs {
    #[command(subcommand)]
    action: PresetAction,
}

#[derive(Subcommand)]
enum PresetAction {
    /// Print every preset with its one-line description.
    List,
    /// Print one preset's full configuration as TOML.
    Show { name: String },
}

#[derive(Args)]
struct FitGevArgs {
    /// Input file: one numeric value per line ('#' comments allowed).
    input: PathBuf,
    /// Consecutive-samples block size; 1 treats the input as maxima.
    #[arg(long, default_value_t = 1)]
    block_size: usize,
    /// JSON output path; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// Input file: one value per line builds a block-maxima curve;
    /// two comma-separated columns are ranked (threshold, mass) pairs.
    input: PathBuf,
    /// Block duration for the series form, in series time units.
    #[arg(long)]
    delta_t: Option<f64>,
    /// Sample spacing of the input series.
    #[arg(long, default_value_t = 1.0)]
    sample_dt: f64,
    /// Provenance label stamped on the curve rows.
    #[arg(long, default_value = "mc")]
    provenance: String,
    /// Output CSV path.
    #[arg(long, default_value = "curve.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for anything wrong with inputs or files being compared, 3 for methods
/// that ran and failed, 1 for plain I/O trouble.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_)
        | Error::Persist(_)
        | Error::CostMismatch { .. }
        | Error::ObservableMismatch { .. } => 2,
        Error::WeightOverflow { .. }
        | Error::Extinction { .. }
        | Error::BrokenLineage { .. }
        | Error::NonConvergence { .. }
        | Error::NoDecorrelation { .. }
        | Error::InvalidMasses { .. }
        | Error::AllExperimentsFailed { .. } => 3,
        Error::Io(_) => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Control(args) => cmd_control(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Preset(args) => cmd_preset(args),
        Command::FitGev(args) => cmd_fit_gev(args),
        Command::Curve(args) => cmd_curve(args),
    }
}

/// Resolves the preset-or-file config, applies flag overrides, validates,
/// and pins the worker pool. Returns the config and a default output name.
fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, name) = match (&args.preset, &args.config) {
        (Some(name), None) => {
            let cfg = presets::preset(name).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown preset {name:?}; `retime preset list` shows the available names"
                ))
            })?;
            (cfg, name.clone())
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
            (ExperimentConfig::from_toml(&text)?, stem)
        }
        _ => unreachable!("clap enforces exactly one of --preset and --config"),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(b) = args.budget {
        cfg.run.budget = b;
    }
    cfg.validate()?;
    if cfg.workers > 0 {
        // First rayon contact in the process, so the global pool is still
        // buildable; results are worker-count independent regardless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok((cfg, name))
}

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(name))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (cfg, name) = load_config(&args)?;
    if cfg.run.method == Method::Control {
        return Err(Error::InvalidInput(format!(
            "{name:?} is a control configuration; run it with `retime control`"
        )));
    }
    let dir = out_dir(&args, &cfg, &name);
    let (bundle, written) = run_and_persist(&cfg, Some(&dir))?;

    println!(
        "method {}  observable {}  seed {}",
        bundle.method.name(),
        bundle.observable,
        bundle.seed
    );
    println!(
        "cost {} particle-trajectories over {} ledger entries",
        bundle.ledger.total(),
        bundle.ledger.entries.len()
    );
    describe_curve("curve", &bundle.curve);
    for stage in &bundle.stage_curves {
        describe_curve(&stage.label, &stage.curve);
    }
    if !bundle.failures.is_empty() {
        println!("failed experiments: {}", bundle.failures.len());
        for f in &bundle.failures {
            match f.tilt {
                Some(c) => println!("  C={c} experiment {}: {}", f.experiment, f.message),
                None => println!("  experiment {}: {}", f.experiment, f.message),
            }
        }
    }
    if let Some(d) = written {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn cmd_control(args: RunArgs) -> Result<()> {
    let (cfg, name) = load_config(&args)?;
    let dir = out_dir(&args, &cfg, &name);
    let (control, written) = run_control_and_persist(&cfg, Some(&dir), true)?;

    println!(
        "control  observable {}  blocks {}  delta_t {}",
        control.observable, control.blocks, control.delta_t
    );
    println!(
        "stationarity trend p = {:.4}  cost {}",
        control.trend_p_value,
        control.ledger.total()
    );
    describe_curve("curve", &control.curve);
    if let Some(w) = &control.window_curve {
        describe_curve("window curve", w);
    }
    if let Some(d) = written {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut bundles = Vec::with_capacity(args.bundles.len());
    for dir in &args.bundles {
        let (_, bundle) = io::read_bundle(dir)?;
        bundles.push(bundle);
    }
    let control = match &args.control {
        Some(dir) => Some(io::read_control(dir)?),
        None => None,
    };
    let report = compare_methods(&bundles, control.as_ref())?;

    println!(
        "compared {} bundles at reference cost {}",
        bundles.len(),
        report.cost_reference
    );
    for (method, r) in &report.max_resolved {
        println!("  {method}: resolves return times up to {r:.3e}");
    }
    for (method, frac) in &report.band_containment {
        println!("  {method}: {:.0}% of comparable points inside the control band", 100.0 * frac);
    }
    for rel in &report.rel_err {
        for row in &rel.rows {
            println!(
                "  {} rel-err {:.3} at threshold {} over {} experiments",
                rel.method, row.rel_err, row.threshold, row.experiments
            );
        }
    }
    if let Some(dir) = &args.out {
        io::write_comparison(&report, dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_preset(args: PresetArgs) -> Result<()> {
    match args.action {
        PresetAction::List => {
            for (name, description) in presets::preset_names() {
                println!("{name:<18} {description}");
            }
            Ok(())
        }
        PresetAction::Show { name } => {
            let cfg = presets::preset(&name).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown preset {name:?}; `retime preset list` shows the available names"
                ))
            })?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn cmd_fit_gev(args: FitGevArgs) -> Result<()> {
    let values = match read_numeric_file(&args.input)? {
        NumericFile::Values(v) => v,
        NumericFile::Pairs(_) => {
            return Err(Error::InvalidInput(
                "fit-gev expects one value per line, not (threshold, mass) pairs".into(),
            ))
        }
    };
    let series = if args.block_size >= 2 {
        block_maxima(&values, args.block_size, BlockLayout::SingleLongSeries)?
    } else {
        BlockMaximaSeries::from_maxima(values, 1, BlockLayout::SingleLongSeries)?
    };
    let fit = fit_gev_mle(&series)?;

    let se = |i: usize| fit.covariance[i][i].max(0.0).sqrt();
    println!(
        "mu {:.6} +- {:.6}  sigma {:.6} +- {:.6}  zeta {:.6} +- {:.6}",
        fit.params.mu,
        1.96 * se(0),
        fit.params.sigma,
        1.96 * se(1),
        fit.params.zeta,
        1.96 * se(2)
    );
    println!(
        "{} maxima of block size {}  log-likelihood {:.4}",
        fit.n_maxima, fit.block_size, fit.log_likelihood
    );
    let json = serde_json::to_string_pretty(&fit).map_err(|e| Error::Persist(e.to_string()))?;
    match &args.out {
        Some(path) => {
            fs::write(path, json)?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_curve(args: CurveArgs) -> Result<()> {
    let provenance = parse_provenance(&args.provenance)?;
    let curve = match read_numeric_file(&args.input)? {
        NumericFile::Pairs(pairs) => curve_from_ranked(&pairs, provenance, None)?,
        NumericFile::Values(series) => {
            let delta_t = args.delta_t.ok_or_else(|| {
                Error::InvalidInput(
                    "a scalar series needs --delta-t to define the block duration".into(),
                )
            })?;
            curve_from_block_series(&series, args.sample_dt, delta_t, provenance)?
        }
    };
    io::write_curve_csv(&[("curve", &curve)], &args.out)?;
    describe_curve("curve", &curve);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn describe_curve(label: &str, curve: &ReturnCurve) {
    if curve.points.is_empty() {
        println!("{label}: empty ({} dropped)", curve.dropped_points);
        return;
    }
    println!(
        "{label}: {} points, thresholds [{:.4}, {:.4}], return times up to {:.3e}{}",
        curve.points.len(),
        curve.min_threshold(),
        curve.max_threshold(),
        curve.max_return_time(),
        if curve.dropped_points > 0 {
            format!(", {} saturated points dropped", curve.dropped_points)
        } else {
            String::new()
        }
    );
}

fn parse_provenance(text: &str) -> Result<Provenance> {
    match text {
        "mc" => Ok(Provenance::Mc),
        "gev" => Ok(Provenance::Gev),
        "gpa" => Ok(Provenance::Gpa),
        "gklt" => Ok(Provenance::Gklt),
        "control" => Ok(Provenance::Control),
        other => Err(Error::InvalidInput(format!(
            "unknown provenance {other:?}; use mc, gev, gpa, gklt, or control"
        ))),
    }
}

enum NumericFile {
    Values(Vec<f64>),
    Pairs(Vec<(f64, f64)>),
}

/// Reads a whitespace-trimmed numeric file: one column gives a series, two
/// comma-separated columns give ranked pairs. A single non-numeric first
/// line is treated as a header and skipped.
fn read_numeric_file(path: &Path) -> Result<NumericFile> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut pairs = Vec::new();
    let mut header_seen = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        let Some(nums) = parsed else {
            // One header row may precede the data.
            if !header_seen && values.is_empty() && pairs.is_empty() {
                header_seen = true;
                continue;
            }
            return Err(Error::InvalidInput(format!(
                "line {} of {} is not numeric",
                idx + 1,
                path.display()
            )));
        };
        match nums[..] {
            [v] => values.push(v),
            [a, m] => pairs.push((a, m)),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "line {} of {} has {} columns; expected 1 or 2",
                    idx + 1,
                    path.display(),
                    nums.len()
                )))
            }
        }
    }
    match (values.is_empty(), pairs.is_empty()) {
        (false, true) => Ok(NumericFile::Values(values)),
        (true, false) => Ok(NumericFile::Pairs(pairs)),
        (true, true) => Err(Error::InvalidInput(format!(
            "{} holds no numeric rows",
            path.display()
        ))),
        (false, false) => Err(Error::InvalidInput(format!(
            "{} mixes one- and two-column rows",
            path.display()
        ))),
    }
}
