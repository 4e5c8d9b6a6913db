//! Experiment orchestration: configuration, equal-cost bookkeeping, seeded
//! batch runs of every estimator family, long control runs, and
//! cross-method comparison.
//!
//! The cost unit throughout is one particle integrated for one trajectory
//! length. A batch over K experiments, N particles and several tilt values
//! charges every run it launches, successful or not: comparisons are only
//! meaningful at matched totals, and the ledger is the audit trail.

pub mod io;
pub mod presets;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::{
    l96_initial_pool, ou_stationary_draw, Integrator, Model, Observable, State, SystemSpec,
};
use crate::error::{Error, Result};
use crate::gev::{
    block_maxima, fit_gev_mle, gev_quantile, tail_from_gev, tail_from_gev_ci, BlockLayout, GevFit,
};
use crate::gklt::{
    estimate_per_trajectory_max, estimate_tail_fixed_thresholds, reconstruct_backward, run_gklt,
    windowed_averages,
};
use crate::mc::{empirical_rel_err, estimate_tail_mc, RelErrReport, RelErrRow};
use crate::resampler::{
    gpa_ranked_pairs, independent_run, run_gpa, AncestryLog, RunContext, TiltConfig, TiltedRun,
    WeightForm, WeightLedger,
};
use crate::returns::{
    average_curves, curve_from_block_series, curve_from_ranked, probability_from_return_time,
    return_time_from_probability, Provenance, ReturnCurve, TiltedFilter,
};
use crate::rng::{stream, Role};

/// Log-density of retained control-curve points; 200 per decade bounds the
/// interpolation error near 0.6% of a return time.
const CONTROL_POINTS_PER_DECADE: usize = 200;

/// Estimator family a configuration dispatches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mc,
    Gev,
    Gpa,
    Gklt,
    Control,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Gev => "gev",
            Method::Gpa => "gpa",
            Method::Gklt => "gklt",
            Method::Control => "control",
        }
    }
}

/// Dynamical system section of a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    /// "ou" or "lorenz96".
    pub kind: String,
    pub dt: f64,
    pub lambda: f64,
    pub sigma: f64,
    /// OU only: exact Gaussian transition instead of the Euler step.
    pub exact_transitions: bool,
    pub sites: usize,
    pub forcing: f64,
    pub clone_epsilon: f64,
    /// Lorenz '96 initial-pool spin-up time.
    pub burn_in: f64,
    /// Lorenz '96 time between pool snapshots.
    pub pool_spacing: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            kind: "ou".into(),
            dt: 0.01,
            lambda: 1.0,
            sigma: 1.0,
            exact_transitions: false,
            sites: 32,
            forcing: 64.0,
            clone_epsilon: 0.0,
            burn_in: 2.0,
            pool_spacing: 0.2,
        }
    }
}

impl SystemConfig {
    pub fn to_spec(&self) -> Result<SystemSpec> {
        let mut spec = match self.kind.as_str() {
            "ou" => {
                if self.exact_transitions {
                    SystemSpec::ou_exact(self.lambda, self.sigma, self.dt)
                } else {
                    SystemSpec::ou(self.lambda, self.sigma, self.dt)
                }
            }
            "lorenz96" => {
                SystemSpec::lorenz96(self.sites, self.forcing, self.clone_epsilon, self.dt)
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown system kind \"{other}\" (expected \"ou\" or \"lorenz96\")"
                )))
            }
        };
        spec.clone_epsilon = self.clone_epsilon;
        Ok(spec)
    }
}

/// Run section of a configuration file. Fields irrelevant to the chosen
/// method keep their defaults and are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// "position" or "energy".
    pub observable: String,
    /// K: independent repetitions of the whole estimator.
    pub experiments: usize,
    /// N: trajectories (particles) per experiment.
    pub particles: usize,
    /// Trajectory length per experiment; also the default block length.
    pub final_time: f64,
    /// Tau: time between selection steps for the interacting methods.
    pub resample_interval: f64,
    /// Tilt strengths; one batch per value, all charged to the ledger.
    pub tilts: Vec<f64>,
    /// Averaging window for time-average estimators; 0 means the
    /// resample interval.
    pub window: f64,
    /// "per-trajectory-max" (curves) or "fixed-thresholds" (estimates).
    pub gklt_estimator: String,
    /// Levels for tail-probability estimate tables.
    pub thresholds: Vec<f64>,
    /// GEV block sizes in trajectories per block.
    pub block_sizes: Vec<usize>,
    /// Control runs: number of blocks to integrate.
    pub budget: f64,
    /// Block length for control curves; 0 means final_time.
    pub delta_t: f64,
    /// Thresholds in an averaged curve.
    pub curve_grid: usize,
    /// Largest return period a fitted curve extends to, in blocks.
    pub max_return_period: f64,
    /// Half-width, in standard deviations of the tilted population, of the
    /// threshold window a tilted curve is trusted on when averaging;
    /// 0 disables trust filtering.
    pub filter_std_window: f64,
    /// Write the full ancestry and weight tables.
    pub persist_ancestry: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Mc,
            observable: "position".into(),
            experiments: 4,
            particles: 1000,
            final_time: 2.0,
            resample_interval: 0.1,
            tilts: Vec::new(),
            window: 0.0,
            gklt_estimator: "per-trajectory-max".into(),
            thresholds: Vec::new(),
            block_sizes: Vec::new(),
            budget: 1e4,
            delta_t: 0.0,
            curve_grid: 64,
            max_return_period: 1e6,
            filter_std_window: 0.5,
            persist_ancestry: false,
        }
    }
}

impl RunConfig {
    pub fn observable(&self) -> Result<Observable> {
        match self.observable.as_str() {
            "position" => Ok(Observable::Position),
            "energy" => Ok(Observable::Energy),
            other => Err(Error::InvalidInput(format!(
                "unknown observable \"{other}\" (expected \"position\" or \"energy\")"
            ))),
        }
    }

    pub fn effective_window(&self) -> f64 {
        if self.window > 0.0 {
            self.window
        } else {
            self.resample_interval
        }
    }

    pub fn effective_delta_t(&self) -> f64 {
        if self.delta_t > 0.0 {
            self.delta_t
        } else {
            self.final_time
        }
    }
}

/// A full experiment description: seed, worker hint, system, run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// 0 lets the thread pool pick; otherwise a fixed worker count.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub system: SystemConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            workers: 0,
            out_dir: None,
            system: SystemConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Checks everything at once and reports every problem together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let spec = match self.system.to_spec() {
            Ok(spec) => {
                if let Err(e) = spec.validate() {
                    problems.push(e.to_string());
                }
                Some(spec)
            }
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
        match (self.run.observable(), &spec) {
            (Ok(obs), Some(spec)) => {
                if let Err(e) = obs.validate_for(spec) {
                    problems.push(e.to_string());
                }
            }
            (Err(e), _) => problems.push(e.to_string()),
            _ => {}
        }
        let run = &self.run;
        let dt = self.system.dt;
        let timing_ok = |interval: f64, total: f64, what: &str, problems: &mut Vec<String>| {
            if let Err(e) = TiltConfig::end_value(0.0, interval, total).validate(dt) {
                problems.push(format!("{what}: {e}"));
            }
        };
        match run.method {
            Method::Mc | Method::Gev => {
                if run.experiments == 0 {
                    problems.push("experiments must be positive".into());
                }
                if run.particles == 0 {
                    problems.push("particles must be positive".into());
                }
                timing_ok(run.final_time, run.final_time, "trajectory timing", &mut problems);
                if run.method == Method::Gev {
                    if run.block_sizes.is_empty() {
                        problems.push("block_sizes must not be empty for the gev method".into());
                    }
                    for &m in &run.block_sizes {
                        if m < 2 {
                            problems.push(format!("block size {m} is below the minimum of 2"));
                        } else if run.particles / m < 5 {
                            problems.push(format!(
                                "{} particles give {} blocks of size {m}; at least 5 needed",
                                run.particles,
                                run.particles / m
                            ));
                        }
                    }
                    if !(run.max_return_period.is_finite() && run.max_return_period > 2.0) {
                        problems.push(format!(
                            "max_return_period {} must exceed 2 blocks",
                            run.max_return_period
                        ));
                    }
                }
            }
            Method::Gpa | Method::Gklt => {
                if run.experiments == 0 {
                    problems.push("experiments must be positive".into());
                }
                if run.particles < 2 {
                    problems.push("interacting methods need at least 2 particles".into());
                }
                if run.tilts.is_empty() {
                    problems.push("tilt list must not be empty for interacting methods".into());
                }
                if run.tilts.iter().any(|c| !c.is_finite()) {
                    problems.push("tilts must be finite".into());
                }
                timing_ok(run.resample_interval, run.final_time, "epoch timing", &mut problems);
                if run.method == Method::Gklt {
                    let w = run.effective_window();
                    let steps = (w / dt).round();
                    if !(w > 0.0) || (steps * dt - w).abs() > 1e-9 * w {
                        problems.push(format!(
                            "window {w} is not a positive whole number of steps of {dt}"
                        ));
                    }
                    if w > run.final_time {
                        problems.push(format!(
                            "window {w} exceeds the trajectory length {}",
                            run.final_time
                        ));
                    }
                    match run.gklt_estimator.as_str() {
                        "per-trajectory-max" | "fixed-thresholds" => {}
                        other => problems.push(format!(
                            "unknown gklt_estimator \"{other}\" (expected \
                             \"per-trajectory-max\" or \"fixed-thresholds\")"
                        )),
                    }
                    if run.gklt_estimator == "fixed-thresholds" && run.thresholds.is_empty() {
                        problems
                            .push("fixed-thresholds estimation needs a threshold list".into());
                    }
                }
            }
            Method::Control => {
                if !(run.budget.is_finite() && run.budget.round() >= 20.0) {
                    problems.push(format!(
                        "control budget {} must be at least 20 blocks",
                        run.budget
                    ));
                }
                let delta = run.effective_delta_t();
                timing_ok(delta, delta, "block timing", &mut problems);
                if run.window > 0.0 {
                    let steps = (run.window / dt).round();
                    if (steps * dt - run.window).abs() > 1e-9 * run.window {
                        problems.push(format!(
                            "window {} is not a whole number of steps of {dt}",
                            run.window
                        ));
                    }
                    if run.window > delta {
                        problems.push(format!(
                            "window {} exceeds the block length {delta}",
                            run.window
                        ));
                    }
                }
            }
        }
        if run.thresholds.iter().any(|a| !a.is_finite()) {
            problems.push("thresholds must be finite".into());
        }
        if run.curve_grid < 2 {
            problems.push(format!("curve_grid {} is below the minimum of 2", run.curve_grid));
        }
        if !(run.filter_std_window >= 0.0 && run.filter_std_window.is_finite()) {
            problems.push(format!(
                "filter_std_window {} must be finite and nonnegative",
                run.filter_std_window
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// One charged line item of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub label: String,
    /// Particle-trajectory units: particles times trajectory length over
    /// the block length.
    pub cost: f64,
}

/// Additive cost record of everything a batch launched.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn push(&mut self, label: impl Into<String>, cost: f64) {
        self.entries.push(CostEntry {
            label: label.into(),
            cost,
        });
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.cost).sum()
    }
}

/// One tail-probability estimate from one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub experiment: usize,
    pub tilt: Option<f64>,
    pub block_size: Option<usize>,
    pub threshold: f64,
    pub estimate: f64,
}

/// A fitted GEV model tagged with the experiment that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevFitRecord {
    pub experiment: usize,
    pub fit: GevFit,
}

/// One failed experiment; the batch continues without it but still pays
/// for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFailure {
    pub tilt: Option<f64>,
    pub experiment: usize,
    pub message: String,
}

/// An averaged curve for one slice of the batch (one tilt, one block size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCurve {
    pub label: String,
    pub curve: ReturnCurve,
}

/// Full selection history of one run, kept only on request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AncestryRecord {
    pub tilt: f64,
    pub experiment: usize,
    pub parents: AncestryLog,
    pub weights: WeightLedger,
}

/// Everything one batch produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultBundle {
    pub method: Method,
    pub observable: String,
    pub seed: u64,
    /// Headline curve: every experiment averaged, trust-filtered for the
    /// interacting methods.
    pub curve: ReturnCurve,
    /// Per-tilt or per-block-size averages.
    pub stage_curves: Vec<StageCurve>,
    /// Raw per-experiment curves, kept in memory for diagnostics but not
    /// persisted.
    #[serde(skip)]
    pub experiment_curves: Vec<ReturnCurve>,
    /// Trust intervals used when averaging, parallel to the curves the
    /// average consumed: per-experiment curves when those are averaged
    /// directly, per-tilt pooled curves when ranked tails are pooled first.
    pub filter: Option<TiltedFilter>,
    pub estimates: Vec<EstimateRow>,
    pub gev_fits: Vec<GevFitRecord>,
    pub ledger: CostLedger,
    pub failures: Vec<ExperimentFailure>,
    /// Total probability mass each reweighted experiment carried; the
    /// population conserves mass, so values far from 1 flag degeneracy.
    pub mass_totals: Vec<f64>,
    /// Worst ancestral-diversity collapse seen across runs.
    pub min_unique_roots: Option<usize>,
    #[serde(skip)]
    pub ancestry: Vec<AncestryRecord>,
}

/// Output of a long control run: the reference curve with a spread band
/// from ten disjoint sub-runs, plus the raw block archive for use as a
/// probability oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlResult {
    pub observable: String,
    pub delta_t: f64,
    pub blocks: usize,
    pub window: f64,
    pub curve: ReturnCurve,
    pub segment_curves: Vec<ReturnCurve>,
    pub window_curve: Option<ReturnCurve>,
    pub window_segment_curves: Vec<ReturnCurve>,
    /// Two-sided p-value of a linear trend across block-mean bins; small
    /// values flag a non-stationary archive.
    pub trend_p_value: f64,
    pub ledger: CostLedger,
    #[serde(skip)]
    pub end_samples: Vec<f64>,
    #[serde(skip)]
    pub window_maxima: Vec<f64>,
}

impl ControlResult {
    /// Empirical exceedance probability of the end-value archive, None when
    /// the archive is absent or records no exceedance.
    pub fn tail_reference(&self, threshold: f64) -> Option<f64> {
        fraction_above(&self.end_samples, threshold)
    }

    /// Same for the window-maximum archive.
    pub fn window_tail_reference(&self, threshold: f64) -> Option<f64> {
        fraction_above(&self.window_maxima, threshold)
    }

    /// Spread of the sub-run curves at a threshold: the min and max return
    /// time across segments that cover it. Needs at least two segments.
    pub fn band_at(&self, threshold: f64) -> Option<(f64, f64)> {
        band_from_curves(&self.segment_curves, threshold)
    }

    pub fn window_band_at(&self, threshold: f64) -> Option<(f64, f64)> {
        band_from_curves(&self.window_segment_curves, threshold)
    }
}

fn fraction_above(samples: &[f64], threshold: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let hits = samples.iter().filter(|&&x| x > threshold).count();
    if hits == 0 {
        None
    } else {
        Some(hits as f64 / samples.len() as f64)
    }
}

fn band_from_curves(curves: &[ReturnCurve], threshold: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut covered = 0;
    for c in curves {
        if let Some(r) = c.return_time_at(threshold) {
            lo = lo.min(r);
            hi = hi.max(r);
            covered += 1;
        }
    }
    if covered >= 2 {
        Some((lo, hi))
    } else {
        None
    }
}

/// Threshold window a tilted curve is trusted on: the mean of the ranked
/// statistic's population plus or minus `width` standard deviations. A
/// reweighted estimate is well supported only where the tilted ensemble
/// itself puts mass, so averaged plots keep each tilt near its matched
/// threshold and the tilt ladder stitches the windows into a long curve.
pub fn moment_window(pairs: &[(f64, f64)], width: f64) -> (f64, f64) {
    if pairs.is_empty() {
        return (f64::MAX, f64::MAX);
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let var = pairs.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n;
    let half = width * var.sqrt();
    (mean - half, mean + half)
}

/// Return-time curve implied by a GEV fit, from one block resolution up to
/// `max_return_period`, log-spaced in return time. Bands come from the
/// delta-method interval on the tail probability; an interval touching
/// zero makes the upper band unbounded.
pub fn curve_from_gev_fit(
    fit: &GevFit,
    max_return_period: f64,
    grid_size: usize,
) -> Result<ReturnCurve> {
    let m = fit.block_size as f64;
    let r_lo = m.max(2.0);
    if !(max_return_period.is_finite() && max_return_period > 1.5 * r_lo) {
        return Err(Error::InvalidInput(format!(
            "max return period {max_return_period} must exceed 1.5x the block scale {r_lo}"
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidInput(format!(
            "grid needs at least 2 thresholds, got {grid_size}"
        )));
    }
    let ln_lo = r_lo.ln();
    let ln_hi = max_return_period.ln();
    let mut points: Vec<crate::returns::CurvePoint> = Vec::with_capacity(grid_size);
    for i in 0..grid_size {
        let r = (ln_lo + (ln_hi - ln_lo) * i as f64 / (grid_size - 1) as f64).exp();
        let t = m / r;
        let level = gev_quantile(&fit.params, (-t).exp());
        if !level.is_finite() {
            continue;
        }
        if points.last().map_or(false, |p| level <= p.threshold) {
            // A bounded fitted tail saturates in float before the period
            // grid does; further points carry no new information.
            continue;
        }
        let p = probability_from_return_time(r);
        let (p_lo, _, p_hi) = tail_from_gev_ci(fit, level);
        let band_lo = if p_hi < 1.0 {
            return_time_from_probability(p_hi).min(r)
        } else {
            0.0
        };
        let band_hi = if p_lo > 0.0 {
            return_time_from_probability(p_lo).max(r)
        } else {
            f64::INFINITY
        };
        points.push(crate::returns::CurvePoint {
            threshold: level,
            probability: p,
            return_time: r,
            band_lo,
            band_hi,
            n_experiments: 1,
        });
    }
    if points.len() < 2 {
        return Err(Error::InvalidInput(
            "the fitted distribution yields fewer than 2 distinct levels".into(),
        ));
    }
    points.reverse();
    Ok(ReturnCurve {
        provenance: Provenance::Gev,
        tilt: None,
        points,
        dropped_points: 0,
        omitted_thresholds: 0,
    })
}

enum InitSource {
    OuStationary,
    Pool(Vec<State>),
}

fn build_init_source(
    config: &ExperimentConfig,
    spec: &SystemSpec,
    ledger: &mut CostLedger,
    block_length: f64,
) -> Result<InitSource> {
    match spec.model {
        Model::Ou { .. } => Ok(InitSource::OuStationary),
        Model::Lorenz96 { .. } => {
            // One shared attractor pool per batch, charged once. The pool
            // stream uses a sentinel experiment id no run can collide with.
            let mut rng = stream(config.seed, u32::MAX, 0, 0, Role::Init);
            let (pool, cost_time) = l96_initial_pool(
                spec,
                config.run.particles.max(1),
                config.system.burn_in,
                config.system.pool_spacing,
                &mut rng,
            )?;
            ledger.push("init", cost_time / block_length);
            Ok(InitSource::Pool(pool))
        }
    }
}

fn draw_init(
    source: &InitSource,
    spec: &SystemSpec,
    seed: u64,
    experiment: u32,
    n: usize,
) -> Result<Vec<State>> {
    match source {
        InitSource::OuStationary => (0..n)
            .map(|slot| {
                let mut rng = stream(seed, experiment, slot as u64, 0, Role::Init);
                ou_stationary_draw(spec, &mut rng)
            })
            .collect(),
        InitSource::Pool(pool) => Ok(pool.clone()),
    }
}

/// Runs a configured batch and returns its bundle. Experiment failures are
/// recorded and the batch continues; only a fully failed batch errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultBundle> {
    config.validate()?;
    let spec = config.system.to_spec()?;
    let obs = config.run.observable()?;
    match config.run.method {
        Method::Mc | Method::Gev => run_plain_family(config, &spec, &obs),
        Method::Gpa => run_tilted_family(config, &spec, &obs, WeightForm::EndValueDifference),
        Method::Gklt => run_tilted_family(config, &spec, &obs, WeightForm::IntegratedObservable),
        Method::Control => Err(Error::InvalidInput(
            "control configurations run through run_control".into(),
        )),
    }
}

struct PlainOutcome {
    curve: Option<ReturnCurve>,
    gev: Vec<(usize, GevFit, ReturnCurve)>,
    end_samples: Vec<f64>,
    estimates: Vec<EstimateRow>,
    failures: Vec<ExperimentFailure>,
}

fn run_plain_family(
    config: &ExperimentConfig,
    spec: &SystemSpec,
    obs: &Observable,
) -> Result<ResultBundle> {
    let run = &config.run;
    let n = run.particles;
    let k_exp = run.experiments;
    let with_gev = run.method == Method::Gev;
    let cfg = TiltConfig::end_value(0.0, run.final_time, run.final_time);
    let mut ledger = CostLedger::default();
    let source = build_init_source(config, spec, &mut ledger, run.final_time)?;

    let outcomes: Vec<Result<PlainOutcome>> = (0..k_exp)
        .into_par_iter()
        .map(|k| {
            let init = draw_init(&source, spec, config.seed, k as u32, n)?;
            let ctx = RunContext {
                seed: config.seed,
                experiment: k as u32,
            };
            let ir = independent_run(spec, obs, &cfg, &init, ctx)?;
            let mut out = PlainOutcome {
                curve: None,
                gev: Vec::new(),
                end_samples: ir.end_observables.clone(),
                estimates: Vec::new(),
                failures: Vec::new(),
            };
            if with_gev {
                for &m in &run.block_sizes {
                    match block_maxima(&ir.end_observables, m, BlockLayout::EndParticleBlocks)
                        .and_then(|bm| fit_gev_mle(&bm))
                    {
                        Ok(fit) => {
                            match curve_from_gev_fit(&fit, run.max_return_period, run.curve_grid)
                            {
                                Ok(curve) => {
                                    for &a in &run.thresholds {
                                        out.estimates.push(EstimateRow {
                                            experiment: k,
                                            tilt: None,
                                            block_size: Some(m),
                                            threshold: a,
                                            estimate: tail_from_gev(&fit, a),
                                        });
                                    }
                                    out.gev.push((m, fit, curve));
                                }
                                Err(e) => out.failures.push(ExperimentFailure {
                                    tilt: None,
                                    experiment: k,
                                    message: format!("block size {m}: {e}"),
                                }),
                            }
                        }
                        Err(e) => out.failures.push(ExperimentFailure {
                            tilt: None,
                            experiment: k,
                            message: format!("block size {m}: {e}"),
                        }),
                    }
                }
            } else {
                for &a in &run.thresholds {
                    let est = estimate_tail_mc(&ir.end_observables, a)?;
                    out.estimates.push(EstimateRow {
                        experiment: k,
                        tilt: None,
                        block_size: None,
                        threshold: a,
                        estimate: est.gamma_hat,
                    });
                }
                let mass = 1.0 / n as f64;
                let pairs: Vec<(f64, f64)> =
                    ir.end_observables.iter().map(|&e| (e, mass)).collect();
                out.curve = Some(curve_from_ranked(&pairs, Provenance::Mc, None)?);
            }
            Ok(out)
        })
        .collect();

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut gev_fits = Vec::new();
    let mut mc_curves = Vec::new();
    let mut gev_curves: Vec<(usize, ReturnCurve)> = Vec::new();
    let mut pooled = Vec::new();
    for (k, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(out) => {
                estimates.extend(out.estimates);
                failures.extend(out.failures);
                pooled.extend(out.end_samples);
                if let Some(c) = out.curve {
                    mc_curves.push(c);
                }
                for (m, fit, curve) in out.gev {
                    gev_fits.push(GevFitRecord {
                        experiment: k,
                        fit,
                    });
                    gev_curves.push((m, curve));
                }
            }
            Err(e) => failures.push(ExperimentFailure {
                tilt: None,
                experiment: k,
                message: e.to_string(),
            }),
        }
    }
    ledger.push(run.method.name(), (k_exp * n) as f64);

    let mut stage_curves = Vec::new();
    let experiment_curves;
    let curve = if with_gev {
        // One fit per block size on the pooled end samples. The fits are
        // better constrained than any single experiment's, so they carry the
        // stage curves and the headline (largest block size); per-experiment
        // fits above feed the estimate rows and the spread diagnostics.
        let mut sizes = run.block_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        let mut headline = None;
        for &m in &sizes {
            match block_maxima(&pooled, m, BlockLayout::EndParticleBlocks)
                .and_then(|bm| fit_gev_mle(&bm))
                .and_then(|fit| {
                    curve_from_gev_fit(&fit, run.max_return_period, run.curve_grid)
                        .map(|curve| (fit, curve))
                }) {
                Ok((fit, curve)) => {
                    // Pooled fits are filed under experiment index K, past
                    // the per-experiment rows.
                    gev_fits.push(GevFitRecord {
                        experiment: k_exp,
                        fit,
                    });
                    headline = Some(curve.clone());
                    stage_curves.push(StageCurve {
                        label: format!("m={m}"),
                        curve,
                    });
                }
                Err(e) => failures.push(ExperimentFailure {
                    tilt: None,
                    experiment: k_exp,
                    message: format!("pooled block size {m}: {e}"),
                }),
            }
        }
        experiment_curves = gev_curves.into_iter().map(|(_, c)| c).collect();
        match headline {
            Some(c) => c,
            None => return Err(batch_failure(&failures)),
        }
    } else {
        if pooled.is_empty() {
            return Err(batch_failure(&failures));
        }
        // Every experiment samples the same law, so the headline ranks the
        // pooled draws and resolves return times up to the total sample
        // count; the per-experiment curves stay behind for spread checks.
        let mass = 1.0 / pooled.len() as f64;
        let pairs: Vec<(f64, f64)> = pooled.iter().map(|&e| (e, mass)).collect();
        experiment_curves = mc_curves;
        curve_from_ranked(&pairs, Provenance::Mc, None)?
    };

    Ok(ResultBundle {
        method: run.method,
        observable: run.observable.clone(),
        seed: config.seed,
        curve,
        stage_curves,
        experiment_curves,
        filter: None,
        estimates,
        gev_fits,
        ledger,
        failures,
        mass_totals: Vec::new(),
        min_unique_roots: None,
        ancestry: Vec::new(),
    })
}

struct TiltOutcome {
    curve: ReturnCurve,
    pairs: Vec<(f64, f64)>,
    trust: (f64, f64),
    gammas: Vec<f64>,
    mass_total: f64,
    min_roots: usize,
    ancestry: Option<AncestryRecord>,
}

fn run_tilted_family(
    config: &ExperimentConfig,
    spec: &SystemSpec,
    obs: &Observable,
    form: WeightForm,
) -> Result<ResultBundle> {
    let run = &config.run;
    let n = run.particles;
    let k_exp = run.experiments;
    let tilts = &run.tilts;
    let window = run.effective_window();
    let provenance = match form {
        WeightForm::EndValueDifference => Provenance::Gpa,
        WeightForm::IntegratedObservable => Provenance::Gklt,
    };
    // Ranked reweighted tails pool across experiments within each tilt:
    // averaging curves at fixed thresholds truncates at the weakest
    // experiment's support, while the pooled empirical measure keeps the
    // reach of the deepest trajectories at the same cost.
    let pool_ranked =
        form == WeightForm::IntegratedObservable && run.gklt_estimator == "per-trajectory-max";
    let mut ledger = CostLedger::default();
    let source = build_init_source(config, spec, &mut ledger, run.final_time)?;

    let outcomes: Vec<Result<TiltOutcome>> = (0..tilts.len() * k_exp)
        .into_par_iter()
        .map(|idx| {
            let ti = idx / k_exp;
            let k = idx % k_exp;
            let c = tilts[ti];
            let exp_id = idx as u32;
            let init = draw_init(&source, spec, config.seed, exp_id, n)?;
            let ctx = RunContext {
                seed: config.seed,
                experiment: exp_id,
            };
            let (tr, pairs, gammas, mass_total): (TiltedRun, Vec<(f64, f64)>, Vec<f64>, f64) =
                match form {
                    WeightForm::EndValueDifference => {
                        let cfg = TiltConfig::end_value(c, run.resample_interval, run.final_time);
                        let tr = run_gpa(spec, obs, &cfg, &init, ctx)?;
                        // The raw masses share the run's Pi Z factor, an
                        // estimate of 1 whose noise scales every ranked point
                        // alike. Dividing it out leaves the shape of the
                        // reweighted tail, which is all the ranked curve uses;
                        // the unnormalized estimator still reaches the output
                        // through the per-threshold estimates.
                        let mut pairs = gpa_ranked_pairs(&tr)?;
                        let total: f64 = pairs.iter().map(|p| p.1).sum();
                        if total > 0.0 && total.is_finite() {
                            for p in &mut pairs {
                                p.1 /= total;
                            }
                        }
                        let gammas = crate::resampler::estimate_tail_gpa(&tr, &run.thresholds)?;
                        (tr, pairs, gammas, total)
                    }
                    WeightForm::IntegratedObservable => {
                        let cfg = TiltConfig::integrated(c, run.resample_interval, run.final_time);
                        let tr = run_gklt(spec, obs, &cfg, &init, ctx)?;
                        let bts = reconstruct_backward(&tr)?;
                        let pairs = estimate_per_trajectory_max(&bts, &tr, window)?;
                        let gammas =
                            estimate_tail_fixed_thresholds(&bts, &tr, window, &run.thresholds)?;
                        let total = pairs.iter().map(|p| p.1).sum();
                        (tr, pairs, gammas, total)
                    }
                };
            let min_roots = tr.unique_root_counts.iter().copied().min().unwrap_or(n);
            let curve = curve_from_ranked(&pairs, provenance, Some(c))?;
            let trust = moment_window(&pairs, run.filter_std_window);
            let ancestry = run.persist_ancestry.then(|| AncestryRecord {
                tilt: c,
                experiment: k,
                parents: tr.ancestry.clone(),
                weights: tr.ledger.clone(),
            });
            Ok(TiltOutcome {
                curve,
                pairs,
                trust,
                gammas,
                mass_total,
                min_roots,
                ancestry,
            })
        })
        .collect();

    let mut curves = Vec::new();
    let mut trusts = Vec::new();
    let mut curve_tilt_index = Vec::new();
    let mut pairs_by_tilt: Vec<Vec<(f64, f64)>> = vec![Vec::new(); tilts.len()];
    let mut runs_by_tilt = vec![0usize; tilts.len()];
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    let mut mass_totals = Vec::new();
    let mut min_unique_roots: Option<usize> = None;
    let mut ancestry = Vec::new();
    for (idx, outcome) in outcomes.into_iter().enumerate() {
        let ti = idx / k_exp;
        let k = idx % k_exp;
        let c = tilts[ti];
        match outcome {
            Ok(out) => {
                for (&a, &g) in run.thresholds.iter().zip(&out.gammas) {
                    estimates.push(EstimateRow {
                        experiment: k,
                        tilt: Some(c),
                        block_size: None,
                        threshold: a,
                        estimate: g,
                    });
                }
                mass_totals.push(out.mass_total);
                min_unique_roots = Some(match min_unique_roots {
                    Some(m) => m.min(out.min_roots),
                    None => out.min_roots,
                });
                if let Some(rec) = out.ancestry {
                    ancestry.push(rec);
                }
                curves.push(out.curve);
                trusts.push(out.trust);
                curve_tilt_index.push(ti);
                if pool_ranked {
                    pairs_by_tilt[ti].extend(out.pairs);
                    runs_by_tilt[ti] += 1;
                }
            }
            Err(e) => failures.push(ExperimentFailure {
                tilt: Some(c),
                experiment: k,
                message: e.to_string(),
            }),
        }
    }
    for &c in tilts {
        ledger.push(
            format!("{} C={}", run.method.name(), c),
            (k_exp * n) as f64,
        );
    }
    if curves.is_empty() {
        return Err(batch_failure(&failures));
    }

    let (curve, stage_curves, filter) = if pool_ranked {
        // Pooling already averages in probability space, and the ranked
        // protocol deliberately trades accuracy at the top of the ranking
        // for reach, so no trust window is applied here.
        let mut pooled_curves = Vec::new();
        let mut stages = Vec::new();
        for (ti, &c) in tilts.iter().enumerate() {
            if runs_by_tilt[ti] == 0 {
                continue;
            }
            let scale = 1.0 / runs_by_tilt[ti] as f64;
            let scaled: Vec<(f64, f64)> = pairs_by_tilt[ti]
                .iter()
                .map(|&(a, m)| (a, m * scale))
                .collect();
            match curve_from_ranked(&scaled, provenance, Some(c)) {
                Ok(pc) => {
                    stages.push(StageCurve {
                        label: format!("C={c}"),
                        curve: pc.clone(),
                    });
                    pooled_curves.push(pc);
                }
                Err(e) => failures.push(ExperimentFailure {
                    tilt: Some(c),
                    experiment: k_exp,
                    message: format!("pooled ranking: {e}"),
                }),
            }
        }
        if pooled_curves.is_empty() {
            return Err(batch_failure(&failures));
        }
        let headline = average_curves(&pooled_curves, None, run.curve_grid)?;
        (headline, stages, None)
    } else {
        let filter = (run.filter_std_window > 0.0).then(|| TiltedFilter {
            intervals: trusts.clone(),
        });
        let headline = average_curves(&curves, filter.as_ref(), run.curve_grid)?;
        let mut stages = Vec::new();
        for (ti, &c) in tilts.iter().enumerate() {
            let idxs: Vec<usize> = curve_tilt_index
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == ti)
                .map(|(i, _)| i)
                .collect();
            if idxs.is_empty() {
                continue;
            }
            let subset: Vec<ReturnCurve> = idxs.iter().map(|&i| curves[i].clone()).collect();
            let sub_filter = filter.as_ref().map(|f| TiltedFilter {
                intervals: idxs.iter().map(|&i| f.intervals[i]).collect(),
            });
            match average_curves(&subset, sub_filter.as_ref(), run.curve_grid) {
                Ok(avg) => stages.push(StageCurve {
                    label: format!("C={c}"),
                    curve: avg,
                }),
                Err(e) => failures.push(ExperimentFailure {
                    tilt: Some(c),
                    experiment: k_exp,
                    message: format!("stage average: {e}"),
                }),
            }
        }
        (headline, stages, filter)
    };

    Ok(ResultBundle {
        method: run.method,
        observable: run.observable.clone(),
        seed: config.seed,
        curve,
        stage_curves,
        experiment_curves: curves,
        filter,
        estimates,
        gev_fits: Vec::new(),
        ledger,
        failures,
        mass_totals,
        min_unique_roots,
        ancestry,
    })
}

fn batch_failure(failures: &[ExperimentFailure]) -> Error {
    Error::AllExperimentsFailed {
        failures: failures.len(),
        first: failures
            .first()
            .map(|f| f.message.clone())
            .unwrap_or_else(|| "no experiments were launched".into()),
    }
}

/// Integrates one long trajectory in blocks and archives each block's end
/// value (and window maximum when a window is set). The curve comes from
/// the block archive; ten disjoint sub-archives provide the spread band.
pub fn run_control(config: &ExperimentConfig) -> Result<ControlResult> {
    config.validate()?;
    if config.run.method != Method::Control {
        return Err(Error::InvalidInput(format!(
            "run_control requires the control method, got {}",
            config.run.method.name()
        )));
    }
    let spec = config.system.to_spec()?;
    let obs = config.run.observable()?;
    let run = &config.run;
    let delta_t = run.effective_delta_t();
    let blocks = run.budget.round() as usize;
    if blocks as u64 >= u32::MAX as u64 {
        return Err(Error::InvalidInput(format!(
            "control budget {blocks} exceeds the addressable block count"
        )));
    }
    let steps = TiltConfig::end_value(0.0, delta_t, delta_t).steps_per_epoch(spec.dt);
    let window = run.window;

    let mut ledger = CostLedger::default();
    let mut state = match spec.model {
        Model::Ou { .. } => {
            let mut rng = stream(config.seed, 0, 0, 0, Role::Init);
            ou_stationary_draw(&spec, &mut rng)?
        }
        Model::Lorenz96 { .. } => {
            let mut rng = stream(config.seed, u32::MAX, 0, 0, Role::Init);
            let (pool, cost_time) = l96_initial_pool(
                &spec,
                1,
                config.system.burn_in,
                config.system.pool_spacing,
                &mut rng,
            )?;
            ledger.push("init", cost_time / delta_t);
            pool.into_iter().next().expect("pool of one")
        }
    };

    let mut integ = Integrator::new(&spec)?;
    let mut end_samples = Vec::with_capacity(blocks);
    let mut window_maxima = Vec::with_capacity(if window > 0.0 { blocks } else { 0 });
    let mut seg: Vec<f64> = Vec::with_capacity(steps + 1);
    for b in 0..blocks {
        seg.clear();
        let mut rng = stream(config.seed, 0, 0, (b + 1) as u32, Role::Integration);
        integ.advance_recorded(&mut state, steps, &mut rng, &obs, &mut seg)?;
        end_samples.push(seg[steps]);
        if window > 0.0 {
            window_maxima.push(windowed_averages(&seg, spec.dt, window)?.max());
        }
    }
    ledger.push("control", blocks as f64);

    // Long controls produce one curve point per distinct block maximum;
    // thinning to a fixed log-density keeps files and interpolation cheap
    // at sub-percent cost in return time.
    let segments: Vec<ReturnCurve> = segment_curves(&end_samples, delta_t)
        .iter()
        .map(|c| c.thinned(CONTROL_POINTS_PER_DECADE))
        .collect();
    let curve = enrich_band(
        curve_from_block_series(&end_samples, delta_t, delta_t, Provenance::Control)?
            .thinned(CONTROL_POINTS_PER_DECADE),
        &segments,
    );
    let (window_curve, window_segments) = if window > 0.0 {
        let segs: Vec<ReturnCurve> = segment_curves(&window_maxima, delta_t)
            .iter()
            .map(|c| c.thinned(CONTROL_POINTS_PER_DECADE))
            .collect();
        let wc = enrich_band(
            curve_from_block_series(&window_maxima, delta_t, delta_t, Provenance::Control)?
                .thinned(CONTROL_POINTS_PER_DECADE),
            &segs,
        );
        (Some(wc), segs)
    } else {
        (None, Vec::new())
    };
    let trend_p_value = trend_p_value(&end_samples, 20);

    Ok(ControlResult {
        observable: run.observable.clone(),
        delta_t,
        blocks,
        window,
        curve,
        segment_curves: segments,
        window_curve,
        window_segment_curves: window_segments,
        trend_p_value,
        ledger,
        end_samples,
        window_maxima,
    })
}

fn segment_curves(samples: &[f64], delta_t: f64) -> Vec<ReturnCurve> {
    let seg_len = samples.len() / 10;
    if seg_len < 2 {
        return Vec::new();
    }
    (0..10)
        .filter_map(|s| {
            curve_from_block_series(
                &samples[s * seg_len..(s + 1) * seg_len],
                delta_t,
                delta_t,
                Provenance::Control,
            )
            .ok()
        })
        .collect()
}

fn enrich_band(mut curve: ReturnCurve, segments: &[ReturnCurve]) -> ReturnCurve {
    for pt in &mut curve.points {
        let mut lo = pt.return_time;
        let mut hi = pt.return_time;
        let mut covered = 0;
        for s in segments {
            if let Some(r) = s.return_time_at(pt.threshold) {
                lo = lo.min(r);
                hi = hi.max(r);
                covered += 1;
            }
        }
        pt.band_lo = lo;
        pt.band_hi = hi;
        if covered > 0 {
            pt.n_experiments = covered;
        }
    }
    curve
}

/// Two-sided p-value for a linear trend across bin means of the archive.
/// Large values are consistent with stationarity.
fn trend_p_value(samples: &[f64], bins: usize) -> f64 {
    let bins = bins.min(samples.len() / 2);
    if bins < 3 {
        return 1.0;
    }
    let per = samples.len() / bins;
    let ys: Vec<f64> = (0..bins)
        .map(|i| samples[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    let n = bins as f64;
    let x_bar = (n - 1.0) / 2.0;
    let y_bar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = (0..bins).map(|i| (i as f64 - x_bar).powi(2)).sum();
    let sxy: f64 = ys
        .iter()
        .enumerate()
        .map(|(i, y)| (i as f64 - x_bar) * (y - y_bar))
        .sum();
    let slope = sxy / sxx;
    let sse: f64 = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let fitted = y_bar + slope * (i as f64 - x_bar);
            (y - fitted) * (y - fitted)
        })
        .sum();
    let df = n - 2.0;
    let s2 = sse / df;
    if s2 <= 0.0 {
        return if slope == 0.0 { 1.0 } else { 0.0 };
    }
    let t = slope / (s2 / sxx).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// One curve point of one method set against the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub threshold: f64,
    pub return_time: f64,
    pub reference_return_time: f64,
    pub relative_deviation: f64,
    pub inside_band: Option<bool>,
}

/// Cross-method report at matched cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<CompareRow>,
    pub rel_err: Vec<RelErrReport>,
    pub costs: Vec<CostEntry>,
    pub cost_reference: f64,
    /// Longest return time each method's curve reaches.
    pub max_resolved: Vec<(String, f64)>,
    /// Fraction of comparable curve points inside the control band.
    pub band_containment: Vec<(String, f64)>,
}

/// Compares at least two bundles at matched cost, optionally against a
/// control run. Time-average (integrated-weight) bundles are referenced to
/// the control's window-maximum curve; everything else to its end-value
/// curve. Without a control the first bundle's curve is the reference.
pub fn compare_methods(
    bundles: &[ResultBundle],
    control: Option<&ControlResult>,
) -> Result<ComparisonReport> {
    if bundles.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "comparison needs at least 2 result bundles, got {}",
            bundles.len()
        )));
    }
    for b in bundles {
        if b.observable != bundles[0].observable {
            return Err(Error::ObservableMismatch {
                left: bundles[0].observable.clone(),
                right: b.observable.clone(),
            });
        }
    }
    if let Some(ctl) = control {
        if ctl.observable != bundles[0].observable {
            return Err(Error::ObservableMismatch {
                left: bundles[0].observable.clone(),
                right: ctl.observable.clone(),
            });
        }
    }
    let reference_cost = bundles[0].ledger.total();
    let mut costs = Vec::new();
    for b in bundles {
        let total = b.ledger.total();
        if (total - reference_cost).abs() > 0.05 * reference_cost {
            return Err(Error::CostMismatch {
                reference: reference_cost,
                found: total,
            });
        }
        costs.push(CostEntry {
            label: b.method.name().into(),
            cost: total,
        });
    }

    let mut rows = Vec::new();
    let mut band_containment = Vec::new();
    let mut max_resolved = Vec::new();
    for b in bundles {
        max_resolved.push((b.method.name().to_string(), b.curve.max_return_time()));
        let time_average = b.method == Method::Gklt;
        let reference: Option<&ReturnCurve> = match control {
            Some(ctl) => {
                if time_average {
                    ctl.window_curve.as_ref()
                } else {
                    Some(&ctl.curve)
                }
            }
            None => Some(&bundles[0].curve),
        };
        let Some(reference) = reference else {
            continue;
        };
        let mut inside = 0usize;
        let mut banded = 0usize;
        for pt in &b.curve.points {
            let Some(ref_r) = reference.return_time_at(pt.threshold) else {
                continue;
            };
            let band = control.and_then(|ctl| {
                if time_average {
                    ctl.window_band_at(pt.threshold)
                } else {
                    ctl.band_at(pt.threshold)
                }
            });
            let inside_band = band.map(|(lo, hi)| {
                let ok = pt.return_time >= lo && pt.return_time <= hi;
                banded += 1;
                if ok {
                    inside += 1;
                }
                ok
            });
            rows.push(CompareRow {
                method: b.method.name().into(),
                threshold: pt.threshold,
                return_time: pt.return_time,
                reference_return_time: ref_r,
                relative_deviation: (pt.return_time - ref_r) / ref_r,
                inside_band,
            });
        }
        if banded > 0 {
            band_containment.push((
                b.method.name().to_string(),
                inside as f64 / banded as f64,
            ));
        }
    }

    let mut rel_err = Vec::new();
    if let Some(ctl) = control {
        for b in bundles {
            rel_err.extend(rel_err_report(b, ctl)?);
        }
    }

    Ok(ComparisonReport {
        rows,
        rel_err,
        costs,
        cost_reference: reference_cost,
        max_resolved,
        band_containment,
    })
}

/// Groups a bundle's estimate rows by (tilt, block size) and scores each
/// group's spread and bias against the control archive.
fn rel_err_report(bundle: &ResultBundle, control: &ControlResult) -> Result<Vec<RelErrReport>> {
    let time_average = bundle.method == Method::Gklt;
    let mut keys: Vec<(Option<u64>, Option<usize>)> = Vec::new();
    for row in &bundle.estimates {
        let key = (row.tilt.map(f64::to_bits), row.block_size);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut reports = Vec::new();
    for key in keys {
        let group: Vec<&EstimateRow> = bundle
            .estimates
            .iter()
            .filter(|r| (r.tilt.map(f64::to_bits), r.block_size) == key)
            .collect();
        let mut thresholds = Vec::new();
        for r in &group {
            if !thresholds.contains(&r.threshold.to_bits()) {
                thresholds.push(r.threshold.to_bits());
            }
        }
        let mut rows = Vec::new();
        for a_bits in thresholds {
            let a = f64::from_bits(a_bits);
            let reference = if time_average {
                control.window_tail_reference(a)
            } else {
                control.tail_reference(a)
            };
            let Some(gamma) = reference else {
                continue;
            };
            let ests: Vec<f64> = group
                .iter()
                .filter(|r| r.threshold.to_bits() == a_bits)
                .map(|r| r.estimate)
                .collect();
            let (rel, dev) = empirical_rel_err(&ests, gamma)?;
            rows.push(RelErrRow {
                threshold: a,
                reference_gamma: gamma,
                rel_err: rel,
                mean_dev: dev,
                experiments: ests.len(),
            });
        }
        if rows.is_empty() {
            continue;
        }
        let mut label = bundle.method.name().to_string();
        if let Some(bits) = key.0 {
            label = format!("{label} C={}", f64::from_bits(bits));
        }
        if let Some(m) = key.1 {
            label = format!("{label} m={m}");
        }
        reports.push(RelErrReport {
            method: label,
            rows,
        });
    }
    Ok(reports)
}

/// Runs a batch and writes its outputs when a directory is configured or
/// given. Returns the bundle and where it went.
pub fn run_and_persist(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
) -> Result<(ResultBundle, Option<PathBuf>)> {
    let bundle = run_experiment(config)?;
    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from));
    if let Some(d) = &dir {
        io::write_bundle(&bundle, config, d)?;
    }
    Ok((bundle, dir))
}

/// Control-run counterpart of [`run_and_persist`].
pub fn run_control_and_persist(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
    archive: bool,
) -> Result<(ControlResult, Option<PathBuf>)> {
    let control = run_control(config)?;
    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from));
    if let Some(d) = &dir {
        io::write_control(&control, config, d, archive)?;
    }
    Ok((control, dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gev::GevParams;

    fn mini_gpa_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        };
        cfg.run.method = Method::Gpa;
        cfg.run.experiments = 2;
        // A power of two keeps the zero-tilt masses exactly representable.
        cfg.run.particles = 32;
        cfg.run.final_time = 1.0;
        cfg.run.resample_interval = 0.25;
        cfg.run.tilts = vec![0.0, 2.0];
        cfg.run.thresholds = vec![0.5, 1.0];
        cfg.run.filter_std_window = 0.0;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        for (name, _) in presets::preset_names() {
            let cfg = presets::preset(name).expect("listed preset exists");
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "round trip changed preset {name}");
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut text = ExperimentConfig::default().to_toml().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn validation_reports_every_problem_at_once() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.method = Method::Gpa;
        cfg.run.tilts = Vec::new();
        cfg.run.particles = 1;
        cfg.run.curve_grid = 1;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("tilt list"), "{msg}");
        assert!(msg.contains("2 particles"), "{msg}");
        assert!(msg.contains("curve_grid"), "{msg}");
    }

    #[test]
    fn ledger_charges_every_tilt_and_experiment() {
        let bundle = run_experiment(&mini_gpa_config()).unwrap();
        // 2 tilts x 2 experiments x 32 particles, one trajectory each.
        assert_eq!(bundle.ledger.total(), 128.0);
        assert_eq!(bundle.ledger.entries.len(), 2);
        assert!(bundle.ledger.entries[0].label.contains("C=0"));
    }

    #[test]
    fn zero_tilt_mass_is_exactly_one() {
        let bundle = run_experiment(&mini_gpa_config()).unwrap();
        // Runs come ordered by (tilt, experiment); the first two are C=0.
        assert!(bundle.mass_totals.len() == 4);
        for &t in &bundle.mass_totals[..2] {
            assert_eq!(t, 1.0, "zero-tilt probability masses must sum exactly to 1");
        }
        for &t in &bundle.mass_totals[2..] {
            assert!((t - 1.0).abs() < 0.8, "tilted mass total {t} wildly off");
        }
    }

    #[test]
    fn run_experiment_is_deterministic() {
        let a = run_experiment(&mini_gpa_config()).unwrap();
        let b = run_experiment(&mini_gpa_config()).unwrap();
        assert_eq!(a.estimates, b.estimates);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.mass_totals, b.mass_totals);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_experiment(&mini_gpa_config()))
            .unwrap();
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_experiment(&mini_gpa_config()))
            .unwrap();
        assert_eq!(single.estimates, multi.estimates);
        assert_eq!(single.curve, multi.curve);
    }

    #[test]
    fn plain_headline_ranks_the_pooled_draws() {
        let mut cfg = mini_gpa_config();
        cfg.run.method = Method::Mc;
        cfg.run.experiments = 4;
        // 4 experiments of 8 particles pool to 32 draws of mass 1/32.
        cfg.run.particles = 8;
        let bundle = run_experiment(&cfg).unwrap();
        assert_eq!(bundle.experiment_curves.len(), 4);
        assert_eq!(bundle.curve.points[0].probability, 1.0 / 32.0);
        let per_exp = bundle
            .experiment_curves
            .iter()
            .map(|c| c.points[0].return_time)
            .fold(0.0f64, f64::max);
        assert!(
            bundle.curve.points[0].return_time > 3.0 * per_exp,
            "pooling must resolve beyond any single experiment"
        );
    }

    #[test]
    fn ranked_tilt_stages_pool_experiment_masses() {
        let mut cfg = mini_gpa_config();
        cfg.run.method = Method::Gklt;
        cfg.run.tilts = vec![0.0];
        // 2 experiments of 16 particles pool to 32 trajectories whose
        // zero-tilt masses are exactly 1/32.
        cfg.run.particles = 16;
        let bundle = run_experiment(&cfg).unwrap();
        assert_eq!(bundle.stage_curves.len(), 1);
        assert_eq!(bundle.stage_curves[0].label, "C=0");
        let stage = &bundle.stage_curves[0].curve;
        assert_eq!(stage.points[0].probability, 1.0 / 32.0);
        assert_eq!(bundle.experiment_curves[0].points[0].probability, 1.0 / 16.0);
    }

    #[test]
    fn moment_window_brackets_the_population_mean() {
        // Thresholds 1..=100: mean 50.5, population variance (n^2 - 1)/12.
        let pairs: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64, 0.01)).collect();
        let std = (9999.0f64 / 12.0).sqrt();
        let (lo, hi) = moment_window(&pairs, 0.5);
        assert!((lo - (50.5 - 0.5 * std)).abs() < 1e-9);
        assert!((hi - (50.5 + 0.5 * std)).abs() < 1e-9);
        // Zero width collapses the window to the mean.
        assert_eq!(moment_window(&pairs, 0.0), (50.5, 50.5));
    }

    #[test]
    fn trend_test_separates_flat_from_sloped() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, 0, 0, 0, Role::Init);
        let flat: Vec<f64> = (0..2000).map(|_| rng.gen::<f64>() - 0.5).collect();
        assert!(trend_p_value(&flat, 20) > 0.01);
        let sloped: Vec<f64> = (0..2000)
            .map(|i| i as f64 * 0.01 + rng.gen::<f64>())
            .collect();
        assert!(trend_p_value(&sloped, 20) < 1e-6);
    }

    #[test]
    fn gev_curve_respects_the_block_scale_and_relation() {
        let fit = GevFit {
            params: GevParams {
                mu: 1.0,
                sigma: 0.3,
                zeta: 0.05,
            },
            log_likelihood: 0.0,
            covariance: [[1e-6, 0.0, 0.0], [0.0, 1e-6, 0.0], [0.0, 0.0, 1e-6]],
            n_maxima: 100,
            block_size: 10,
            layout: BlockLayout::EndParticleBlocks,
            diagnostics: crate::gev::FitDiagnostics {
                starts_tried: 1,
                iterations: 0,
                newton_step: [0.0; 3],
                below_soft_minimum: false,
            },
        };
        let curve = curve_from_gev_fit(&fit, 1e6, 33).unwrap();
        curve.validate().unwrap();
        let r_max = curve.max_return_time();
        let r_min = curve.points.last().unwrap().return_time;
        assert!((r_min - 10.0).abs() < 1e-9, "lowest period {r_min}");
        assert!((r_max - 1e6).abs() < 1.0, "highest period {r_max}");
        for pt in &curve.points {
            let want_p = probability_from_return_time(pt.return_time);
            assert!((pt.probability - want_p).abs() <= 1e-12 * want_p);
            // The level at period r must reproduce the period through the
            // fitted tail.
            let p = tail_from_gev(&fit, pt.threshold);
            let r_back = return_time_from_probability(p);
            assert!(
                (r_back - pt.return_time).abs() < 1e-6 * pt.return_time,
                "{r_back} vs {}",
                pt.return_time
            );
        }
        assert!(curve_from_gev_fit(&fit, 12.0, 33).is_err());
    }

    #[test]
    fn mini_control_run_is_deterministic_and_sane() {
        let mut cfg = ExperimentConfig {
            seed: 3,
            ..ExperimentConfig::default()
        };
        cfg.run.method = Method::Control;
        cfg.run.budget = 200.0;
        cfg.run.final_time = 0.5;
        cfg.run.window = 0.25;
        let a = run_control(&cfg).unwrap();
        let b = run_control(&cfg).unwrap();
        assert_eq!(a.end_samples, b.end_samples);
        assert_eq!(a.blocks, 200);
        assert_eq!(a.end_samples.len(), 200);
        assert_eq!(a.window_maxima.len(), 200);
        assert!(a.window_curve.is_some());
        assert!(a.trend_p_value >= 0.0 && a.trend_p_value <= 1.0);
        assert_eq!(a.ledger.total(), 200.0);
        a.curve.validate().unwrap();
        // The band brackets the curve by construction.
        for pt in &a.curve.points {
            assert!(pt.band_lo <= pt.return_time && pt.return_time <= pt.band_hi);
        }
        // Window maxima dominate end values pointwise in probability:
        // the archive maxima are at least the end samples.
        for (w, e) in a.window_maxima.iter().zip(&a.end_samples) {
            // Each window average includes more than the final instant, so
            // this is a statistical (not pathwise) statement; just check
            // the archives are finite and distinct.
            assert!(w.is_finite() && e.is_finite());
        }
    }

    #[test]
    fn control_rejects_non_control_configs() {
        let cfg = mini_gpa_config();
        assert!(run_control(&cfg).is_err());
        let mut ctl = ExperimentConfig::default();
        ctl.run.method = Method::Control;
        ctl.run.budget = 100.0;
        assert!(run_experiment(&ctl).is_err());
    }

    fn quick_mc_config(seed: u64, n: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.run.method = Method::Mc;
        cfg.run.experiments = 3;
        cfg.run.particles = n;
        cfg.run.final_time = 0.5;
        cfg.run.thresholds = vec![0.0, 0.5];
        cfg
    }

    #[test]
    fn comparison_requires_matched_cost_and_observable() {
        let a = run_experiment(&quick_mc_config(1, 100)).unwrap();
        let b = run_experiment(&quick_mc_config(2, 100)).unwrap();
        let report = compare_methods(&[a.clone(), b.clone()], None).unwrap();
        assert_eq!(report.cost_reference, 300.0);
        assert_eq!(report.max_resolved.len(), 2);
        // Identical bundles show zero deviation against themselves.
        let self_report = compare_methods(&[a.clone(), a.clone()], None).unwrap();
        for row in &self_report.rows {
            assert_eq!(row.relative_deviation, 0.0);
        }
        // Cost mismatch is an error.
        let c = run_experiment(&quick_mc_config(3, 150)).unwrap();
        match compare_methods(&[a.clone(), c], None) {
            Err(Error::CostMismatch { reference, found }) => {
                assert_eq!(reference, 300.0);
                assert_eq!(found, 450.0);
            }
            other => panic!("expected CostMismatch, got {other:?}"),
        }
        // Observable mismatch is an error.
        let mut energy = b;
        energy.observable = "energy".into();
        match compare_methods(&[a.clone(), energy], None) {
            Err(Error::ObservableMismatch { .. }) => {}
            other => panic!("expected ObservableMismatch, got {other:?}"),
        }
        // Fewer than two bundles is an error.
        assert!(compare_methods(&[a], None).is_err());
    }

    #[test]
    fn comparison_scores_against_a_control_archive() {
        let mut ctl_cfg = ExperimentConfig {
            seed: 11,
            ..ExperimentConfig::default()
        };
        ctl_cfg.run.method = Method::Control;
        ctl_cfg.run.budget = 2000.0;
        ctl_cfg.run.final_time = 0.5;
        let control = run_control(&ctl_cfg).unwrap();
        let a = run_experiment(&quick_mc_config(1, 100)).unwrap();
        let b = run_experiment(&quick_mc_config(2, 100)).unwrap();
        let report = compare_methods(&[a, b], Some(&control)).unwrap();
        assert!(!report.rows.is_empty());
        assert!(!report.rel_err.is_empty());
        for rep in &report.rel_err {
            for row in &rep.rows {
                assert!(row.reference_gamma > 0.0 && row.reference_gamma < 1.0);
                assert!(row.rel_err.is_finite());
            }
        }
        assert!(!report.band_containment.is_empty());
    }
}
