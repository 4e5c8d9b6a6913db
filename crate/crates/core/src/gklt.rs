//! Time-average importance sampling: tilted runs with integrated-observable
//! weights, backward reconstruction of surviving lineages, and tail
//! estimators for running averages of the observable.
//!
//! A tilted run biases whole paths by exp(tilt * integral of phi). The final
//! population's ancestors form N continuous trajectories; walking the
//! ancestry map backward recovers them, and reweighting each by
//! exp(-tilt * total integral) times the product of normalizers undoes the
//! bias exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resampler::{run_tilted, trapezoid, RunContext, TiltConfig, TiltedRun, WeightForm};
use crate::dynamics::{Observable, State, SystemSpec};

/// One reconstructed lineage: the observable along the full path, sampled on
/// the integration grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardTrajectory {
    /// Observable at every grid point, epochs * steps + 1 values. At clone
    /// boundaries the value is the child's (post-perturbation) start.
    pub series: Vec<f64>,
    /// Grid spacing of `series`.
    pub dt: f64,
    /// Sum of the per-epoch observable integrals along the lineage; exactly
    /// the quantity the run's weights exponentiated.
    pub total_integral: f64,
    /// Slot of the final-population particle this lineage ends in.
    pub final_slot: usize,
}

/// Non-overlapping running averages of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAverageSeries {
    pub window: f64,
    /// values[j] = (1/window) * integral over [j window, (j+1) window].
    pub values: Vec<f64>,
}

impl TimeAverageSeries {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The integrated-weight entry point.
pub fn run_gklt(
    spec: &SystemSpec,
    obs: &Observable,
    cfg: &TiltConfig,
    init: &[State],
    ctx: RunContext,
) -> Result<TiltedRun> {
    if cfg.weight_form != WeightForm::IntegratedObservable {
        return Err(Error::InvalidInput(
            "time-average importance sampling requires the integrated weight form".into(),
        ));
    }
    run_tilted(spec, obs, cfg, init, ctx)
}

/// Walks the ancestry map backward from every final particle and splices the
/// recorded per-epoch segments into continuous observable series. Segment
/// boundaries keep the later epoch's start value, so clone perturbations
/// appear as the recorded jumps and everything else chains exactly.
pub fn reconstruct_backward(run: &TiltedRun) -> Result<Vec<BackwardTrajectory>> {
    let epochs = run.ancestry.parents.len();
    if epochs == 0 {
        return Err(Error::InvalidInput("run recorded no epochs".into()));
    }
    let n = run.ensemble.len();
    let steps = run.steps_per_epoch;
    for (i, row) in run.ancestry.parents.iter().enumerate() {
        if row.len() != n {
            return Err(Error::BrokenLineage { epoch: i + 1, child: row.len() });
        }
    }

    let mut out = Vec::with_capacity(n);
    for final_slot in 0..n {
        // seg_slot[i] is the pre-selection slot that integrated epoch i+1.
        let mut seg_slots = vec![0usize; epochs];
        let mut child = final_slot;
        for i in (0..epochs).rev() {
            let parent = *run
                .ancestry
                .parents[i]
                .get(child)
                .ok_or(Error::BrokenLineage { epoch: i + 1, child })? as usize;
            if parent >= run.segments.series[i].len() {
                return Err(Error::BrokenLineage { epoch: i + 1, child });
            }
            seg_slots[i] = parent;
            child = parent;
        }

        let mut series = Vec::with_capacity(epochs * steps + 1);
        let mut total_integral = 0.0;
        for (i, &slot) in seg_slots.iter().enumerate() {
            let seg = &run.segments.series[i][slot];
            let end = if i + 1 == epochs { seg.len() } else { seg.len() - 1 };
            series.extend_from_slice(&seg[..end]);
            total_integral += run.segments.integrals[i][slot];
        }
        out.push(BackwardTrajectory {
            series,
            dt: run.spec.dt,
            total_integral,
            final_slot,
        });
    }
    Ok(out)
}

/// Running averages over consecutive windows, trapezoid rule, first window
/// starting at time zero. A trailing partial window is dropped.
pub fn time_averages(bt: &BackwardTrajectory, window: f64) -> Result<TimeAverageSeries> {
    windowed_averages(&bt.series, bt.dt, window)
}

/// The same computation on a bare series.
pub fn windowed_averages(series: &[f64], dt: f64, window: f64) -> Result<TimeAverageSeries> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if !(window.is_finite() && window > 0.0) {
        return Err(Error::InvalidInput(format!(
            "window must be positive, got {window}"
        )));
    }
    let steps = (window / dt).round() as usize;
    if steps == 0 || (steps as f64 * dt - window).abs() > 1e-9 * window {
        return Err(Error::InvalidInput(format!(
            "window {window} is not a whole number of steps of size {dt}"
        )));
    }
    if series.len() < steps + 1 {
        return Err(Error::InvalidInput(format!(
            "series of {} points is shorter than one window of {} steps",
            series.len(),
            steps
        )));
    }
    let count = (series.len() - 1) / steps;
    let mut values = Vec::with_capacity(count);
    for j in 0..count {
        let chunk = &series[j * steps..=(j + 1) * steps];
        values.push(trapezoid(chunk, dt) / window);
    }
    Ok(TimeAverageSeries { window, values })
}

fn lineage_log_factors(
    bts: &[BackwardTrajectory],
    run: &TiltedRun,
) -> Vec<f64> {
    let log_z = run.ledger.log_normalizer_sum();
    let c = run.cfg.tilt;
    bts.iter()
        .map(|bt| -c * bt.total_integral + log_z)
        .collect()
}

/// Tail probabilities of the running average at fixed thresholds:
/// gamma(a) = (1/N) sum_n 1{max_j A_{n,j} > a} exp(-tilt I_n + sum ln Z).
pub fn estimate_tail_fixed_thresholds(
    bts: &[BackwardTrajectory],
    run: &TiltedRun,
    window: f64,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if bts.is_empty() {
        return Err(Error::InvalidInput("no trajectories to estimate from".into()));
    }
    let n = bts.len() as f64;
    let log_factors = lineage_log_factors(bts, run);
    let maxima: Vec<f64> = bts
        .iter()
        .map(|bt| Ok(time_averages(bt, window)?.max()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(thresholds
        .iter()
        .map(|&a| {
            maxima
                .iter()
                .zip(&log_factors)
                .filter(|(m, _)| **m > a)
                .map(|(_, lf)| lf.exp() / n)
                .sum()
        })
        .collect())
}

/// Each trajectory's own largest running average paired with its probability
/// mass p_n = exp(-tilt I_n + sum ln Z) / N, ranked by descending threshold.
/// The cumulative masses trace out the full return-time curve.
pub fn estimate_per_trajectory_max(
    bts: &[BackwardTrajectory],
    run: &TiltedRun,
    window: f64,
) -> Result<Vec<(f64, f64)>> {
    if bts.is_empty() {
        return Err(Error::InvalidInput("no trajectories to estimate from".into()));
    }
    let n = bts.len() as f64;
    let log_factors = lineage_log_factors(bts, run);
    let mut pairs: Vec<(f64, f64)> = bts
        .iter()
        .zip(&log_factors)
        .map(|(bt, lf)| Ok((time_averages(bt, window)?.max(), lf.exp() / n)))
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}
