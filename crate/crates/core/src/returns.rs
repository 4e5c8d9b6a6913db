//! Return-time curves: thresholds against the mean waiting time between
//! exceedances, in block units.
//!
//! Exceedances of a level with per-block probability p arrive as a Bernoulli
//! process over blocks, so the mean return time is r(p) = -1 / ln(1 - p).
//! Ranked probability masses (from importance-sampling estimators) and long
//! block series (from control runs) both reduce to per-block exceedance
//! probabilities; curves from either source share this construction and can
//! be averaged over experiments and tilt groups on a common threshold grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which estimator family produced a curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Mc,
    Gev,
    Gpa,
    Gklt,
    Control,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Mc => "mc",
            Provenance::Gev => "gev",
            Provenance::Gpa => "gpa",
            Provenance::Gklt => "gklt",
            Provenance::Control => "control",
        }
    }
}

/// One curve sample. `probability` is the per-block exceedance probability
/// behind the return time; the band spans the contributing experiments'
/// return times (degenerate for single-experiment curves).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub probability: f64,
    pub return_time: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub n_experiments: usize,
}

/// A return-time curve, points stored in rank order: thresholds strictly
/// decreasing. Ranked, block and fitted curves also have non-increasing
/// return times; averaged curves may carry small inversions at thresholds
/// where the set of contributing experiments changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnCurve {
    pub provenance: Provenance,
    /// Tilt strength of the run that produced this curve, when it came from
    /// a single tilted batch; grouping key for two-stage averaging.
    pub tilt: Option<f64>,
    pub points: Vec<CurvePoint>,
    /// Points whose cumulative probability reached one; their return time is
    /// below the block resolution, not an error.
    pub dropped_points: usize,
    /// Grid thresholds with no contributing curve after filtering.
    pub omitted_thresholds: usize,
}

impl ReturnCurve {
    pub fn min_threshold(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.threshold)
    }

    pub fn max_threshold(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.threshold)
    }

    pub fn max_return_time(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.return_time)
    }

    /// Structural soundness: rank-ordered thresholds, return times
    /// non-decreasing in the threshold, probabilities in (0, 1), positive
    /// finite return times, bands bracketing the value.
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if !(w[1].threshold < w[0].threshold) {
                return Err(Error::InvalidInput(format!(
                    "curve thresholds not strictly decreasing at {}",
                    w[1].threshold
                )));
            }
            if w[1].return_time > w[0].return_time {
                return Err(Error::InvalidInput(format!(
                    "curve return time increases as the threshold drops at {}",
                    w[1].threshold
                )));
            }
        }
        for p in &self.points {
            if !(p.probability > 0.0 && p.probability < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "curve probability {} outside (0, 1)",
                    p.probability
                )));
            }
            if !(p.return_time.is_finite() && p.return_time > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "curve return time {} not positive finite",
                    p.return_time
                )));
            }
            if !(p.band_lo <= p.return_time && p.return_time <= p.band_hi) {
                return Err(Error::InvalidInput(
                    "curve band does not bracket its return time".into(),
                ));
            }
        }
        Ok(())
    }

    /// Return time at a threshold, linearly interpolated in ln(r), or None
    /// outside the curve's range. Stored points are returned verbatim;
    /// curves never extrapolate.
    pub fn return_time_at(&self, threshold: f64) -> Option<f64> {
        let n = self.points.len();
        if n == 0 {
            return None;
        }
        // Ascending view over the rank-ordered storage.
        let asc = |i: usize| &self.points[n - 1 - i];
        if threshold < asc(0).threshold || threshold > asc(n - 1).threshold {
            return None;
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if asc(mid).threshold <= threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = asc(lo);
        let b = asc(hi);
        if threshold == a.threshold || a.threshold == b.threshold {
            return Some(a.return_time);
        }
        if threshold == b.threshold {
            return Some(b.return_time);
        }
        let w = (threshold - a.threshold) / (b.threshold - a.threshold);
        Some((a.return_time.ln() * (1.0 - w) + b.return_time.ln() * w).exp())
    }

    /// ln of [`Self::return_time_at`].
    pub fn log_return_time_at(&self, threshold: f64) -> Option<f64> {
        self.return_time_at(threshold).map(f64::ln)
    }

    /// Keeps roughly `per_decade` points per decade of return time, always
    /// including both ends. Interpolating the result reproduces the full
    /// curve within one spacing step in ln(r). Zero keeps every point.
    pub fn thinned(&self, per_decade: usize) -> ReturnCurve {
        if per_decade == 0 || self.points.len() <= 2 {
            return self.clone();
        }
        let spacing = std::f64::consts::LN_10 / per_decade as f64;
        let mut points = Vec::new();
        // Storage order runs from the largest return time down.
        let mut last_ln = f64::INFINITY;
        for (i, pt) in self.points.iter().enumerate() {
            let ln_r = pt.return_time.ln();
            if i == 0 || i == self.points.len() - 1 || last_ln - ln_r >= spacing {
                last_ln = ln_r;
                points.push(pt.clone());
            }
        }
        ReturnCurve {
            provenance: self.provenance,
            tilt: self.tilt,
            points,
            dropped_points: self.dropped_points,
            omitted_thresholds: self.omitted_thresholds,
        }
    }
}

/// r(p) = -1 / ln(1 - p), computed through ln_1p so small probabilities
/// keep full precision.
pub fn return_time_from_probability(p: f64) -> f64 {
    -1.0 / (-p).ln_1p()
}

/// Inverse of [`return_time_from_probability`].
pub fn probability_from_return_time(r: f64) -> f64 {
    -(-1.0 / r).exp_m1()
}

struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    fn new() -> Self {
        NeumaierSum {
            sum: 0.0,
            compensation: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.compensation += if self.sum.abs() >= x.abs() {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Builds a curve from (threshold, probability mass) pairs: rank thresholds
/// descending, accumulate masses top down (compensated summation), merge
/// ties into single points, and convert each cumulative probability to a
/// return time. Points whose cumulative mass reaches one are dropped with a
/// count; a total mass beyond 1.5 is rejected outright.
pub fn curve_from_ranked(
    pairs: &[(f64, f64)],
    provenance: Provenance,
    tilt: Option<f64>,
) -> Result<ReturnCurve> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no ranked pairs to build a curve from".into()));
    }
    for &(a, m) in pairs {
        if !a.is_finite() || !m.is_finite() || m < 0.0 {
            return Err(Error::InvalidInput(format!(
                "ranked pair ({a}, {m}) is not a finite threshold with nonnegative mass"
            )));
        }
    }
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|x, y| y.0.total_cmp(&x.0));

    let total: f64 = {
        let mut acc = NeumaierSum::new();
        for &(_, m) in &sorted {
            acc.add(m);
        }
        acc.value()
    };
    // The total is itself a noisy estimate of one: under strong tilting the
    // poorly sampled bulk routinely overshoots by a factor of two without
    // invalidating the well-sampled top of the ranking. Only totals no
    // sampling fluctuation explains are rejected.
    if total > 10.0 {
        return Err(Error::InvalidMasses { total });
    }

    let mut points = Vec::new();
    let mut dropped = 0usize;
    let mut acc = NeumaierSum::new();
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        // Whole tie group accumulates into one point.
        while i < sorted.len() && sorted[i].0 == threshold {
            acc.add(sorted[i].1);
            i += 1;
        }
        let s = acc.value();
        if s >= 1.0 {
            dropped += 1;
            continue;
        }
        if s <= 0.0 {
            // Zero-mass prefix: no exceedance information yet.
            continue;
        }
        let r = return_time_from_probability(s);
        points.push(CurvePoint {
            threshold,
            probability: s,
            return_time: r,
            band_lo: r,
            band_hi: r,
            n_experiments: 1,
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "every ranked point had zero or saturated cumulative mass".into(),
        ));
    }
    Ok(ReturnCurve {
        provenance,
        tilt,
        points,
        dropped_points: dropped,
        omitted_thresholds: 0,
    })
}

/// Builds a curve from a long uniformly sampled series: chop it into blocks
/// of `delta_t`, take each block's maximum, and read exceedance
/// probabilities off the empirical distribution of block maxima (inclusive
/// at observed thresholds). Return times are in `delta_t` units. The lowest
/// observed maximum always saturates and is dropped.
pub fn curve_from_block_series(
    series: &[f64],
    sample_dt: f64,
    delta_t: f64,
    provenance: Provenance,
) -> Result<ReturnCurve> {
    if !(sample_dt.is_finite() && sample_dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sample spacing must be positive, got {sample_dt}"
        )));
    }
    let steps = (delta_t / sample_dt).round() as usize;
    if steps == 0 || (steps as f64 * sample_dt - delta_t).abs() > 1e-9 * delta_t {
        return Err(Error::InvalidInput(format!(
            "block length {delta_t} is not a whole number of samples of {sample_dt}"
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("series contains non-finite values".into()));
    }
    let blocks = series.len() / steps;
    if blocks < 2 {
        return Err(Error::InvalidInput(format!(
            "{} samples make {blocks} blocks; need at least 2",
            series.len()
        )));
    }
    let mut maxima: Vec<f64> = (0..blocks)
        .map(|b| {
            series[b * steps..(b + 1) * steps]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    maxima.sort_by(|x, y| y.total_cmp(x));

    let k = blocks as f64;
    let mut points = Vec::new();
    let mut dropped = 0usize;
    let mut i = 0;
    while i < maxima.len() {
        let threshold = maxima[i];
        let mut count = i;
        while count < maxima.len() && maxima[count] == threshold {
            count += 1;
        }
        i = count;
        // count = number of blocks whose maximum is >= threshold.
        let p = count as f64 / k;
        if p >= 1.0 {
            dropped += 1;
            continue;
        }
        let r = return_time_from_probability(p);
        points.push(CurvePoint {
            threshold,
            probability: p,
            return_time: r,
            band_lo: r,
            band_hi: r,
            n_experiments: 1,
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "all block maxima are equal; no curve can be built".into(),
        ));
    }
    Ok(ReturnCurve {
        provenance,
        tilt: None,
        points,
        dropped_points: dropped,
        omitted_thresholds: 0,
    })
}

/// Per-curve trusted threshold intervals: a curve contributes to an average
/// only at thresholds inside its interval. Parallel to the curve slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltedFilter {
    pub intervals: Vec<(f64, f64)>,
}

impl TiltedFilter {
    pub fn validate(&self, curves: usize) -> Result<()> {
        if self.intervals.len() != curves {
            return Err(Error::InvalidInput(format!(
                "filter has {} intervals for {curves} curves",
                self.intervals.len()
            )));
        }
        for &(lo, hi) in &self.intervals {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidInput(format!(
                    "filter interval ({lo}, {hi}) is not an ordered finite pair"
                )));
            }
        }
        Ok(())
    }
}

/// Averages experiment curves on a shared threshold grid. Curves are
/// grouped by their tilt; each group is averaged first (stage one), then the
/// group means are averaged (stage two), so no tilt dominates by experiment
/// count. Interpolation is linear in ln(return time); averaging is of
/// return times at fixed threshold. The grid spans the union of the curves'
/// filtered threshold ranges, but each curve contributes only inside its
/// own range: no extrapolation, ever. The band is the pointwise min and max
/// over every contributing experiment. Thresholds where no curve
/// contributes are omitted with a count, so curves trusted on disjoint
/// windows stitch into one plot with a gap.
pub fn average_curves(
    curves: &[ReturnCurve],
    filter: Option<&TiltedFilter>,
    grid_size: usize,
) -> Result<ReturnCurve> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no curves to average".into()));
    }
    if grid_size < 2 {
        return Err(Error::InvalidInput(format!(
            "grid needs at least 2 thresholds, got {grid_size}"
        )));
    }
    for (i, c) in curves.iter().enumerate() {
        if c.points.is_empty() {
            return Err(Error::InvalidInput(format!("curve {i} has no points")));
        }
        if c.provenance != curves[0].provenance {
            return Err(Error::InvalidInput(
                "cannot average curves from different estimators".into(),
            ));
        }
    }
    if let Some(f) = filter {
        f.validate(curves.len())?;
    }
    if curves.len() == 1 && filter.is_none() {
        return Ok(curves[0].clone());
    }

    let mut usable = Vec::with_capacity(curves.len());
    for (ci, c) in curves.iter().enumerate() {
        let mut ulo = c.min_threshold();
        let mut uhi = c.max_threshold();
        if let Some(f) = filter {
            let (flo, fhi) = f.intervals[ci];
            ulo = ulo.max(flo);
            uhi = uhi.min(fhi);
        }
        if ulo <= uhi {
            usable.push((ulo, uhi));
        }
    }
    let lo = usable.iter().map(|u| u.0).fold(f64::INFINITY, f64::min);
    let hi = usable.iter().map(|u| u.1).fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::InvalidInput(format!(
            "no curve survives the filter with a usable threshold range \
             (grid [{lo}, {hi}])"
        )));
    }

    // Tilt groups in first-seen order; untilted curves form one group.
    let mut group_keys: Vec<Option<u64>> = Vec::new();
    let mut group_of = Vec::with_capacity(curves.len());
    for c in curves {
        let key = c.tilt.map(|t| t.to_bits());
        let g = match group_keys.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                group_keys.push(key);
                group_keys.len() - 1
            }
        };
        group_of.push(g);
    }
    let n_groups = group_keys.len();

    let mut points = Vec::with_capacity(grid_size);
    let mut omitted = 0usize;
    for gi in 0..grid_size {
        let threshold = lo + (hi - lo) * gi as f64 / (grid_size - 1) as f64;
        let mut group_sums = vec![0.0f64; n_groups];
        let mut group_counts = vec![0usize; n_groups];
        let mut band_lo = f64::INFINITY;
        let mut band_hi = f64::NEG_INFINITY;
        let mut contributors = 0usize;
        for (ci, c) in curves.iter().enumerate() {
            if let Some(f) = filter {
                let (flo, fhi) = f.intervals[ci];
                if threshold < flo || threshold > fhi {
                    continue;
                }
            }
            let Some(log_r) = c.log_return_time_at(threshold) else {
                continue;
            };
            let r = log_r.exp();
            group_sums[group_of[ci]] += r;
            group_counts[group_of[ci]] += 1;
            band_lo = band_lo.min(r);
            band_hi = band_hi.max(r);
            contributors += 1;
        }
        let live_groups = group_counts.iter().filter(|&&c| c > 0).count();
        if live_groups == 0 {
            omitted += 1;
            continue;
        }
        let mean = group_sums
            .iter()
            .zip(&group_counts)
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .sum::<f64>()
            / live_groups as f64;
        points.push(CurvePoint {
            threshold,
            probability: probability_from_return_time(mean),
            return_time: mean,
            band_lo,
            band_hi,
            n_experiments: contributors,
        });
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "the filter removed every curve at every grid threshold".into(),
        ));
    }
    // The contributor set changes along the grid as filter windows open and
    // curves end, which can dent the pointwise mean even when every input
    // is monotone. Lift dents to the running max so the emitted curve keeps
    // return time non-decreasing in the threshold.
    let mut run = f64::NEG_INFINITY;
    for p in &mut points {
        if p.return_time < run {
            p.return_time = run;
            p.probability = probability_from_return_time(run);
            p.band_hi = p.band_hi.max(run);
        } else {
            run = p.return_time;
        }
    }
    points.reverse();
    Ok(ReturnCurve {
        provenance: curves[0].provenance,
        tilt: None,
        points,
        dropped_points: curves.iter().map(|c| c.dropped_points).sum(),
        omitted_thresholds: omitted,
    })
}
