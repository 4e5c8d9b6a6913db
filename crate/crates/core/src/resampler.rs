//! Genealogical particle analysis: interacting ensembles whose members are
//! cloned or killed in proportion to exponential weights, biasing the
//! population toward large observable values while a weight ledger keeps the
//! reweighted statistics unbiased.
//!
//! The engine advances N particles epoch by epoch. After every epoch each
//! particle n gets a weight w_n (from its end-value increment or its
//! integrated observable), the mean normalizer Z_i = (1/N) sum w_n is logged,
//! and the particle draws floor(w_n / Z_i + u_n) copies with u_n uniform on
//! [0, 1), so the expected copy count equals the normalized weight exactly.
//! A uniform kill or clone pass then restores the population to N.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{perturb_clone, Integrator, Observable, State, SystemSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, Role, ENSEMBLE_SLOT};
use rand::Rng;

/// How per-epoch weights are computed from the observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightForm {
    /// w = exp(tilt * (phi_end - phi_start)): the end-value form; weight
    /// products telescope to the final observable value.
    EndValueDifference,
    /// w = exp(tilt * integral of phi over the epoch): the time-average
    /// form; weight products telescope to the full time integral.
    IntegratedObservable,
}

/// Tilt strength plus the epoch structure of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltConfig {
    pub tilt: f64,
    pub weight_form: WeightForm,
    /// Epoch length tau: time between selection steps.
    pub resample_interval: f64,
    /// Total integration time; must be a multiple of the epoch length.
    pub final_time: f64,
}

impl TiltConfig {
    pub fn end_value(tilt: f64, resample_interval: f64, final_time: f64) -> Self {
        TiltConfig {
            tilt,
            weight_form: WeightForm::EndValueDifference,
            resample_interval,
            final_time,
        }
    }

    pub fn integrated(tilt: f64, resample_interval: f64, final_time: f64) -> Self {
        TiltConfig {
            tilt,
            weight_form: WeightForm::IntegratedObservable,
            resample_interval,
            final_time,
        }
    }

    pub fn epochs(&self) -> usize {
        (self.final_time / self.resample_interval).round() as usize
    }

    pub fn steps_per_epoch(&self, dt: f64) -> usize {
        (self.resample_interval / dt).round() as usize
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        let mut problems = Vec::new();
        if !self.tilt.is_finite() {
            problems.push(format!("tilt must be finite, got {}", self.tilt));
        }
        if !(self.resample_interval.is_finite() && self.resample_interval > 0.0) {
            problems.push(format!(
                "resample_interval must be positive, got {}",
                self.resample_interval
            ));
        }
        if !(self.final_time.is_finite() && self.final_time > 0.0) {
            problems.push(format!("final_time must be positive, got {}", self.final_time));
        } else if self.resample_interval > 0.0 {
            let epochs = self.epochs();
            if epochs == 0
                || (epochs as f64 * self.resample_interval - self.final_time).abs()
                    > 1e-9 * self.final_time
            {
                problems.push(format!(
                    "final_time {} is not a whole number of epochs of length {}",
                    self.final_time, self.resample_interval
                ));
            }
            let steps = self.steps_per_epoch(dt);
            if steps == 0
                || (steps as f64 * dt - self.resample_interval).abs()
                    > 1e-9 * self.resample_interval
            {
                problems.push(format!(
                    "resample_interval {} is not a whole number of steps of size {dt}",
                    self.resample_interval
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// One ensemble member. `root_observable` is the observable at its founding
/// initial condition and `lineage_integral` the accumulated observable
/// integral along its ancestral path; both are inherited verbatim by clones.
#[derive(Clone, Debug)]
pub struct Particle {
    pub state: State,
    pub root_observable: f64,
    pub lineage_integral: f64,
    /// Index of the founding initial condition.
    pub root: usize,
}

/// The interacting population at a fixed epoch boundary.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    pub completed_epochs: usize,
    pub initial_count: usize,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Unnormalized weights of one epoch plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochWeights {
    pub raw: Vec<f64>,
    /// Z_i = (1/N) sum of raw weights.
    pub normalizer: f64,
}

impl EpochWeights {
    pub fn normalized(&self, n: usize) -> f64 {
        self.raw[n] / self.normalizer
    }
}

/// Per-epoch weight record of a full run. The product of normalizers is the
/// correction every reweighted estimator needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightLedger {
    pub epochs: Vec<EpochWeights>,
}

impl WeightLedger {
    /// sum_i ln Z_i, accumulated in log space.
    pub fn log_normalizer_sum(&self) -> f64 {
        self.epochs.iter().map(|e| e.normalizer.ln()).sum()
    }
}

/// parents[i][child] is the pre-selection slot the child of epoch i+1 was
/// copied from. Selection maps N slots to N slots, so each row has the
/// ensemble size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AncestryLog {
    pub parents: Vec<Vec<u32>>,
}

/// Observable series and integrals for every epoch, indexed by the
/// pre-selection slot that produced them. `series[i][slot]` holds
/// steps+1 values covering the closed epoch interval.
#[derive(Clone, Debug, Default)]
pub struct SegmentStore {
    pub series: Vec<Vec<Vec<f64>>>,
    pub integrals: Vec<Vec<f64>>,
}

/// Identifies one run's random streams.
#[derive(Clone, Copy, Debug)]
pub struct RunContext {
    pub seed: u64,
    pub experiment: u32,
}

/// Everything a finished tilted run exposes to estimators.
pub struct TiltedRun {
    pub spec: SystemSpec,
    pub observable: Observable,
    pub cfg: TiltConfig,
    pub ensemble: Ensemble,
    pub ledger: WeightLedger,
    pub ancestry: AncestryLog,
    pub segments: SegmentStore,
    pub steps_per_epoch: usize,
    /// Distinct founding roots surviving after each selection; collapse
    /// toward 1 signals weight degeneracy.
    pub unique_root_counts: Vec<usize>,
}

/// Trapezoid rule on a uniformly sampled series.
pub fn trapezoid(series: &[f64], dt: f64) -> f64 {
    match series.len() {
        0 | 1 => 0.0,
        _ => {
            let interior: f64 = series[1..series.len() - 1].iter().sum();
            dt * (0.5 * (series[0] + series[series.len() - 1]) + interior)
        }
    }
}

fn weights_from_exponents(exponents: Vec<f64>, epoch: usize) -> Result<EpochWeights> {
    let max_exponent = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_exponent.is_finite() || max_exponent > 700.0 {
        return Err(Error::WeightOverflow {
            epoch,
            max_exponent,
        });
    }
    let raw: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    let normalizer = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(normalizer.is_finite() && normalizer > 0.0) {
        // Every weight underflowed to zero: the population carries no
        // information and selection cannot proceed.
        return Err(Error::Extinction { epoch });
    }
    Ok(EpochWeights { raw, normalizer })
}

/// End-value weights w_n = exp(tilt * (end_n - start_n)).
pub fn compute_weights_end_value(
    start_obs: &[f64],
    end_obs: &[f64],
    tilt: f64,
    epoch: usize,
) -> Result<EpochWeights> {
    if start_obs.len() != end_obs.len() || start_obs.is_empty() {
        return Err(Error::InvalidInput(
            "weight inputs must be equal-length and nonempty".into(),
        ));
    }
    let exponents: Vec<f64> = start_obs
        .iter()
        .zip(end_obs)
        .map(|(s, e)| tilt * (e - s))
        .collect();
    weights_from_exponents(exponents, epoch)
}

/// Integrated weights w_n = exp(tilt * integral of the observable).
pub fn compute_weights_integrated(
    epoch_integrals: &[f64],
    tilt: f64,
    epoch: usize,
) -> Result<EpochWeights> {
    if epoch_integrals.is_empty() {
        return Err(Error::InvalidInput("weight inputs must be nonempty".into()));
    }
    let exponents: Vec<f64> = epoch_integrals.iter().map(|v| tilt * v).collect();
    weights_from_exponents(exponents, epoch)
}

/// floor(W_n + u_n) copy counts. Since floor(W + U) has mean W for U uniform
/// on [0, 1), copy counts are unbiased for the normalized weights.
pub fn clone_counts(weights: &EpochWeights, uniforms: &[f64]) -> Result<Vec<usize>> {
    if uniforms.len() != weights.raw.len() {
        return Err(Error::InvalidInput(
            "need one uniform draw per particle".into(),
        ));
    }
    Ok(weights
        .raw
        .iter()
        .zip(uniforms)
        .map(|(w, u)| (w / weights.normalizer + u).floor() as usize)
        .collect())
}

/// One selection step: copy counts from the weights, then a uniform kill
/// (without replacement) or clone (with replacement) pass restoring the
/// population size. Returns the new population and the parent slot of each
/// child. Children are perturbed when they are clones and the system asks
/// for it; the continuation copy of each parent is never perturbed.
pub fn clone_kill(
    particles: &[Particle],
    weights: &EpochWeights,
    spec: &SystemSpec,
    ctx: RunContext,
    epoch: usize,
) -> Result<(Vec<Particle>, Vec<u32>)> {
    let n0 = particles.len();
    if weights.raw.len() != n0 {
        return Err(Error::InvalidInput(
            "weight vector does not match the ensemble size".into(),
        ));
    }
    let uniforms: Vec<f64> = (0..n0)
        .map(|slot| {
            stream(ctx.seed, ctx.experiment, slot as u64, epoch as u32, Role::CloneUniform)
                .gen::<f64>()
        })
        .collect();
    let counts = clone_counts(weights, &uniforms)?;

    // (parent slot, is_clone): the first copy of a parent continues it, the
    // rest are clones. Copies keep parent order so selection is reproducible.
    let mut copies: Vec<(u32, bool)> = Vec::with_capacity(n0 + 4);
    for (slot, &c) in counts.iter().enumerate() {
        for j in 0..c {
            copies.push((slot as u32, j > 0));
        }
    }
    let total = copies.len();
    if total == 0 {
        return Err(Error::Extinction { epoch });
    }

    let mut sel = stream(
        ctx.seed,
        ctx.experiment,
        ENSEMBLE_SLOT,
        epoch as u32,
        Role::Selection,
    );
    if total > n0 {
        // Kill total - n0 distinct copies chosen uniformly; survivors keep
        // their original order.
        let excess = total - n0;
        let mut idx: Vec<u32> = (0..total as u32).collect();
        for i in 0..excess {
            let j = sel.gen_range(i..total);
            idx.swap(i, j);
        }
        let mut dead = vec![false; total];
        for &i in &idx[..excess] {
            dead[i as usize] = true;
        }
        let mut kept = Vec::with_capacity(n0);
        for (i, c) in copies.into_iter().enumerate() {
            if !dead[i] {
                kept.push(c);
            }
        }
        copies = kept;
    } else if total < n0 {
        // Clone the deficit uniformly with replacement from the original
        // copy list; the extras are clones by construction.
        let deficit = n0 - total;
        for _ in 0..deficit {
            let j = sel.gen_range(0..total);
            copies.push((copies[j].0, true));
        }
    }
    debug_assert_eq!(copies.len(), n0);

    let mut children = Vec::with_capacity(n0);
    let mut parent_row = Vec::with_capacity(n0);
    for (child_slot, &(parent, is_clone)) in copies.iter().enumerate() {
        let src = &particles[parent as usize];
        let mut child = src.clone();
        if is_clone && spec.clone_epsilon > 0.0 {
            let mut prng = stream(
                ctx.seed,
                ctx.experiment,
                child_slot as u64,
                epoch as u32,
                Role::Perturb,
            );
            let draws: Vec<f64> = (0..child.state.dim())
                .map(|_| 2.0 * prng.gen::<f64>() - 1.0)
                .collect();
            child.state = perturb_clone(&child.state, spec, &draws)?;
        }
        children.push(child);
        parent_row.push(parent);
    }
    Ok((children, parent_row))
}

fn found_particles(init: &[State], obs: &Observable) -> Result<Vec<Particle>> {
    init.iter()
        .enumerate()
        .map(|(root, s)| {
            if !s.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "initial state {root} is not finite"
                )));
            }
            Ok(Particle {
                state: s.clone(),
                root_observable: obs.value(s)?,
                lineage_integral: 0.0,
                root,
            })
        })
        .collect()
}

/// Runs the full tilted ensemble: integrate, weigh, select, every epoch
/// including the last. The returned run holds the final population, the
/// weight ledger, the ancestry map, and every epoch's observable segments.
pub fn run_tilted(
    spec: &SystemSpec,
    obs: &Observable,
    cfg: &TiltConfig,
    init: &[State],
    ctx: RunContext,
) -> Result<TiltedRun> {
    spec.validate()?;
    obs.validate_for(spec)?;
    cfg.validate(spec.dt)?;
    if init.is_empty() {
        return Err(Error::InvalidInput("need at least one initial state".into()));
    }
    let n = init.len();
    let epochs = cfg.epochs();
    let steps = cfg.steps_per_epoch(spec.dt);

    let mut particles = found_particles(init, obs)?;
    let mut ledger = WeightLedger::default();
    let mut ancestry = AncestryLog::default();
    let mut segments = SegmentStore::default();
    let mut unique_root_counts = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        let advanced: Vec<(State, Vec<f64>, f64)> = particles
            .par_iter()
            .enumerate()
            .map(|(slot, p)| {
                let mut integ = Integrator::new(spec)?;
                let mut state = p.state.clone();
                let mut seg = Vec::with_capacity(steps + 1);
                let mut rng = stream(
                    ctx.seed,
                    ctx.experiment,
                    slot as u64,
                    epoch as u32,
                    Role::Integration,
                );
                integ.advance_recorded(&mut state, steps, &mut rng, obs, &mut seg)?;
                if !state.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "particle {slot} left the finite range in epoch {epoch}; reduce dt"
                    )));
                }
                let integral = trapezoid(&seg, spec.dt);
                Ok((state, seg, integral))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut seg_row = Vec::with_capacity(n);
        let mut integral_row = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        let mut ends = Vec::with_capacity(n);
        for (slot, (state, seg, integral)) in advanced.into_iter().enumerate() {
            particles[slot].state = state;
            particles[slot].lineage_integral += integral;
            starts.push(seg[0]);
            ends.push(seg[seg.len() - 1]);
            seg_row.push(seg);
            integral_row.push(integral);
        }

        let weights = match cfg.weight_form {
            WeightForm::EndValueDifference => {
                compute_weights_end_value(&starts, &ends, cfg.tilt, epoch)?
            }
            WeightForm::IntegratedObservable => {
                compute_weights_integrated(&integral_row, cfg.tilt, epoch)?
            }
        };

        let (children, parent_row) = clone_kill(&particles, &weights, spec, ctx, epoch)?;
        particles = children;

        segments.series.push(seg_row);
        segments.integrals.push(integral_row);
        ledger.epochs.push(weights);
        ancestry.parents.push(parent_row);

        let mut roots: Vec<usize> = particles.iter().map(|p| p.root).collect();
        roots.sort_unstable();
        roots.dedup();
        unique_root_counts.push(roots.len());
    }

    Ok(TiltedRun {
        spec: spec.clone(),
        observable: obs.clone(),
        cfg: *cfg,
        ensemble: Ensemble {
            particles,
            completed_epochs: epochs,
            initial_count: n,
        },
        ledger,
        ancestry,
        segments,
        steps_per_epoch: steps,
        unique_root_counts,
    })
}

/// The end-value-weight entry point.
pub fn run_gpa(
    spec: &SystemSpec,
    obs: &Observable,
    cfg: &TiltConfig,
    init: &[State],
    ctx: RunContext,
) -> Result<TiltedRun> {
    if cfg.weight_form != WeightForm::EndValueDifference {
        return Err(Error::InvalidInput(
            "genealogical end-value analysis requires the end-value weight form".into(),
        ));
    }
    run_tilted(spec, obs, cfg, init, ctx)
}

/// Tail probabilities from the final population, eq-by-eq:
/// gamma(a) = (1/N) sum_n 1{phi_n > a} exp(tilt * (root_n - phi_n)) prod_i Z_i,
/// computed in log space. At zero tilt this reduces to the plain fraction.
pub fn estimate_tail_gpa(run: &TiltedRun, thresholds: &[f64]) -> Result<Vec<f64>> {
    let masses = gpa_particle_masses(run)?;
    Ok(thresholds
        .iter()
        .map(|&a| {
            masses
                .iter()
                .filter(|(end, _)| *end > a)
                .map(|(_, m)| m)
                .sum::<f64>()
        })
        .collect())
}

/// (final observable, probability mass) per particle: the mass is
/// exp(tilt * (root - end) + sum ln Z) / N. Summing masses above a threshold
/// gives the tail estimate; the ranked list feeds return-time curves.
pub fn gpa_particle_masses(run: &TiltedRun) -> Result<Vec<(f64, f64)>> {
    let log_z = run.ledger.log_normalizer_sum();
    let c = run.cfg.tilt;
    let n = run.ensemble.initial_count as f64;
    run.ensemble
        .particles
        .iter()
        .map(|p| {
            let end = run.observable.value(&p.state)?;
            let log_factor = c * (p.root_observable - end) + log_z;
            Ok((end, log_factor.exp() / n))
        })
        .collect()
}

/// Ranked (threshold, mass) pairs, descending in threshold, ready for
/// return-curve construction.
pub fn gpa_ranked_pairs(run: &TiltedRun) -> Result<Vec<(f64, f64)>> {
    let mut pairs = gpa_particle_masses(run)?;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(pairs)
}

/// An untilted ensemble of independent trajectories driven by the same
/// noise streams a tilted run would use. Shares its epoch/step structure so
/// tilted and plain runs are comparable draw for draw.
pub struct IndependentRun {
    pub end_observables: Vec<f64>,
    /// Full observable series per trajectory, steps*epochs + 1 points.
    pub series: Vec<Vec<f64>>,
    pub final_states: Vec<State>,
}

pub fn independent_run(
    spec: &SystemSpec,
    obs: &Observable,
    cfg: &TiltConfig,
    init: &[State],
    ctx: RunContext,
) -> Result<IndependentRun> {
    spec.validate()?;
    obs.validate_for(spec)?;
    cfg.validate(spec.dt)?;
    if init.is_empty() {
        return Err(Error::InvalidInput("need at least one initial state".into()));
    }
    let epochs = cfg.epochs();
    let steps = cfg.steps_per_epoch(spec.dt);

    let rows: Vec<(Vec<f64>, State)> = init
        .par_iter()
        .enumerate()
        .map(|(slot, s0)| {
            if !s0.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "initial state {slot} is not finite"
                )));
            }
            let mut integ = Integrator::new(spec)?;
            let mut state = s0.clone();
            let mut series = Vec::with_capacity(epochs * steps + 1);
            let mut seg = Vec::with_capacity(steps + 1);
            for epoch in 1..=epochs {
                seg.clear();
                let mut rng = stream(
                    ctx.seed,
                    ctx.experiment,
                    slot as u64,
                    epoch as u32,
                    Role::Integration,
                );
                integ.advance_recorded(&mut state, steps, &mut rng, obs, &mut seg)?;
                let skip = if epoch == 1 { 0 } else { 1 };
                series.extend_from_slice(&seg[skip..]);
            }
            Ok((series, state))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut end_observables = Vec::with_capacity(rows.len());
    let mut series = Vec::with_capacity(rows.len());
    let mut final_states = Vec::with_capacity(rows.len());
    for (s, state) in rows {
        end_observables.push(s[s.len() - 1]);
        series.push(s);
        final_states.push(state);
    }
    Ok(IndependentRun {
        end_observables,
        series,
        final_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ou_stationary_draw;
    use crate::mc::gaussian_tail;

    fn ou_init(n: usize, spec: &SystemSpec, ctx: RunContext) -> Vec<State> {
        (0..n)
            .map(|slot| {
                let mut rng = stream(ctx.seed, ctx.experiment, slot as u64, 0, Role::Init);
                ou_stationary_draw(spec, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn end_value_weights_match_closed_form() {
        let w = compute_weights_end_value(&[0.0, 0.0], &[0.1, 0.2], 2.0, 1).unwrap();
        assert_eq!(w.raw, vec![0.2f64.exp(), 0.4f64.exp()]);
        let z = (0.2f64.exp() + 0.4f64.exp()) / 2.0;
        assert_eq!(w.normalizer, z);
        assert_eq!(w.normalized(0), 0.2f64.exp() / z);
    }

    #[test]
    fn integrated_weights_match_closed_form() {
        let w = compute_weights_integrated(&[0.5, -0.5], 3.0, 2).unwrap();
        assert_eq!(w.raw, vec![1.5f64.exp(), (-1.5f64).exp()]);
    }

    #[test]
    fn weight_overflow_is_reported_with_its_exponent() {
        match compute_weights_end_value(&[0.0], &[1.0], 1000.0, 4) {
            Err(Error::WeightOverflow {
                epoch,
                max_exponent,
            }) => {
                assert_eq!(epoch, 4);
                assert_eq!(max_exponent, 1000.0);
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn zero_tilt_weights_are_exactly_one() {
        let w = compute_weights_end_value(&[0.3, -0.1], &[0.7, 0.2], 0.0, 1).unwrap();
        assert_eq!(w.raw, vec![1.0, 1.0]);
        assert_eq!(w.normalizer, 1.0);
        assert_eq!(w.normalizer.ln(), 0.0);
    }

    #[test]
    fn clone_counts_floor_rule() {
        let w = EpochWeights {
            raw: vec![2.0 / 3.0, 4.0 / 3.0],
            normalizer: 1.0,
        };
        let c = clone_counts(&w, &[0.5, 0.5]).unwrap();
        assert_eq!(c, vec![1, 1]);
        // Pushing the uniforms past the fractional parts flips the counts.
        let c = clone_counts(&w, &[0.2, 0.7]).unwrap();
        assert_eq!(c, vec![0, 2]);
    }

    #[test]
    fn clone_counts_are_unbiased_for_the_weight() {
        let w = EpochWeights {
            raw: vec![0.7],
            normalizer: 1.0,
        };
        let mut rng = stream(19, 0, 0, 0, Role::CloneUniform);
        let n = 1_000_000;
        let mut total = 0usize;
        for _ in 0..n {
            let u: f64 = rng.gen();
            total += clone_counts(&w, &[u]).unwrap()[0];
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 0.7).abs() < 0.003, "mean copies {mean}");
    }

    #[test]
    fn clone_kill_conserves_population_size() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        for seed in 0..30u64 {
            let ctx = RunContext {
                seed,
                experiment: 0,
            };
            let init = ou_init(64, &spec, ctx);
            let particles = found_particles(&init, &obs).unwrap();
            let ends: Vec<f64> = particles.iter().map(|p| p.root_observable).collect();
            let starts = vec![0.0; 64];
            let weights = compute_weights_end_value(&starts, &ends, 3.0, 1).unwrap();
            let (children, parents) = clone_kill(&particles, &weights, &spec, ctx, 1).unwrap();
            assert_eq!(children.len(), 64);
            assert_eq!(parents.len(), 64);
            assert!(parents.iter().all(|&p| (p as usize) < 64));
        }
    }

    #[test]
    fn equal_weights_preserve_the_population_exactly() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let ctx = RunContext {
            seed: 5,
            experiment: 0,
        };
        let init = ou_init(32, &spec, ctx);
        let particles = found_particles(&init, &obs).unwrap();
        let weights = EpochWeights {
            raw: vec![1.0; 32],
            normalizer: 1.0,
        };
        let (children, parents) = clone_kill(&particles, &weights, &spec, ctx, 1).unwrap();
        let expected: Vec<u32> = (0..32).collect();
        assert_eq!(parents, expected);
        for (c, p) in children.iter().zip(&particles) {
            assert_eq!(c.state, p.state);
            assert_eq!(c.root, p.root);
        }
    }

    #[test]
    fn zero_tilt_run_equals_independent_trajectories_bitwise() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let cfg = TiltConfig::end_value(0.0, 0.1, 0.5);
        let ctx = RunContext {
            seed: 99,
            experiment: 2,
        };
        let init = ou_init(16, &spec, ctx);

        let tilted = run_gpa(&spec, &obs, &cfg, &init, ctx).unwrap();
        let plain = independent_run(&spec, &obs, &cfg, &init, ctx).unwrap();

        assert_eq!(tilted.ledger.log_normalizer_sum(), 0.0);
        for (p, s) in tilted.ensemble.particles.iter().zip(&plain.final_states) {
            assert_eq!(p.state.values, s.values);
        }
        // Estimator agreement is bit-for-bit, not just close.
        let masses = gpa_particle_masses(&tilted).unwrap();
        for ((end, mass), plain_end) in masses.iter().zip(&plain.end_observables) {
            assert_eq!(end, plain_end);
            assert_eq!(*mass, 1.0 / 16.0);
        }
    }

    #[test]
    fn tilted_ou_population_shifts_to_tilt_times_variance() {
        // Tilting the end value of a stationary OU by C shifts the final
        // population mean toward C * var = 2 * 0.5 = 1.0.
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let cfg = TiltConfig::end_value(2.0, 0.1, 2.0);
        let ctx = RunContext {
            seed: 7,
            experiment: 0,
        };
        let init = ou_init(100, &spec, ctx);
        let run = run_gpa(&spec, &obs, &cfg, &init, ctx).unwrap();
        let mean: f64 = run
            .ensemble
            .particles
            .iter()
            .map(|p| p.state.values[0])
            .sum::<f64>()
            / 100.0;
        assert!((mean - 1.0).abs() < 0.3, "tilted mean {mean}");
        assert_eq!(run.ledger.epochs.len(), 20);
        assert_eq!(run.ancestry.parents.len(), 20);
        assert!(run.unique_root_counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn gpa_tail_estimate_is_unbiased_at_moderate_threshold() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let gamma = gaussian_tail(1.5 * std::f64::consts::SQRT_2); // P(N(0,0.5) > 1.5)
        let k = 300;
        let mut sum = 0.0;
        for exp in 0..k {
            let ctx = RunContext {
                seed: 1234,
                experiment: exp,
            };
            let init = ou_init(200, &spec, ctx);
            let cfg = TiltConfig::end_value(3.0, 0.1, 2.0);
            let run = run_gpa(&spec, &obs, &cfg, &init, ctx).unwrap();
            sum += estimate_tail_gpa(&run, &[1.5]).unwrap()[0];
        }
        let mean = sum / k as f64;
        assert!(
            (mean - gamma).abs() < 0.1 * gamma,
            "mean estimate {mean:e} vs gamma {gamma:e}"
        );
    }

    #[test]
    fn tail_estimates_are_monotone_in_the_threshold() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let ctx = RunContext {
            seed: 3,
            experiment: 0,
        };
        let init = ou_init(100, &spec, ctx);
        let cfg = TiltConfig::end_value(2.0, 0.1, 1.0);
        let run = run_gpa(&spec, &obs, &cfg, &init, ctx).unwrap();
        let est = estimate_tail_gpa(&run, &[0.5, 1.0, 1.5, 2.0]).unwrap();
        for w in est.windows(2) {
            assert!(w[1] <= w[0], "estimates not monotone: {est:?}");
        }
        let ranked = gpa_ranked_pairs(&run).unwrap();
        for w in ranked.windows(2) {
            assert!(w[1].0 <= w[0].0);
        }
        assert!(ranked.iter().all(|&(_, m)| m >= 0.0));
    }

    #[test]
    fn segments_chain_across_selection() {
        // Within every recorded lineage step, a child's segment must start
        // where its parent's segment ended (OU has no clone perturbation).
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let ctx = RunContext {
            seed: 42,
            experiment: 1,
        };
        let init = ou_init(50, &spec, ctx);
        let cfg = TiltConfig::end_value(2.0, 0.1, 1.0);
        let run = run_gpa(&spec, &obs, &cfg, &init, ctx).unwrap();
        for epoch in 1..run.ancestry.parents.len() {
            let parents = &run.ancestry.parents[epoch - 1];
            for child in 0..parents.len() {
                let parent = parents[child] as usize;
                let parent_end = *run.segments.series[epoch - 1][parent].last().unwrap();
                let child_start = run.segments.series[epoch][child][0];
                assert_eq!(child_start, parent_end, "epoch {epoch} child {child}");
            }
        }
    }

    #[test]
    fn run_rejects_inconsistent_configuration() {
        let spec = SystemSpec::ou(1.0, 1.0, 0.01);
        let obs = Observable::Position;
        let ctx = RunContext {
            seed: 0,
            experiment: 0,
        };
        let init = vec![State::scalar(0.0, 0.0)];
        // final_time not a multiple of the epoch.
        let bad = TiltConfig::end_value(1.0, 0.3, 1.0);
        assert!(run_gpa(&spec, &obs, &bad, &init, ctx).is_err());
        // epoch not a multiple of dt.
        let bad = TiltConfig::end_value(1.0, 0.0153, 0.153);
        assert!(run_gpa(&spec, &obs, &bad, &init, ctx).is_err());
        // empty ensemble.
        let cfg = TiltConfig::end_value(1.0, 0.1, 1.0);
        assert!(run_gpa(&spec, &obs, &cfg, &[], ctx).is_err());
        // wrong weight form for the end-value entry point.
        let cfg = TiltConfig::integrated(1.0, 0.1, 1.0);
        assert!(run_gpa(&spec, &obs, &cfg, &init, ctx).is_err());
    }

    #[test]
    fn trapezoid_matches_hand_values() {
        assert_eq!(trapezoid(&[], 0.1), 0.0);
        assert_eq!(trapezoid(&[3.0], 0.1), 0.0);
        assert_eq!(trapezoid(&[1.0, 2.0], 0.5), 0.75);
        // Linear ramp integrates exactly.
        let ramp: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        assert!((trapezoid(&ramp, 0.1) - 5.0).abs() < 1e-12);
    }
}
