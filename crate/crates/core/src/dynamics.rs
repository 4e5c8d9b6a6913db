//! Reference dynamics: the Ornstein-Uhlenbeck process and the cyclic
//! Lorenz '96 lattice, plus observables and trajectory utilities.
//!
//! Both systems are advanced on a fixed grid of width `dt`. The OU process
//! uses Euler-Maruyama by default (an exact transition kernel is available
//! behind a flag); Lorenz '96 uses classical fourth-order Runge-Kutta.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instantaneous system state: coordinate values plus the time they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub values: Vec<f64>,
    pub time: f64,
}

impl State {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        State { values, time }
    }

    pub fn scalar(x: f64, time: f64) -> Self {
        State {
            values: vec![x],
            time,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.values.iter().all(|v| v.is_finite())
    }
}

/// Which dynamical system a spec describes, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    /// dx = -lambda x dt + sigma dW.
    Ou {
        lambda: f64,
        sigma: f64,
        /// Sample the exact transition kernel instead of Euler-Maruyama.
        exact_transitions: bool,
    },
    /// dx_l/dt = x_{l-1} (x_{l+1} - x_{l-2}) + forcing - x_l on a ring.
    Lorenz96 { sites: usize, forcing: f64 },
}

/// A system plus its numerical discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub model: Model,
    /// Integration step.
    pub dt: f64,
    /// Half-width of the uniform perturbation applied to cloned states.
    /// Zero disables perturbation; stochastic systems separate clones
    /// through their noise instead.
    pub clone_epsilon: f64,
}

impl SystemSpec {
    pub fn ou(lambda: f64, sigma: f64, dt: f64) -> Self {
        SystemSpec {
            model: Model::Ou {
                lambda,
                sigma,
                exact_transitions: false,
            },
            dt,
            clone_epsilon: 0.0,
        }
    }

    pub fn ou_exact(lambda: f64, sigma: f64, dt: f64) -> Self {
        SystemSpec {
            model: Model::Ou {
                lambda,
                sigma,
                exact_transitions: true,
            },
            dt,
            clone_epsilon: 0.0,
        }
    }

    pub fn lorenz96(sites: usize, forcing: f64, clone_epsilon: f64, dt: f64) -> Self {
        SystemSpec {
            model: Model::Lorenz96 { sites, forcing },
            dt,
            clone_epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            Model::Ou { .. } => 1,
            Model::Lorenz96 { sites, .. } => *sites,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            problems.push(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(self.clone_epsilon.is_finite() && self.clone_epsilon >= 0.0) {
            problems.push(format!(
                "clone_epsilon must be nonnegative, got {}",
                self.clone_epsilon
            ));
        }
        match &self.model {
            Model::Ou { lambda, sigma, .. } => {
                if !(lambda.is_finite() && *lambda > 0.0) {
                    problems.push(format!("lambda must be positive, got {lambda}"));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    problems.push(format!("sigma must be nonnegative, got {sigma}"));
                }
            }
            Model::Lorenz96 { sites, forcing } => {
                // The stencil x_{l-2}, x_{l-1}, x_l, x_{l+1} needs four
                // distinct sites to make sense on a ring.
                if *sites < 4 {
                    problems.push(format!("lorenz96 needs at least 4 sites, got {sites}"));
                }
                if !forcing.is_finite() {
                    problems.push(format!("forcing must be finite, got {forcing}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// Scalar function of the state whose tail statistics the estimators target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Observable {
    /// The coordinate of a scalar system.
    Position,
    /// Mean squared coordinate over the lattice, (1/2J) sum x_l^2.
    Energy,
    /// Placeholder for user-supplied observables; carries its tag.
    Custom(String),
}

impl Observable {
    /// Value of the observable at one state.
    pub fn value(&self, state: &State) -> Result<f64> {
        match self {
            Observable::Position => {
                if state.dim() == 1 {
                    Ok(state.values[0])
                } else {
                    Err(Error::InvalidInput(format!(
                        "position observable needs a scalar state, got dimension {}",
                        state.dim()
                    )))
                }
            }
            Observable::Energy => {
                if state.dim() == 0 {
                    return Err(Error::InvalidInput(
                        "energy observable needs a nonempty state".into(),
                    ));
                }
                let sum_sq: f64 = state.values.iter().map(|x| x * x).sum();
                Ok(sum_sq / (2.0 * state.dim() as f64))
            }
            Observable::Custom(tag) => Err(Error::InvalidInput(format!(
                "custom observable '{tag}' has no registered implementation"
            ))),
        }
    }

    /// Checks that the observable makes sense for the given system.
    pub fn validate_for(&self, spec: &SystemSpec) -> Result<()> {
        match (self, &spec.model) {
            (Observable::Position, Model::Ou { .. }) => Ok(()),
            (Observable::Energy, Model::Lorenz96 { .. }) => Ok(()),
            (Observable::Custom(tag), _) => Err(Error::InvalidInput(format!(
                "custom observable '{tag}' has no registered implementation"
            ))),
            (obs, model) => Err(Error::InvalidInput(format!(
                "observable {obs:?} does not apply to model {model:?}"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::Position => "position".into(),
            Observable::Energy => "energy".into(),
            Observable::Custom(tag) => format!("custom:{tag}"),
        }
    }
}

/// A uniformly sampled path: states at consecutive multiples of the step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
}

impl Trajectory {
    /// Wraps states, checking uniform time spacing.
    pub fn from_states(states: Vec<State>) -> Result<Self> {
        if states.len() < 2 {
            return Ok(Trajectory { states });
        }
        let dt = states[1].time - states[0].time;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "trajectory needs increasing times, first gap is {dt}"
            )));
        }
        for w in states.windows(2) {
            let gap = w[1].time - w[0].time;
            if (gap - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "trajectory spacing is not uniform: expected {dt}, found {gap}"
                )));
            }
        }
        Ok(Trajectory { states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// One Euler-Maruyama (or exact-kernel) step of the OU process. The caller
/// supplies the standard normal draw so noise streams stay under its control.
pub fn step_ou(state: &State, spec: &SystemSpec, gaussian_draw: f64) -> Result<State> {
    let Model::Ou {
        lambda,
        sigma,
        exact_transitions,
    } = spec.model
    else {
        return Err(Error::InvalidInput(
            "step_ou called with a non-OU system".into(),
        ));
    };
    if state.dim() != 1 {
        return Err(Error::InvalidInput(format!(
            "OU state must be scalar, got dimension {}",
            state.dim()
        )));
    }
    if !state.is_finite() || !gaussian_draw.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite state or draw in step_ou".into(),
        ));
    }
    let x = state.values[0];
    let dt = spec.dt;
    let next = if exact_transitions {
        let decay = (-lambda * dt).exp();
        let std = sigma * ((1.0 - (-2.0 * lambda * dt).exp()) / (2.0 * lambda)).sqrt();
        x * decay + std * gaussian_draw
    } else {
        x - lambda * x * dt + sigma * dt.sqrt() * gaussian_draw
    };
    Ok(State::scalar(next, state.time + dt))
}

fn lorenz96_rhs(x: &[f64], forcing: f64, out: &mut [f64]) {
    let j = x.len();
    for l in 0..j {
        let xm1 = x[(l + j - 1) % j];
        let xm2 = x[(l + j - 2) % j];
        let xp1 = x[(l + 1) % j];
        out[l] = xm1 * (xp1 - xm2) + forcing - x[l];
    }
}

/// One classical RK4 step of the Lorenz '96 system.
pub fn step_lorenz96(state: &State, spec: &SystemSpec) -> Result<State> {
    let Model::Lorenz96 { sites, forcing } = spec.model else {
        return Err(Error::InvalidInput(
            "step_lorenz96 called with a non-Lorenz96 system".into(),
        ));
    };
    if state.dim() != sites {
        return Err(Error::InvalidInput(format!(
            "state dimension {} does not match the {sites}-site lattice",
            state.dim()
        )));
    }
    if !state.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite state in step_lorenz96".into(),
        ));
    }
    let mut next = state.clone();
    let mut scratch = Rk4Scratch::new(sites);
    rk4_step_in_place(&mut next.values, forcing, spec.dt, &mut scratch);
    next.time = state.time + spec.dt;
    Ok(next)
}

/// Preallocated RK4 work arrays; reused across steps in hot loops.
struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(dim: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

fn rk4_step_in_place(x: &mut [f64], forcing: f64, dt: f64, s: &mut Rk4Scratch) {
    let n = x.len();
    lorenz96_rhs(x, forcing, &mut s.k1);
    for i in 0..n {
        s.tmp[i] = x[i] + 0.5 * dt * s.k1[i];
    }
    lorenz96_rhs(&s.tmp, forcing, &mut s.k2);
    for i in 0..n {
        s.tmp[i] = x[i] + 0.5 * dt * s.k2[i];
    }
    lorenz96_rhs(&s.tmp, forcing, &mut s.k3);
    for i in 0..n {
        s.tmp[i] = x[i] + dt * s.k3[i];
    }
    lorenz96_rhs(&s.tmp, forcing, &mut s.k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Displaces every coordinate by `clone_epsilon` times a uniform draw from
/// [-1, 1]. One draw per coordinate; time is untouched.
pub fn perturb_clone(state: &State, spec: &SystemSpec, uniform_draws: &[f64]) -> Result<State> {
    if uniform_draws.len() != state.dim() {
        return Err(Error::InvalidInput(format!(
            "need {} uniform draws for a {}-dimensional state, got {}",
            state.dim(),
            state.dim(),
            uniform_draws.len()
        )));
    }
    if uniform_draws.iter().any(|u| !(-1.0..=1.0).contains(u)) {
        return Err(Error::InvalidInput(
            "perturbation draws must lie in [-1, 1]".into(),
        ));
    }
    let mut out = state.clone();
    for (v, u) in out.values.iter_mut().zip(uniform_draws) {
        *v += spec.clone_epsilon * u;
    }
    Ok(out)
}

/// Evaluates the observable along a trajectory, one value per stored state.
pub fn evaluate_observable(traj: &Trajectory, obs: &Observable) -> Result<Vec<f64>> {
    traj.states.iter().map(|s| obs.value(s)).collect()
}

/// Integrates one state forward, recording the observable at every grid
/// point. Reuses its scratch buffers, so epoch loops allocate nothing per
/// step.
pub struct Integrator {
    spec: SystemSpec,
    scratch: Option<Rk4Scratch>,
}

impl Integrator {
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        spec.validate()?;
        let scratch = match spec.model {
            Model::Lorenz96 { sites, .. } => Some(Rk4Scratch::new(sites)),
            Model::Ou { .. } => None,
        };
        Ok(Integrator {
            spec: spec.clone(),
            scratch,
        })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    /// Advances `state` by `steps` grid steps, appending the observable at
    /// the start point and after every step (`steps + 1` values). OU noise
    /// comes from `rng`; Lorenz '96 ignores it.
    pub fn advance_recorded<R: Rng>(
        &mut self,
        state: &mut State,
        steps: usize,
        rng: &mut R,
        obs: &Observable,
        record: &mut Vec<f64>,
    ) -> Result<()> {
        record.push(obs.value(state)?);
        match self.spec.model {
            Model::Ou { .. } => {
                for _ in 0..steps {
                    let draw: f64 = rng.sample(StandardNormal);
                    *state = step_ou(state, &self.spec, draw)?;
                    record.push(obs.value(state)?);
                }
            }
            Model::Lorenz96 { sites, forcing } => {
                if state.dim() != sites {
                    return Err(Error::InvalidInput(format!(
                        "state dimension {} does not match the {sites}-site lattice",
                        state.dim()
                    )));
                }
                let scratch = self.scratch.as_mut().expect("lorenz96 scratch");
                for _ in 0..steps {
                    rk4_step_in_place(&mut state.values, forcing, self.spec.dt, scratch);
                    state.time += self.spec.dt;
                    let v = obs.value(state)?;
                    if !v.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "trajectory left the finite range at t = {}; reduce dt",
                            state.time
                        )));
                    }
                    record.push(v);
                }
            }
        }
        Ok(())
    }
}

/// Draws from the stationary law of the spec's OU process, N(0, sigma^2 / 2 lambda).
pub fn ou_stationary_draw<R: Rng>(spec: &SystemSpec, rng: &mut R) -> Result<State> {
    let Model::Ou { lambda, sigma, .. } = spec.model else {
        return Err(Error::InvalidInput(
            "stationary draw is only defined for the OU process".into(),
        ));
    };
    let std = sigma / (2.0 * lambda).sqrt();
    let draw: f64 = rng.sample(StandardNormal);
    Ok(State::scalar(std * draw, 0.0))
}

/// Builds a pool of `n` approximately independent Lorenz '96 states by
/// burning in from a perturbed uniform start and then subsampling the
/// attractor every `spacing` time units. Returns the pool and its cost in
/// integrated time units.
pub fn l96_initial_pool<R: Rng>(
    spec: &SystemSpec,
    n: usize,
    burn_in: f64,
    spacing: f64,
    rng: &mut R,
) -> Result<(Vec<State>, f64)> {
    let Model::Lorenz96 { sites, forcing } = spec.model else {
        return Err(Error::InvalidInput(
            "initial pool is only defined for Lorenz '96".into(),
        ));
    };
    if n == 0 || burn_in <= 0.0 || spacing <= 0.0 {
        return Err(Error::InvalidInput(
            "pool needs n > 0, burn_in > 0 and spacing > 0".into(),
        ));
    }
    // The hyperplane x_l = forcing is invariant, so the start must break it.
    let mut state = State::new(
        (0..sites)
            .map(|_| forcing * (1.0 + 0.01 * (rng.gen::<f64>() - 0.5)))
            .collect(),
        0.0,
    );
    let mut integ = Integrator::new(spec)?;
    let burn_steps = (burn_in / spec.dt).round() as usize;
    let gap_steps = (spacing / spec.dt).round().max(1.0) as usize;
    let mut sink = Vec::new();
    let obs = Observable::Energy;
    integ.advance_recorded(&mut state, burn_steps, rng, &obs, &mut sink)?;
    let mut pool = Vec::with_capacity(n);
    for _ in 0..n {
        sink.clear();
        integ.advance_recorded(&mut state, gap_steps, rng, &obs, &mut sink)?;
        let mut s = state.clone();
        s.time = 0.0;
        pool.push(s);
    }
    let cost = burn_in + n as f64 * gap_steps as f64 * spec.dt;
    Ok((pool, cost))
}

/// Smallest lag at which the series' autocorrelation magnitude falls to the
/// tolerance, in time units. This is the natural scale for the resampling
/// interval: epochs shorter than it buy correlated information.
pub fn estimate_resampling_time(series: &[f64], dt: f64, tolerance: f64) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if !(0.0..1.0).contains(&tolerance) || tolerance <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "tolerance must lie in (0, 1), got {tolerance}"
        )));
    }
    let n = series.len();
    if n < 20 {
        return Err(Error::InvalidInput(format!(
            "series of length {n} is too short for autocorrelation estimates"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::InvalidInput(
            "series is constant or non-finite; autocorrelation is undefined".into(),
        ));
    }
    let max_lag = n / 2;
    let mut min_abs = f64::INFINITY;
    for k in 1..=max_lag {
        let mut cov = 0.0;
        for i in 0..n - k {
            cov += (series[i] - mean) * (series[i + k] - mean);
        }
        let acf = cov / var;
        min_abs = min_abs.min(acf.abs());
        if acf.abs() <= tolerance {
            // Estimates at lag k use n - k products; below ~10 per lag the
            // acf itself is noise and the answer meaningless.
            if n < 10 * k {
                return Err(Error::InvalidInput(format!(
                    "decorrelation lag {k} found, but the series has only {n} \
                     points; need at least {}",
                    10 * k
                )));
            }
            return Ok(k as f64 * dt);
        }
    }
    Err(Error::NoDecorrelation {
        min_autocorr: min_abs,
    })
}
