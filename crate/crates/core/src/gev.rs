//! Generalized extreme value fitting of block maxima.
//!
//! Block maxima of weakly dependent series converge to the GEV family
//! G(x) = exp(-(1 + zeta (x - mu) / sigma)^(-1/zeta)). Fitting mu, sigma,
//! zeta by maximum likelihood turns a modest number of maxima into tail
//! probabilities and return levels far beyond the observed range; the fit's
//! observed information provides delta-method confidence intervals, and a
//! profile likelihood gives honest intervals for the shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{minimize, SimplexOptions, SimplexResult};

/// Location, scale, shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub zeta: f64,
}

/// Where a set of block maxima came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockLayout {
    /// Final-value samples chunked into blocks of m.
    EndParticleBlocks,
    /// Trajectories grouped m at a time, maximized at each time index.
    PerTimeStepAcrossTrajectories,
    /// One long series chunked into blocks of m consecutive points.
    SingleLongSeries,
}

/// Block maxima plus the block size that produced them. A block size of one
/// marks values that are already maxima (or raw draws fitted directly).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMaximaSeries {
    pub maxima: Vec<f64>,
    pub block_size: usize,
    pub layout: BlockLayout,
}

impl BlockMaximaSeries {
    /// Wraps values that already are block maxima.
    pub fn from_maxima(maxima: Vec<f64>, block_size: usize, layout: BlockLayout) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidInput("block size must be at least one".into()));
        }
        if maxima.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("maxima contain non-finite values".into()));
        }
        Ok(BlockMaximaSeries {
            maxima,
            block_size,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.maxima.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maxima.is_empty()
    }
}

/// Maxima over consecutive blocks of m values; a trailing partial block is
/// dropped. Blocking needs m >= 2, otherwise use
/// [`BlockMaximaSeries::from_maxima`].
pub fn block_maxima(source: &[f64], m: usize, layout: BlockLayout) -> Result<BlockMaximaSeries> {
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "blocking needs m >= 2, got {m}; wrap raw maxima with from_maxima instead"
        )));
    }
    if layout == BlockLayout::PerTimeStepAcrossTrajectories {
        return Err(Error::InvalidInput(
            "per-time-step maxima need the trajectory matrix entry point".into(),
        ));
    }
    if source.len() < m {
        return Err(Error::InvalidInput(format!(
            "{} values cannot fill one block of {m}",
            source.len()
        )));
    }
    if source.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("source contains non-finite values".into()));
    }
    let maxima: Vec<f64> = source
        .chunks_exact(m)
        .map(|chunk| chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(BlockMaximaSeries {
        maxima,
        block_size: m,
        layout,
    })
}

/// Groups trajectories m at a time and takes the maximum across each group
/// separately at every time index: floor(rows / m) maxima per column.
pub fn block_maxima_per_time_step(
    trajectories: &[Vec<f64>],
    m: usize,
) -> Result<BlockMaximaSeries> {
    if m < 2 {
        return Err(Error::InvalidInput(format!("blocking needs m >= 2, got {m}")));
    }
    if trajectories.len() < m {
        return Err(Error::InvalidInput(format!(
            "{} trajectories cannot fill one group of {m}",
            trajectories.len()
        )));
    }
    let len = trajectories[0].len();
    if len == 0 || trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::InvalidInput(
            "trajectories must be nonempty and equally long".into(),
        ));
    }
    let groups = trajectories.len() / m;
    let mut maxima = Vec::with_capacity(groups * len);
    for g in 0..groups {
        let rows = &trajectories[g * m..(g + 1) * m];
        for j in 0..len {
            let mx = rows
                .iter()
                .map(|r| r[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::InvalidInput("trajectories contain non-finite values".into()));
            }
            maxima.push(mx);
        }
    }
    Ok(BlockMaximaSeries {
        maxima,
        block_size: m,
        layout: BlockLayout::PerTimeStepAcrossTrajectories,
    })
}

const PENALTY: f64 = 1e10;

/// Negative log likelihood with scale-free penalties outside the valid
/// region, so optimization trajectories are invariant under affine maps of
/// the data. The shape is confined to (-1, 10): below -1 the likelihood is
/// unbounded, far above it nothing physical lives.
fn negative_log_likelihood(data: &[f64], mu: f64, sigma: f64, zeta: f64) -> f64 {
    // Callers screen sigma <= 0 with a scale-aware penalty; this is the
    // unconditional backstop.
    if !(sigma > 0.0) {
        return f64::INFINITY;
    }
    if zeta <= -1.0 {
        return PENALTY * (1.0 + (-1.0 - zeta));
    }
    if zeta >= 10.0 {
        return PENALTY * (1.0 + (zeta - 10.0));
    }
    let mut violation = 0.0;
    let mut nll = (data.len() as f64) * sigma.ln();
    for &x in data {
        let z = (x - mu) / sigma;
        let t = 1.0 + zeta * z;
        if t <= 0.0 {
            violation += -t + 1e-12;
            continue;
        }
        // h = ln(1 + zeta z) / zeta, stabilized by its series for small zeta.
        let h = if zeta.abs() < 1e-6 {
            z * (1.0 - 0.5 * zeta * z + zeta * zeta * z * z / 3.0)
        } else {
            (zeta * z).ln_1p() / zeta
        };
        nll += (1.0 + zeta) * h + (-h).exp();
    }
    if violation > 0.0 {
        return PENALTY * (1.0 + violation);
    }
    nll
}

/// Scale-aware penalty for a nonpositive sigma proposal. Kept separate so
/// the slope pushes the simplex back toward positive scales.
fn sigma_penalty(sigma: f64, scale: f64) -> f64 {
    PENALTY * (1.0 + (-sigma) / scale)
}

/// Convergence and uncertainty diagnostics of one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub starts_tried: usize,
    pub iterations: usize,
    /// Newton step sizes |g_k / H_kk| at the optimum, one per parameter.
    pub newton_step: [f64; 3],
    /// Fewer than 30 maxima: the asymptotics backing the fit are shaky.
    pub below_soft_minimum: bool,
}

/// A maximum-likelihood GEV fit with its observed-information covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevFit {
    pub params: GevParams,
    pub log_likelihood: f64,
    /// Inverse of the observed information, order (mu, sigma, zeta).
    pub covariance: [[f64; 3]; 3],
    pub n_maxima: usize,
    pub block_size: usize,
    pub layout: BlockLayout,
    pub diagnostics: FitDiagnostics,
}

fn mean_and_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn invert_symmetric_3x3(h: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let a = h[0][0];
    let b = h[0][1];
    let c = h[0][2];
    let d = h[1][1];
    let e = h[1][2];
    let f = h[2][2];
    let det = a * (d * f - e * e) - b * (b * f - c * e) + c * (b * e - c * d);
    // Positive-definiteness via leading principal minors.
    if !(a > 0.0 && a * d - b * b > 0.0 && det > 0.0) {
        return None;
    }
    let inv = [
        [
            (d * f - e * e) / det,
            (c * e - b * f) / det,
            (b * e - c * d) / det,
        ],
        [
            (c * e - b * f) / det,
            (a * f - c * c) / det,
            (b * c - a * e) / det,
        ],
        [
            (b * e - c * d) / det,
            (b * c - a * e) / det,
            (a * d - b * b) / det,
        ],
    ];
    Some(inv)
}

/// Maximum-likelihood fit. Nelder-Mead from moment-based starts with shapes
/// {0, +0.1, -0.1}; the winner must pass a Newton-step stationarity check,
/// and the covariance comes from the finite-difference Hessian at the
/// optimum. Errors on degenerate input or a failed stationarity check.
pub fn fit_gev_mle(maxima: &BlockMaximaSeries) -> Result<GevFit> {
    let data = &maxima.maxima;
    if data.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "{} maxima cannot pin down three parameters",
            data.len()
        )));
    }
    let (mean, std) = mean_and_std(data);
    if !(std.is_finite() && std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::NonConvergence {
            params: [mean, 0.0, 0.0],
            grad_norm: f64::INFINITY,
            message: "maxima are (numerically) constant; the scale cannot be resolved".into(),
        });
    }

    // Gumbel moment start: sigma = std sqrt(6)/pi, mu = mean - gamma_E sigma.
    let sigma0 = std * 0.7796968012336761;
    let mu0 = mean - 0.5772156649015329 * sigma0;
    let objective = |p: &[f64]| -> f64 {
        if p[1] <= 0.0 {
            return sigma_penalty(p[1], sigma0);
        }
        negative_log_likelihood(data, p[0], p[1], p[2])
    };

    let steps = [0.1 * sigma0, 0.1 * sigma0, 0.1];
    let opts = SimplexOptions {
        max_iter: 3000,
        ..SimplexOptions::default()
    };
    let mut best: Option<SimplexResult> = None;
    let mut starts_tried = 0;
    let mut iterations = 0;
    for zeta0 in [0.0, 0.1, -0.1] {
        starts_tried += 1;
        let r = minimize(objective, &[mu0, sigma0, zeta0], &steps, opts);
        iterations += r.iterations;
        if best.as_ref().map_or(true, |b| r.f < b.f) {
            best = Some(r);
        }
    }
    let mut best = best.expect("at least one start ran");

    // Polish until the Newton step is negligible on each parameter's scale.
    let scale = [sigma0, sigma0, 1.0];
    let mut newton = [f64::INFINITY; 3];
    for round in 0..3 {
        let h: Vec<f64> = scale.iter().map(|s| 3e-5 * s).collect();
        let (grad, hess) = gradient_and_hessian(&objective, &best.x, &h);
        for k in 0..3 {
            newton[k] = if hess[k][k].abs() > 0.0 {
                (grad[k] / hess[k][k]).abs()
            } else {
                f64::INFINITY
            };
        }
        let stationary = (0..3).all(|k| newton[k] <= 1e-4 * scale[k]);
        if stationary {
            break;
        }
        if round == 2 {
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            return Err(Error::NonConvergence {
                params: [best.x[0], best.x[1], best.x[2]],
                grad_norm,
                message: "stationarity check failed after polishing".into(),
            });
        }
        let fine = [0.01 * sigma0, 0.01 * sigma0, 0.01];
        let r = minimize(objective, &best.x.clone(), &fine, opts);
        iterations += r.iterations;
        if r.f <= best.f {
            best = r;
        }
    }

    let h: Vec<f64> = scale.iter().map(|s| 3e-5 * s).collect();
    let (_, hess) = gradient_and_hessian(&objective, &best.x, &h);
    let covariance = invert_symmetric_3x3(&hess).ok_or_else(|| Error::NonConvergence {
        params: [best.x[0], best.x[1], best.x[2]],
        grad_norm: 0.0,
        message: "observed information is not positive definite".into(),
    })?;

    Ok(GevFit {
        params: GevParams {
            mu: best.x[0],
            sigma: best.x[1],
            zeta: best.x[2],
        },
        log_likelihood: -best.f,
        covariance,
        n_maxima: data.len(),
        block_size: maxima.block_size,
        layout: maxima.layout,
        diagnostics: FitDiagnostics {
            starts_tried,
            iterations,
            newton_step: newton,
            below_soft_minimum: data.len() < 30,
        },
    })
}

fn gradient_and_hessian<F>(f: &F, x: &[f64], h: &[f64]) -> ([f64; 3], [[f64; 3]; 3])
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = f(x);
    let mut grad = [0.0; 3];
    let mut hess = [[0.0; 3]; 3];
    let shift = |k: usize, s: f64, l: usize, t: f64, x: &[f64]| -> f64 {
        let mut p = x.to_vec();
        p[k] += s * h[k];
        p[l] += t * h[l];
        f(&p)
    };
    for k in 0..3 {
        let fp = shift(k, 1.0, k, 0.0, x);
        let fm = shift(k, -1.0, k, 0.0, x);
        grad[k] = (fp - fm) / (2.0 * h[k]);
        hess[k][k] = (fp - 2.0 * f0 + fm) / (h[k] * h[k]);
    }
    for k in 0..3 {
        for l in (k + 1)..3 {
            let pp = shift(k, 1.0, l, 1.0, x);
            let pm = shift(k, 1.0, l, -1.0, x);
            let mp = shift(k, -1.0, l, 1.0, x);
            let mm = shift(k, -1.0, l, -1.0, x);
            let v = (pp - pm - mp + mm) / (4.0 * h[k] * h[l]);
            hess[k][l] = v;
            hess[l][k] = v;
        }
    }
    (grad, hess)
}

/// The tail function t(x) with G(x) = exp(-t(x)). Infinite below a positive-
/// shape lower endpoint, zero above a negative-shape upper endpoint.
fn t_value(p: &GevParams, x: f64) -> f64 {
    let z = (x - p.mu) / p.sigma;
    if p.zeta == 0.0 {
        (-z).exp()
    } else {
        let s = p.zeta * z;
        if s <= -1.0 {
            if p.zeta > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            // (1 + s)^(-1/zeta) through ln_1p, stable for tiny zeta.
            (-s.ln_1p() / p.zeta).exp()
        }
    }
}

/// GEV distribution function. NaN when the scale is not positive.
pub fn gev_cdf(p: &GevParams, x: f64) -> f64 {
    if !(p.sigma > 0.0) {
        return f64::NAN;
    }
    (-t_value(p, x)).exp()
}

/// GEV quantile at probability q in (0, 1). NaN outside the domain.
pub fn gev_quantile(p: &GevParams, q: f64) -> f64 {
    if !(p.sigma > 0.0) || !(0.0 < q && q < 1.0) {
        return f64::NAN;
    }
    let w = -q.ln();
    if p.zeta == 0.0 {
        p.mu - p.sigma * w.ln()
    } else {
        // (w^(-zeta) - 1) / zeta through exp_m1, stable for tiny zeta.
        p.mu + p.sigma * (-p.zeta * w.ln()).exp_m1() / p.zeta
    }
}

/// Per-sample exceedance probability implied by a fit to maxima of blocks of
/// m: P(X > x) = 1 - G(x)^(1/m), computed as -expm1(-t(x)/m) so small tails
/// keep full precision. With m = 1 this is exactly 1 - G.
pub fn tail_from_gev(fit: &GevFit, x: f64) -> f64 {
    let t = t_value(&fit.params, x);
    -(-t / fit.block_size as f64).exp_m1()
}

/// Delta-method 95% interval around [`tail_from_gev`], clamped to [0, 1].
pub fn tail_from_gev_ci(fit: &GevFit, x: f64) -> (f64, f64, f64) {
    let est = tail_from_gev(fit, x);
    let g = |p: &GevParams| -> f64 {
        let t = t_value(p, x);
        -(-t / fit.block_size as f64).exp_m1()
    };
    let se = delta_method_se(fit, g);
    (
        (est - 1.96 * se).max(0.0),
        est,
        (est + 1.96 * se).min(1.0),
    )
}

fn delta_method_se<G>(fit: &GevFit, g: G) -> f64
where
    G: Fn(&GevParams) -> f64,
{
    let p = fit.params;
    let h = [1e-6 * p.sigma, 1e-6 * p.sigma, 1e-6];
    let mut grad = [0.0; 3];
    for k in 0..3 {
        let mut up = p;
        let mut dn = p;
        match k {
            0 => {
                up.mu += h[0];
                dn.mu -= h[0];
            }
            1 => {
                up.sigma += h[1];
                dn.sigma -= h[1];
            }
            _ => {
                up.zeta += h[2];
                dn.zeta -= h[2];
            }
        }
        grad[k] = (g(&up) - g(&dn)) / (2.0 * h[k]);
    }
    let mut var = 0.0;
    for k in 0..3 {
        for l in 0..3 {
            var += grad[k] * fit.covariance[k][l] * grad[l];
        }
    }
    var.max(0.0).sqrt()
}

/// A return level with its delta-method 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevel {
    pub return_period: f64,
    pub level: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Level exceeded once every r blocks on average: the GEV quantile at
/// 1 - 1/r. The period must exceed one block.
pub fn return_level(fit: &GevFit, return_period: f64) -> Result<ReturnLevel> {
    if !(return_period.is_finite() && return_period > 1.0) {
        return Err(Error::InvalidInput(format!(
            "return period must exceed one block, got {return_period}"
        )));
    }
    let q = 1.0 - 1.0 / return_period;
    let level = gev_quantile(&fit.params, q);
    if !level.is_finite() {
        return Err(Error::InvalidInput(format!(
            "return level at period {return_period} is not finite for this fit"
        )));
    }
    let se = delta_method_se(fit, |p| gev_quantile(p, q));
    Ok(ReturnLevel {
        return_period,
        level,
        ci_lo: level - 1.96 * se,
        ci_hi: level + 1.96 * se,
    })
}

/// Profile-likelihood 95% interval for the shape: the set of zeta whose
/// profile deviance 2 (nll(zeta) - nll_min) stays under the chi-square(1)
/// critical value 3.841458820694124.
pub fn zeta_profile_ci(maxima: &BlockMaximaSeries, fit: &GevFit) -> Result<(f64, f64)> {
    let data = &maxima.maxima;
    let nll_min = -fit.log_likelihood;
    let target = nll_min + 0.5 * 3.841458820694124;
    let sigma_scale = fit.params.sigma;

    let profile = |zeta: f64| -> f64 {
        let obj = |p: &[f64]| -> f64 {
            if p[1] <= 0.0 {
                return sigma_penalty(p[1], sigma_scale);
            }
            negative_log_likelihood(data, p[0], p[1], zeta)
        };
        let r = minimize(
            obj,
            &[fit.params.mu, fit.params.sigma],
            &[0.1 * sigma_scale, 0.1 * sigma_scale],
            SimplexOptions {
                max_iter: 2000,
                ..SimplexOptions::default()
            },
        );
        r.f
    };

    let mut bounds = [f64::NAN; 2];
    for (i, direction) in [-1.0, 1.0].iter().enumerate() {
        let step = 0.05 * (1.0 + fit.params.zeta.abs());
        let mut inside = fit.params.zeta;
        let mut outside = None;
        for k in 1..=400 {
            let z = fit.params.zeta + direction * step * k as f64;
            if z <= -1.0 {
                outside = Some(-1.0 + 1e-9);
                break;
            }
            if profile(z) > target {
                outside = Some(z);
                break;
            }
            inside = z;
        }
        let mut outside = outside.ok_or_else(|| Error::NonConvergence {
            params: [fit.params.mu, fit.params.sigma, fit.params.zeta],
            grad_norm: 0.0,
            message: "profile likelihood never crossed the confidence level".into(),
        })?;
        for _ in 0..50 {
            let mid = 0.5 * (inside + outside);
            if profile(mid) > target {
                outside = mid;
            } else {
                inside = mid;
            }
        }
        bounds[i] = 0.5 * (inside + outside);
    }
    Ok((bounds[0], bounds[1]))
}
