//! Brute-force Monte Carlo tail estimation and the error diagnostics used
//! to compare every method against it.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Standard normal upper tail P(X > a).
pub fn gaussian_tail(a: f64) -> f64 {
    0.5 * erfc(a / std::f64::consts::SQRT_2)
}

/// One tail-probability estimate with its a-priori error scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub threshold: f64,
    pub gamma_hat: f64,
    pub n_samples: usize,
    /// 1 / sqrt(n gamma_hat): the relative error a binomial count of this
    /// size carries when gamma_hat is small. Infinite when nothing exceeded.
    pub theoretical_rel_err: f64,
}

/// Fraction of samples strictly above the threshold.
pub fn estimate_tail_mc(samples: &[f64], threshold: f64) -> Result<TailEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "cannot estimate a tail from zero samples".into(),
        ));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidInput(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("samples contain non-finite values".into()));
    }
    let n = samples.len();
    let hits = samples.iter().filter(|&&x| x > threshold).count();
    let gamma_hat = hits as f64 / n as f64;
    let theoretical_rel_err = if hits > 0 {
        1.0 / (n as f64 * gamma_hat).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(TailEstimate {
        threshold,
        gamma_hat,
        n_samples: n,
        theoretical_rel_err,
    })
}

/// Spread and bias of repeated estimates against a reference value:
/// `rel_err` is the root mean squared deviation relative to the reference,
/// `mean_dev` the relative deviation of the mean.
pub fn empirical_rel_err(estimates: &[f64], reference_gamma: f64) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one estimate for an error report".into(),
        ));
    }
    if !(reference_gamma.is_finite() && reference_gamma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "reference probability must be positive, got {reference_gamma}"
        )));
    }
    if estimates.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("estimates contain non-finite values".into()));
    }
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let msd = estimates
        .iter()
        .map(|g| (g - reference_gamma) * (g - reference_gamma))
        .sum::<f64>()
        / k;
    Ok((
        msd.sqrt() / reference_gamma,
        (mean - reference_gamma).abs() / reference_gamma,
    ))
}

/// Relative error of one method at a set of thresholds, measured over
/// repeated experiments against a reference probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelErrRow {
    pub threshold: f64,
    pub reference_gamma: f64,
    pub rel_err: f64,
    pub mean_dev: f64,
    pub experiments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelErrReport {
    pub method: String,
    pub rows: Vec<RelErrRow>,
}

/// Exact sampling diagnostics for estimating P(X > a), X standard normal,
/// by tilting the sampling law to N(c, 1) and reweighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedOracle {
    /// Per-sample variance of the reweighted indicator.
    pub variance: f64,
    /// Plain-MC relative error divided by tilted relative error at equal
    /// sample count. One at c = 0 by construction.
    pub rel_err_reduction: f64,
}

/// Closed-form variance of the tilted estimator. With density ratio
/// L(x) = e^{c^2/2 - c x}, the second moment of 1{X > a} L under N(c, 1) is
/// E[1{X > a} L^2 dN(c,1)] = e^{c^2} P(X > a + c), hence
/// var = e^{c^2} P(X > a + c) - gamma^2.
pub fn tilted_gaussian_oracle(a: f64, c: f64) -> Result<TiltedOracle> {
    if !a.is_finite() || !c.is_finite() {
        return Err(Error::InvalidInput("threshold and tilt must be finite".into()));
    }
    let gamma = gaussian_tail(a);
    let second_moment = (c * c).exp() * gaussian_tail(a + c);
    let variance = second_moment - gamma * gamma;
    let plain_variance = gamma - gamma * gamma;
    let rel_err_reduction = if c == 0.0 {
        1.0
    } else {
        (plain_variance / variance).sqrt()
    };
    Ok(TiltedOracle {
        variance,
        rel_err_reduction,
    })
}

/// Grid search for the tilt minimizing the oracle variance, on [0, 2a] in
/// steps of 0.01. Returns (best tilt, its oracle).
pub fn optimal_tilt(a: f64) -> Result<(f64, TiltedOracle)> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::InvalidInput(format!(
            "optimal tilt needs a positive threshold, got {a}"
        )));
    }
    let steps = (200.0 * a).round() as usize;
    let mut best_c = 0.0;
    let mut best = tilted_gaussian_oracle(a, 0.0)?;
    for i in 1..=steps {
        let c = i as f64 * 0.01;
        let oracle = tilted_gaussian_oracle(a, c)?;
        if oracle.variance < best.variance {
            best_c = c;
            best = oracle;
        }
    }
    Ok((best_c, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Role};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn gaussian_tail_matches_reference_values() {
        // Reference values are correctly rounded doubles. The library's
        // complementary error function is good to roughly ten digits, hence
        // the 1e-9 relative tolerance.
        let cases = [
            (0.0, 0.5),
            (0.5, 0.3085375387259869),
            (1.0, 0.15865525393145705),
            (2.0, 0.02275013194817921),
            (3.0, 0.0013498980316300946),
            (4.0, 3.1671241833119924e-5),
            (5.0, 2.866515718791939e-7),
            (6.0, 9.86587645037698e-10),
            (8.0, 6.220960574271784e-16),
        ];
        for (a, want) in cases {
            let got = gaussian_tail(a);
            assert!(
                (got - want).abs() <= 1e-9 * want.max(1e-300),
                "a={a}: got {got:e}, want {want:e}"
            );
        }
    }

    #[test]
    fn tail_estimate_on_tiny_sample() {
        let est = estimate_tail_mc(&[1.0, 2.0, 3.0], 2.5).unwrap();
        assert_eq!(est.gamma_hat, 1.0 / 3.0);
        assert_eq!(est.n_samples, 3);
        assert_eq!(est.theoretical_rel_err, 1.0);
    }

    #[test]
    fn tail_estimate_edge_cases() {
        let all = estimate_tail_mc(&[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(all.gamma_hat, 1.0);
        let none = estimate_tail_mc(&[1.0, 2.0, 3.0], 5.0).unwrap();
        assert_eq!(none.gamma_hat, 0.0);
        assert!(none.theoretical_rel_err.is_infinite());
        // Strict exceedance: the threshold itself does not count.
        let tie = estimate_tail_mc(&[1.0, 2.0, 3.0], 3.0).unwrap();
        assert_eq!(tie.gamma_hat, 0.0);
        assert!(estimate_tail_mc(&[], 0.0).is_err());
        assert!(estimate_tail_mc(&[f64::NAN], 0.0).is_err());
    }

    #[test]
    fn tail_estimate_agrees_with_gaussian_tail_at_scale() {
        let mut rng = stream(31, 0, 0, 0, Role::Init);
        let n = 1_000_000usize;
        let samples: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let est = estimate_tail_mc(&samples, 2.0).unwrap();
        let gamma = gaussian_tail(2.0);
        let se = (gamma * (1.0 - gamma) / n as f64).sqrt();
        assert!(
            (est.gamma_hat - gamma).abs() < 3.0 * se,
            "got {}, want {gamma} +- {se}",
            est.gamma_hat
        );
        // 1/sqrt(n gamma_hat) ~ 6.6e-3 here.
        assert!((est.theoretical_rel_err - 6.6e-3).abs() < 1e-3);
    }

    #[test]
    fn empirical_rel_err_on_crafted_estimates() {
        // gamma_hat in {0, 2 gamma} around gamma: rmsd = gamma, mean unbiased.
        let (rel, dev) = empirical_rel_err(&[0.0, 2e-3], 1e-3).unwrap();
        assert!((rel - 1.0).abs() < 1e-12);
        assert!(dev.abs() < 1e-12);

        // Constant correct estimates: no spread, no bias.
        let (rel, dev) = empirical_rel_err(&[1e-3; 8], 1e-3).unwrap();
        assert_eq!(rel, 0.0);
        assert_eq!(dev, 0.0);

        assert!(empirical_rel_err(&[], 1e-3).is_err());
        assert!(empirical_rel_err(&[1e-3], 0.0).is_err());
    }

    #[test]
    fn empirical_rel_err_matches_theoretical_scale() {
        // K batches of n plain-MC samples: rel_err should come out near
        // 1/sqrt(n gamma) and mean_dev near rel_err / sqrt(K).
        let gamma = gaussian_tail(2.0);
        let n = 1000;
        let k = 100;
        let mut estimates = Vec::with_capacity(k);
        for exp in 0..k {
            let mut rng = stream(77, exp as u32, 0, 0, Role::Init);
            let samples: Vec<f64> =
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            estimates.push(estimate_tail_mc(&samples, 2.0).unwrap().gamma_hat);
        }
        let (rel, dev) = empirical_rel_err(&estimates, gamma).unwrap();
        let theory = 1.0 / (n as f64 * gamma).sqrt();
        assert!(
            (rel - theory).abs() < 0.3 * theory,
            "rel {rel}, theory {theory}"
        );
        assert!(dev < 3.0 * theory / (k as f64).sqrt(), "dev {dev}");
    }

    #[test]
    fn tilted_oracle_matches_closed_form() {
        let o = tilted_gaussian_oracle(2.0, 2.0).unwrap();
        assert!((o.variance - 0.001211622709681114).abs() < 1e-9 * 0.0012);
        assert!((o.rel_err_reduction - 4.2836212838477845).abs() < 1e-8);

        let at_zero = tilted_gaussian_oracle(2.0, 0.0).unwrap();
        assert_eq!(at_zero.rel_err_reduction, 1.0);
        let gamma = gaussian_tail(2.0);
        assert!((at_zero.variance - (gamma - gamma * gamma)).abs() < 1e-18);
    }

    #[test]
    fn tilted_oracle_agrees_with_simulation() {
        // Estimate P(X > 2) by sampling N(c, 1) and reweighting; the sample
        // variance of the weighted indicator must match airtight math.
        let a = 2.0;
        let c = 2.0;
        let mut rng = stream(55, 0, 0, 0, Role::Init);
        let n = 2_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x: f64 = c + rng.sample::<f64, _>(StandardNormal);
            let val = if x > a {
                (0.5 * c * c - c * x).exp()
            } else {
                0.0
            };
            sum += val;
            sum_sq += val * val;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let gamma = gaussian_tail(a);
        assert!((mean - gamma).abs() < 5.0 * (var / n as f64).sqrt(), "mean {mean}");
        let oracle = tilted_gaussian_oracle(a, c).unwrap();
        assert!(
            (var - oracle.variance).abs() < 0.05 * oracle.variance,
            "var {var} vs oracle {}",
            oracle.variance
        );
    }

    #[test]
    fn optimal_tilt_lands_past_the_threshold() {
        let (c, oracle) = optimal_tilt(2.0).unwrap();
        assert!((c - 2.22).abs() < 1e-9, "c* = {c}");
        assert!((oracle.variance - 0.0011700509288555916).abs() < 1e-9 * 0.0012);
        assert!((oracle.rel_err_reduction - 4.3590553872441795).abs() < 1e-8);
        assert!(optimal_tilt(-1.0).is_err());
    }
}
