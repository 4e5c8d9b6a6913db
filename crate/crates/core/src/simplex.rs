//! Nelder-Mead simplex minimization.
//!
//! Small, dependency-free, and scale-aware: the initial simplex is built
//! from caller-supplied per-coordinate steps and convergence is judged
//! relative to those same steps, so affinely rescaled problems follow
//! identical trajectories.

/// Stopping rules and iteration budget.
#[derive(Clone, Copy, Debug)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Simplex extent per coordinate, relative to that coordinate's initial
    /// step, below which the simplex counts as collapsed.
    pub x_tol: f64,
    /// Function-value spread across the simplex, relative to 1 + |best|.
    pub f_tol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iter: 800,
            x_tol: 1e-8,
            f_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with an initial simplex displaced by `steps`.
/// Standard coefficients: reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2.
pub fn minimize<F>(mut f: F, x0: &[f64], steps: &[f64], opts: SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    assert_eq!(steps.len(), dim, "one step per coordinate");
    assert!(dim > 0, "cannot optimize zero coordinates");

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    points.push(x0.to_vec());
    for d in 0..dim {
        let mut p = x0.to_vec();
        p[d] += steps[d];
        points.push(p);
    }
    let mut values: Vec<f64> = points.iter().map(|p| f(p)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;

        // Order so that 0 is best, dim is worst.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        let f_spread = values[worst] - values[best];
        let mut x_collapsed = true;
        for d in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in &points {
                lo = lo.min(p[d]);
                hi = hi.max(p[d]);
            }
            if hi - lo > opts.x_tol * steps[d].abs() {
                x_collapsed = false;
                break;
            }
        }
        if x_collapsed && f_spread <= opts.f_tol * (1.0 + values[best].abs()) {
            converged = true;
            break;
        }

        // Centroid of everything but the worst point.
        let mut centroid = vec![0.0; dim];
        for (i, p) in points.iter().enumerate() {
            if i == worst {
                continue;
            }
            for d in 0..dim {
                centroid[d] += p[d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let blend = |a: f64| -> Vec<f64> {
            (0..dim)
                .map(|d| centroid[d] + a * (points[worst][d] - centroid[d]))
                .collect()
        };

        let reflected = blend(-1.0);
        let f_reflected = f(&reflected);
        if f_reflected < values[best] {
            let expanded = blend(-2.0);
            let f_expanded = f(&expanded);
            if f_expanded < f_reflected {
                points[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                points[worst] = reflected;
                values[worst] = f_reflected;
            }
        } else if f_reflected < values[second_worst] {
            points[worst] = reflected;
            values[worst] = f_reflected;
        } else {
            let contracted = if f_reflected < values[worst] {
                blend(-0.5)
            } else {
                blend(0.5)
            };
            let f_contracted = f(&contracted);
            if f_contracted < values[worst].min(f_reflected) {
                points[worst] = contracted;
                values[worst] = f_contracted;
            } else {
                // Shrink everything toward the best point.
                let anchor = points[best].clone();
                for (i, p) in points.iter_mut().enumerate() {
                    if i == best {
                        continue;
                    }
                    for d in 0..dim {
                        p[d] = anchor[d] + 0.5 * (p[d] - anchor[d]);
                    }
                    values[i] = f(p);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=dim {
        if values[i] < values[best] {
            best = i;
        }
    }
    SimplexResult {
        x: points[best].clone(),
        f: values[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
        let r = minimize(f, &[0.0, 0.0], &[0.5, 0.5], SimplexOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-6, "x0 = {}", r.x[0]);
        assert!((r.x[1] + 1.0).abs() < 1e-6, "x1 = {}", r.x[1]);
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(
            f,
            &[-1.2, 1.0],
            &[0.1, 0.1],
            SimplexOptions {
                max_iter: 5000,
                ..SimplexOptions::default()
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn trajectory_is_scale_equivariant() {
        // Minimizing f(x) and f(x / s) with steps scaled by s must visit
        // exactly scaled points, because every simplex operation is affine.
        // s is a power of two so the scaling itself never rounds.
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] - 1.0).powi(2);
        let s = 1048576.0;
        let g = |x: &[f64]| f(&[x[0] / s, x[1]]);
        let a = minimize(f, &[0.0, 0.0], &[0.4, 0.4], SimplexOptions::default());
        let b = minimize(g, &[0.0, 0.0], &[0.4 * s, 0.4], SimplexOptions::default());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.x[0] * s, b.x[0]);
        assert_eq!(a.x[1], b.x[1]);
    }

    #[test]
    fn reports_non_convergence_when_starved() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(
            f,
            &[-1.2, 1.0],
            &[0.1, 0.1],
            SimplexOptions {
                max_iter: 5,
                ..SimplexOptions::default()
            },
        );
        assert!(!r.converged);
    }
}
