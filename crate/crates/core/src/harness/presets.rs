//! Ready-made experiment configurations. Costs inside a comparison family
//! are matched exactly so `compare_methods` accepts them as equals:
//! ou-mc / ou-gev / ou-gpa-small all cost 3e3 trajectory units, and the
//! ou-re triple (gpa / mc / gev) costs 1e5 each.

use super::{ExperimentConfig, Method};

/// Names and one-line descriptions of every shipped preset.
pub fn preset_names() -> &'static [(&'static str, &'static str)] {
    &[
        (
            "ou-mc",
            "brute-force Monte Carlo on OU position, K=10 x N=300, cost 3e3",
        ),
        (
            "ou-gev",
            "GEV block-maxima fits on the same OU trajectory budget, cost 3e3",
        ),
        (
            "ou-gpa-small",
            "genealogical ensemble on OU, N=100, tau=0.1, T_f=2, C={2,3,4}, K=10, cost 3e3",
        ),
        (
            "ou-gpa-c-sweep",
            "genealogical ensemble across C=1..10 at a=2, K=30 each, cost 3e4",
        ),
        (
            "ou-mean-re",
            "mean relative error of tilted estimates over a threshold ladder, cost 3e5",
        ),
        (
            "ou-re",
            "relative error at the matched threshold a=2 with C=4, K=100 x N=1000, cost 1e5",
        ),
        (
            "ou-re-mc",
            "Monte Carlo companion of ou-re at identical cost 1e5",
        ),
        (
            "ou-re-gev",
            "GEV companion of ou-re at identical cost 1e5",
        ),
        (
            "ou-gklt",
            "time-average importance sampling on OU, per-trajectory-max curves, cost 4e4",
        ),
        (
            "ou-gklt-b",
            "time-average importance sampling, fixed-threshold estimates, cost 4e4",
        ),
        (
            "series-gklt",
            "time-average run with window equal to the resample interval, cost 1e4",
        ),
        (
            "ou-control",
            "long OU control run, 1e6 blocks of length 2 with window maxima archived",
        ),
        (
            "l96-gpa",
            "genealogical ensemble on Lorenz '96 energy, N=2000, C={3.2e-3,6.4e-3}, cost 4e4",
        ),
        (
            "l96-gpa-large",
            "Lorenz '96 ensemble at N=5000, cost 1e5",
        ),
        (
            "l96-control-small",
            "short Lorenz '96 energy control run, 2000 blocks",
        ),
    ]
}

/// Builds a named preset, or None for an unknown name.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    match name {
        "ou-mc" => {
            cfg.run.method = Method::Mc;
            cfg.run.experiments = 10;
            cfg.run.particles = 300;
            cfg.run.final_time = 2.0;
            cfg.run.thresholds = vec![1.0, 1.5, 2.0];
        }
        "ou-gev" => {
            cfg.run.method = Method::Gev;
            cfg.run.experiments = 10;
            cfg.run.particles = 300;
            cfg.run.final_time = 2.0;
            cfg.run.thresholds = vec![1.0, 1.5, 2.0];
            cfg.run.block_sizes = vec![10, 30];
        }
        "ou-gpa-small" => {
            cfg.run.method = Method::Gpa;
            cfg.run.experiments = 10;
            cfg.run.particles = 100;
            cfg.run.final_time = 2.0;
            cfg.run.resample_interval = 0.1;
            cfg.run.tilts = vec![2.0, 3.0, 4.0];
            cfg.run.thresholds = vec![1.0, 1.5, 2.0];
        }
        "ou-gpa-c-sweep" => {
            cfg.run.method = Method::Gpa;
            cfg.run.experiments = 30;
            cfg.run.particles = 100;
            cfg.run.final_time = 2.0;
            cfg.run.resample_interval = 0.1;
            cfg.run.tilts = (1..=10).map(f64::from).collect();
            cfg.run.thresholds = vec![2.0];
        }
        "ou-mean-re" => {
            cfg.run.method = Method::Gpa;
            cfg.run.experiments = 100;
            cfg.run.particles = 1000;
            cfg.run.final_time = 2.0;
            cfg.run.resample_interval = 0.1;
            cfg.run.tilts = vec![2.0, 3.0, 4.0];
            cfg.run.thresholds = (2..=14).map(|i| i as f64 * 0.25).collect();
        }
        "ou-re" => {
            cfg.run.method = Method::Gpa;
            cfg.run.experiments = 100;
            cfg.run.particles = 1000;
            cfg.run.final_time = 2.0;
            cfg.run.resample_interval = 0.1;
            cfg.run.tilts = vec![4.0];
            cfg.run.thresholds = vec![2.0, 3.5];
        }
        "ou-re-mc" => {
            cfg.run.method = Method::Mc;
            cfg.run.experiments = 100;
            cfg.run.particles = 1000;
            cfg.run.final_time = 2.0;
            cfg.run.thresholds = vec![2.0, 3.5];
        }
        "ou-re-gev" => {
            cfg.run.method = Method::Gev;
            cfg.run.experiments = 100;
            cfg.run.particles = 1000;
            cfg.run.final_time = 2.0;
            cfg.run.thresholds = vec![2.0, 3.5];
            cfg.run.block_sizes = vec![10, 50];
        }
        "ou-gklt" | "ou-gklt-b" | "series-gklt" => {
            cfg.run.method = Method::Gklt;
            cfg.run.particles = 100;
            cfg.run.final_time = 2.0;
            cfg.run.window = 0.25;
            match name {
                "ou-gklt" => {
                    cfg.run.experiments = 100;
                    cfg.run.resample_interval = 0.1;
                    cfg.run.tilts = vec![0.01, 0.03, 0.05, 0.07];
                    cfg.run.gklt_estimator = "per-trajectory-max".into();
                }
                "ou-gklt-b" => {
                    cfg.run.experiments = 100;
                    cfg.run.resample_interval = 0.1;
                    cfg.run.tilts = vec![0.01, 0.03, 0.05, 0.07];
                    cfg.run.gklt_estimator = "fixed-thresholds".into();
                    cfg.run.thresholds = vec![0.4, 0.5, 0.6, 0.7, 0.8];
                }
                _ => {
                    // Resampling on the averaging window itself: the
                    // degenerate tau = T case any archived series supports.
                    cfg.run.experiments = 50;
                    cfg.run.resample_interval = 0.25;
                    cfg.run.tilts = vec![0.05];
                    cfg.run.gklt_estimator = "per-trajectory-max".into();
                }
            }
        }
        "ou-control" => {
            cfg.run.method = Method::Control;
            cfg.run.budget = 1e6;
            cfg.run.final_time = 2.0;
            cfg.run.window = 0.25;
        }
        "l96-gpa" | "l96-gpa-large" => {
            cfg.system.kind = "lorenz96".into();
            cfg.system.dt = 1e-3;
            cfg.system.sites = 32;
            cfg.system.forcing = 64.0;
            cfg.system.clone_epsilon = 1e-3;
            cfg.run.method = Method::Gpa;
            cfg.run.observable = "energy".into();
            cfg.run.experiments = 10;
            cfg.run.particles = if name == "l96-gpa" { 2000 } else { 5000 };
            cfg.run.final_time = 1.28;
            cfg.run.resample_interval = 0.08;
            cfg.run.tilts = vec![3.2e-3, 6.4e-3];
        }
        "l96-control-small" => {
            cfg.system.kind = "lorenz96".into();
            cfg.system.dt = 1e-3;
            cfg.system.sites = 32;
            cfg.system.forcing = 64.0;
            cfg.run.method = Method::Control;
            cfg.run.observable = "energy".into();
            cfg.run.budget = 2000.0;
            cfg.run.final_time = 1.28;
        }
        _ => return None,
    }
    Some(cfg)
}
