use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn retime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retime"))
        .args(args)
        .output()
        .expect("spawn retime")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const TINY_MC: &str = "\
seed = 7

[system]
kind = \"ou\"
dt = 0.01
lambda = 1.0
sigma = 1.0

[run]
method = \"mc\"
observable = \"position\"
experiments = 2
particles = 50
final_time = 0.5
thresholds = [0.5, 1.0]
curve_grid = 16
max_return_period = 1e6
";

const TINY_GPA: &str = "\
seed = 7

[system]
kind = \"ou\"
dt = 0.01
lambda = 1.0
sigma = 1.0

[run]
method = \"gpa\"
observable = \"position\"
experiments = 3
particles = 32
final_time = 0.5
resample_interval = 0.1
tilts = [1.0, 2.0]
thresholds = [0.5, 1.0]
curve_grid = 16
max_return_period = 1e6
";

#[test]
fn preset_list_names_every_preset() {
    let out = retime(&["preset", "list"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for name in [
        "ou-mc",
        "ou-gev",
        "ou-gpa-small",
        "ou-gklt",
        "ou-control",
        "l96-gpa",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
}

#[test]
fn preset_show_round_trips_as_config() {
    let out = retime(&["preset", "show", "ou-mc"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("method = \"mc\""), "{text}");

    // The printed TOML is itself a runnable config.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "shown.toml", &text);
    let out_dir = dir.path().join("bundle");
    let probe = retime(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--budget",
        "100",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&probe), 0, "{}", stderr(&probe));

    let missing = retime(&["preset", "show", "no-such-preset"]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("unknown preset"));
}

#[test]
fn run_writes_a_complete_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "mc.toml", TINY_MC);
    let out_dir = dir.path().join("bundle");
    let out = retime(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("method mc"), "{text}");
    assert!(text.contains("wrote "), "{text}");
    for file in [
        "curve.csv",
        "estimates.csv",
        "cost.csv",
        "summary.json",
        "config.toml",
    ] {
        assert!(out_dir.join(file).is_file(), "missing {file}");
    }
    let curve = fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("label,provenance,tilt,threshold,probability"));
}

#[test]
fn run_rejects_a_control_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(
        dir.path(),
        "ctl.toml",
        &TINY_MC.replace("method = \"mc\"", "method = \"control\""),
    );
    let out = retime(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("retime control"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_two() {
    let unknown = retime(&["run", "--preset", "no-such-preset"]);
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("unknown preset"));

    // Neither --preset nor --config is a usage error.
    let neither = retime(&["run"]);
    assert_eq!(code(&neither), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = write_file(dir.path(), "bad.toml", "seed = \"not a number\"\n");
    let parse = retime(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&parse), 2);

    let negative = write_file(
        dir.path(),
        "neg.toml",
        &TINY_MC.replace("experiments = 2", "experiments = 0"),
    );
    let validate = retime(&["run", "--config", negative.to_str().unwrap()]);
    assert_eq!(code(&validate), 2);
}

#[test]
fn method_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(
        dir.path(),
        "overflow.toml",
        &TINY_GPA.replace("tilts = [1.0, 2.0]", "tilts = [1e6]"),
    );
    let out = retime(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let text = stderr(&out);
    assert!(text.contains("weight overflow"), "{text}");
}

#[test]
fn reruns_are_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "gpa.toml", TINY_GPA);
    let mut bundles = Vec::new();
    for workers in ["1", "3"] {
        let out_dir = dir.path().join(format!("w{workers}"));
        let out = retime(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--workers",
            workers,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        bundles.push(out_dir);
    }
    for file in ["curve.csv", "estimates.csv", "cost.csv"] {
        let a = fs::read(bundles[0].join(file)).unwrap();
        let b = fs::read(bundles[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between worker counts");
    }
}

#[test]
fn seed_flag_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "mc.toml", TINY_MC);
    let mut curves = Vec::new();
    for seed in ["7", "8"] {
        let out_dir = dir.path().join(format!("s{seed}"));
        let out = retime(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        curves.push(fs::read(out_dir.join("curve.csv")).unwrap());
    }
    assert_ne!(curves[0], curves[1]);
}

#[test]
fn compare_checks_cost_parity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "mc.toml", TINY_MC);
    let small = dir.path().join("small");
    let big = dir.path().join("big");
    let run_small = retime(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        small.to_str().unwrap(),
    ]);
    assert_eq!(code(&run_small), 0, "{}", stderr(&run_small));
    let doubled = write_file(
        dir.path(),
        "mc2.toml",
        &TINY_MC.replace("particles = 50", "particles = 100"),
    );
    let run_big = retime(&[
        "run",
        "--config",
        doubled.to_str().unwrap(),
        "--out",
        big.to_str().unwrap(),
    ]);
    assert_eq!(code(&run_big), 0, "{}", stderr(&run_big));

    // A bundle against itself: equal cost, zero deviation.
    let same = retime(&[
        "compare",
        small.to_str().unwrap(),
        small.to_str().unwrap(),
    ]);
    assert_eq!(code(&same), 0, "{}", stderr(&same));
    assert!(stdout(&same).contains("compared 2 bundles"));

    // Twice the samples is outside the 5% cost window.
    let uneven = retime(&[
        "compare",
        small.to_str().unwrap(),
        big.to_str().unwrap(),
    ]);
    assert_eq!(code(&uneven), 2, "{}", stderr(&uneven));
    assert!(stderr(&uneven).contains("cost"), "{}", stderr(&uneven));

    // Fewer than two bundles is a usage error.
    let lone = retime(&["compare", small.to_str().unwrap()]);
    assert_eq!(code(&lone), 2);
}

#[test]
fn fit_gev_recovers_a_gumbel_sample() {
    let dir = tempfile::tempdir().unwrap();
    // Stratified Gumbel quantiles: x_k = -ln(-ln u_k).
    let n = 2000;
    let mut body = String::from("# synthetic gumbel maxima\nvalue\n");
    for k in 0..n {
        let u = (k as f64 + 0.5) / n as f64;
        body.push_str(&format!("{}\n", -(-(u.ln())).ln()));
    }
    let sample = write_file(dir.path(), "maxima.txt", &body);
    let fit_path = dir.path().join("fit.json");
    let out = retime(&[
        "fit-gev",
        sample.to_str().unwrap(),
        "--out",
        fit_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("zeta"));
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fit_path).unwrap()).unwrap();
    let mu = fit["params"]["mu"].as_f64().unwrap();
    let sigma = fit["params"]["sigma"].as_f64().unwrap();
    let zeta = fit["params"]["zeta"].as_f64().unwrap();
    assert!(mu.abs() < 0.05, "mu {mu}");
    assert!((sigma - 1.0).abs() < 0.05, "sigma {sigma}");
    assert!(zeta.abs() < 0.05, "zeta {zeta}");

    // Ranked pairs are curve input, not maxima.
    let pairs = write_file(dir.path(), "pairs.csv", "1.0,0.5\n2.0,0.25\n");
    let rejected = retime(&["fit-gev", pairs.to_str().unwrap()]);
    assert_eq!(code(&rejected), 2);
    assert!(stderr(&rejected).contains("one value per line"));
}

#[test]
fn fit_gev_blocks_a_series_before_fitting() {
    let dir = tempfile::tempdir().unwrap();
    let n = 3000;
    let mut body = String::new();
    for k in 0..n {
        let u = (k as f64 + 0.5) / n as f64;
        body.push_str(&format!("{}\n", -(-(u.ln())).ln()));
    }
    let series = write_file(dir.path(), "series.txt", &body);
    let out = retime(&[
        "fit-gev",
        series.to_str().unwrap(),
        "--block-size",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("300 maxima of block size 10"), "{text}");
}

#[test]
fn curve_builds_from_pairs_and_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs_body = String::from("threshold,mass\n");
    for k in 1..=100 {
        pairs_body.push_str(&format!("{},0.01\n", k as f64 / 10.0));
    }
    let pairs = write_file(dir.path(), "pairs.csv", &pairs_body);
    let pairs_out = dir.path().join("pairs_curve.csv");
    let out = retime(&[
        "curve",
        pairs.to_str().unwrap(),
        "--out",
        pairs_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = fs::read_to_string(&pairs_out).unwrap();
    // Top rank carries mass 0.01: r = -1/ln(0.99).
    assert!(rows.contains("99.49916247342216"), "{rows}");

    let series = write_file(dir.path(), "series.txt", "0.1\n0.9\n0.2\n0.8\n0.3\n0.7\n");
    let bare = retime(&["curve", series.to_str().unwrap()]);
    assert_eq!(code(&bare), 2);
    assert!(stderr(&bare).contains("--delta-t"), "{}", stderr(&bare));

    let series_out = dir.path().join("series_curve.csv");
    let blocked = retime(&[
        "curve",
        series.to_str().unwrap(),
        "--delta-t",
        "2.0",
        "--sample-dt",
        "1.0",
        "--provenance",
        "control",
        "--out",
        series_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&blocked), 0, "{}", stderr(&blocked));
    assert!(series_out.is_file());

    let bad_prov = retime(&[
        "curve",
        pairs.to_str().unwrap(),
        "--provenance",
        "astrology",
    ]);
    assert_eq!(code(&bad_prov), 2);
}

#[test]
fn budget_override_scales_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "mc.toml", TINY_MC);
    let out_dir = dir.path().join("bundle");
    let out = retime(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--budget",
        "100",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    let cost = summary["total_cost"].as_f64().unwrap();
    assert!(cost <= 100.0 + 1e-9, "cost {cost}");
}
