//! Result persistence: plot-ready CSV for curves, estimates and ledgers,
//! JSON for fits and diagnostics, and readers that rebuild bundles for
//! offline comparison. Writers emit rows in a fixed order so identical
//! results produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::returns::{CurvePoint, Provenance, ReturnCurve, TiltedFilter};

use super::{
    ComparisonReport, ControlResult, CostEntry, CostLedger, EstimateRow, ExperimentConfig,
    ExperimentFailure, GevFitRecord, Method, ResultBundle, StageCurve,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const CURVE_FILE: &str = "curve.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const COST_FILE: &str = "cost.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FITS_FILE: &str = "fits.json";
pub const ANCESTRY_FILE: &str = "ancestry.csv";
pub const CONTROL_CURVE_FILE: &str = "control_curve.csv";
pub const CONTROL_SUMMARY_FILE: &str = "control_summary.json";
pub const CONTROL_ARCHIVE_FILE: &str = "control_archive.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const REL_ERR_FILE: &str = "rel_err.csv";
pub const COMPARISON_SUMMARY_FILE: &str = "comparison_summary.json";

#[derive(Serialize, Deserialize)]
struct CurveRow {
    label: String,
    provenance: Provenance,
    tilt: Option<f64>,
    threshold: f64,
    probability: f64,
    return_time: f64,
    band_lo: f64,
    band_hi: f64,
    n_experiments: usize,
}

#[derive(Serialize, Deserialize)]
struct AncestryRow {
    tilt: f64,
    experiment: usize,
    epoch: usize,
    child: usize,
    parent: u32,
    raw_weight: f64,
    normalizer: f64,
}

#[derive(Serialize, Deserialize)]
struct ArchiveRow {
    block: usize,
    end_value: f64,
    window_max: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RelErrCsvRow {
    method: String,
    threshold: f64,
    reference_gamma: f64,
    rel_err: f64,
    mean_dev: f64,
    experiments: usize,
}

/// Headline diagnostics persisted alongside the tables.
#[derive(Serialize, Deserialize)]
pub struct BundleSummary {
    pub method: Method,
    pub observable: String,
    pub seed: u64,
    pub total_cost: f64,
    pub curve_points: usize,
    pub dropped_points: usize,
    pub omitted_thresholds: usize,
    pub failures: Vec<ExperimentFailure>,
    pub mass_totals: Vec<f64>,
    pub min_unique_roots: Option<usize>,
    pub filter: Option<TiltedFilter>,
}

#[derive(Serialize, Deserialize)]
struct ControlSummary {
    observable: String,
    delta_t: f64,
    blocks: usize,
    window: f64,
    trend_p_value: f64,
    total_cost: f64,
}

/// Writes labeled curves as one CSV in the same row schema the batch and
/// control writers use.
pub fn write_curve_csv(curves: &[(&str, &ReturnCurve)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (label, curve) in curves {
        write_curve_rows(&mut w, label, curve)?;
    }
    w.flush()?;
    Ok(())
}

fn write_curve_rows(
    writer: &mut csv::Writer<fs::File>,
    label: &str,
    curve: &ReturnCurve,
) -> Result<()> {
    for pt in &curve.points {
        writer.serialize(CurveRow {
            label: label.into(),
            provenance: curve.provenance,
            tilt: curve.tilt,
            threshold: pt.threshold,
            probability: pt.probability,
            return_time: pt.return_time,
            band_lo: pt.band_lo,
            band_hi: pt.band_hi,
            n_experiments: pt.n_experiments,
        })?;
    }
    Ok(())
}

/// Writes every output a batch produced into `dir`.
pub fn write_bundle(bundle: &ResultBundle, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;

    let mut w = csv::Writer::from_path(dir.join(CURVE_FILE))?;
    write_curve_rows(&mut w, "combined", &bundle.curve)?;
    for stage in &bundle.stage_curves {
        write_curve_rows(&mut w, &stage.label, &stage.curve)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(ESTIMATES_FILE))?;
    for row in &bundle.estimates {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(COST_FILE))?;
    for entry in &bundle.ledger.entries {
        w.serialize(entry)?;
    }
    w.flush()?;

    let summary = BundleSummary {
        method: bundle.method,
        observable: bundle.observable.clone(),
        seed: bundle.seed,
        total_cost: bundle.ledger.total(),
        curve_points: bundle.curve.points.len(),
        dropped_points: bundle.curve.dropped_points,
        omitted_thresholds: bundle.curve.omitted_thresholds,
        failures: bundle.failures.clone(),
        mass_totals: bundle.mass_totals.clone(),
        min_unique_roots: bundle.min_unique_roots,
        filter: bundle.filter.clone(),
    };
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;

    if !bundle.gev_fits.is_empty() {
        fs::write(
            dir.join(FITS_FILE),
            serde_json::to_string_pretty(&bundle.gev_fits)?,
        )?;
    }

    if !bundle.ancestry.is_empty() {
        let mut w = csv::Writer::from_path(dir.join(ANCESTRY_FILE))?;
        for rec in &bundle.ancestry {
            for (epoch, parents) in rec.parents.parents.iter().enumerate() {
                let weights = &rec.weights.epochs[epoch];
                for (child, &parent) in parents.iter().enumerate() {
                    w.serialize(AncestryRow {
                        tilt: rec.tilt,
                        experiment: rec.experiment,
                        epoch,
                        child,
                        parent,
                        raw_weight: weights.raw[parent as usize],
                        normalizer: weights.normalizer,
                    })?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn read_curves_grouped(path: &Path) -> Result<Vec<(String, ReturnCurve)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut groups: Vec<(String, ReturnCurve)> = Vec::new();
    for row in reader.deserialize() {
        let row: CurveRow = row?;
        let point = CurvePoint {
            threshold: row.threshold,
            probability: row.probability,
            return_time: row.return_time,
            band_lo: row.band_lo,
            band_hi: row.band_hi,
            n_experiments: row.n_experiments,
        };
        match groups.last_mut() {
            Some((label, curve)) if *label == row.label => curve.points.push(point),
            _ => groups.push((
                row.label,
                ReturnCurve {
                    provenance: row.provenance,
                    tilt: row.tilt,
                    points: vec![point],
                    dropped_points: 0,
                    omitted_thresholds: 0,
                },
            )),
        }
    }
    if groups.is_empty() {
        return Err(Error::Persist(format!(
            "{} holds no curve rows",
            path.display()
        )));
    }
    Ok(groups)
}

/// Rebuilds a bundle from a written directory. Per-experiment curves and
/// ancestry tables are not reloaded; everything a comparison needs is.
pub fn read_bundle(dir: &Path) -> Result<(ExperimentConfig, ResultBundle)> {
    let config = ExperimentConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let summary: BundleSummary =
        serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;

    let mut groups = read_curves_grouped(&dir.join(CURVE_FILE))?;
    if groups[0].0 != "combined" {
        return Err(Error::Persist(
            "curve file does not start with the combined curve".into(),
        ));
    }
    let mut curve = groups.remove(0).1;
    curve.dropped_points = summary.dropped_points;
    curve.omitted_thresholds = summary.omitted_thresholds;
    let stage_curves = groups
        .into_iter()
        .map(|(label, curve)| StageCurve { label, curve })
        .collect();

    let mut estimates = Vec::new();
    let mut reader = csv::Reader::from_path(dir.join(ESTIMATES_FILE))?;
    for row in reader.deserialize() {
        let row: EstimateRow = row?;
        estimates.push(row);
    }

    let mut ledger = CostLedger::default();
    let mut reader = csv::Reader::from_path(dir.join(COST_FILE))?;
    for row in reader.deserialize() {
        let row: CostEntry = row?;
        ledger.entries.push(row);
    }

    let fits_path = dir.join(FITS_FILE);
    let gev_fits: Vec<GevFitRecord> = if fits_path.exists() {
        serde_json::from_str(&fs::read_to_string(fits_path)?)?
    } else {
        Vec::new()
    };

    Ok((
        config,
        ResultBundle {
            method: summary.method,
            observable: summary.observable,
            seed: summary.seed,
            curve,
            stage_curves,
            experiment_curves: Vec::new(),
            filter: summary.filter,
            estimates,
            gev_fits,
            ledger,
            failures: summary.failures,
            mass_totals: summary.mass_totals,
            min_unique_roots: summary.min_unique_roots,
            ancestry: Vec::new(),
        },
    ))
}

/// Writes a control run; `include_archive` adds the raw per-block table so
/// later sessions can reuse the run as a probability oracle.
pub fn write_control(
    control: &ControlResult,
    config: &ExperimentConfig,
    dir: &Path,
    include_archive: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;

    let mut w = csv::Writer::from_path(dir.join(CONTROL_CURVE_FILE))?;
    write_curve_rows(&mut w, "combined", &control.curve)?;
    for (i, seg) in control.segment_curves.iter().enumerate() {
        write_curve_rows(&mut w, &format!("segment{i}"), seg)?;
    }
    if let Some(wc) = &control.window_curve {
        write_curve_rows(&mut w, "window", wc)?;
        for (i, seg) in control.window_segment_curves.iter().enumerate() {
            write_curve_rows(&mut w, &format!("window-segment{i}"), seg)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(COST_FILE))?;
    for entry in &control.ledger.entries {
        w.serialize(entry)?;
    }
    w.flush()?;

    fs::write(
        dir.join(CONTROL_SUMMARY_FILE),
        serde_json::to_string_pretty(&ControlSummary {
            observable: control.observable.clone(),
            delta_t: control.delta_t,
            blocks: control.blocks,
            window: control.window,
            trend_p_value: control.trend_p_value,
            total_cost: control.ledger.total(),
        })?,
    )?;

    if include_archive {
        let mut w = csv::Writer::from_path(dir.join(CONTROL_ARCHIVE_FILE))?;
        for (b, &end_value) in control.end_samples.iter().enumerate() {
            w.serialize(ArchiveRow {
                block: b,
                end_value,
                window_max: control.window_maxima.get(b).copied(),
            })?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Rebuilds a control run from a written directory. Without the archive the
/// curves and band checks still work, but probability references for
/// relative-error scoring are unavailable.
pub fn read_control(dir: &Path) -> Result<ControlResult> {
    let summary: ControlSummary =
        serde_json::from_str(&fs::read_to_string(dir.join(CONTROL_SUMMARY_FILE))?)?;
    let groups = read_curves_grouped(&dir.join(CONTROL_CURVE_FILE))?;

    let mut curve = None;
    let mut segment_curves = Vec::new();
    let mut window_curve = None;
    let mut window_segment_curves = Vec::new();
    for (label, c) in groups {
        if label == "combined" {
            curve = Some(c);
        } else if label == "window" {
            window_curve = Some(c);
        } else if label.starts_with("window-segment") {
            window_segment_curves.push(c);
        } else if label.starts_with("segment") {
            segment_curves.push(c);
        } else {
            return Err(Error::Persist(format!("unknown curve label \"{label}\"")));
        }
    }
    let curve = curve.ok_or_else(|| Error::Persist("control curve missing".into()))?;

    let mut ledger = CostLedger::default();
    let mut reader = csv::Reader::from_path(dir.join(COST_FILE))?;
    for row in reader.deserialize() {
        let row: CostEntry = row?;
        ledger.entries.push(row);
    }

    let mut end_samples = Vec::new();
    let mut window_maxima = Vec::new();
    let archive = dir.join(CONTROL_ARCHIVE_FILE);
    if archive.exists() {
        let mut reader = csv::Reader::from_path(archive)?;
        for row in reader.deserialize() {
            let row: ArchiveRow = row?;
            end_samples.push(row.end_value);
            if let Some(wm) = row.window_max {
                window_maxima.push(wm);
            }
        }
    }

    Ok(ControlResult {
        observable: summary.observable,
        delta_t: summary.delta_t,
        blocks: summary.blocks,
        window: summary.window,
        curve,
        segment_curves,
        window_curve,
        window_segment_curves,
        trend_p_value: summary.trend_p_value,
        ledger,
        end_samples,
        window_maxima,
    })
}

/// Writes a cross-method comparison report.
pub fn write_comparison(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(COMPARISON_FILE))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(REL_ERR_FILE))?;
    for rep in &report.rel_err {
        for row in &rep.rows {
            w.serialize(RelErrCsvRow {
                method: rep.method.clone(),
                threshold: row.threshold,
                reference_gamma: row.reference_gamma,
                rel_err: row.rel_err,
                mean_dev: row.mean_dev,
                experiments: row.experiments,
            })?;
        }
    }
    w.flush()?;

    #[derive(Serialize)]
    struct ComparisonSummary<'a> {
        costs: &'a [CostEntry],
        cost_reference: f64,
        max_resolved: &'a [(String, f64)],
        band_containment: &'a [(String, f64)],
    }
    fs::write(
        dir.join(COMPARISON_SUMMARY_FILE),
        serde_json::to_string_pretty(&ComparisonSummary {
            costs: &report.costs,
            cost_reference: report.cost_reference,
            max_resolved: &report.max_resolved,
            band_containment: &report.band_containment,
        })?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_control, run_experiment, Method};

    fn tiny_gpa_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            seed: 21,
            ..ExperimentConfig::default()
        };
        cfg.run.method = Method::Gpa;
        cfg.run.experiments = 2;
        cfg.run.particles = 30;
        cfg.run.final_time = 0.5;
        cfg.run.resample_interval = 0.25;
        cfg.run.tilts = vec![1.0];
        cfg.run.thresholds = vec![0.5];
        cfg.run.filter_std_window = 0.0;
        cfg.run.persist_ancestry = true;
        cfg
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let cfg = tiny_gpa_config();
        let bundle = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle, &cfg, dir.path()).unwrap();
        let (cfg_back, back) = read_bundle(dir.path()).unwrap();
        assert_eq!(cfg_back, cfg);
        assert_eq!(back.method, bundle.method);
        assert_eq!(back.observable, bundle.observable);
        assert_eq!(back.curve.points, bundle.curve.points);
        assert_eq!(back.curve.dropped_points, bundle.curve.dropped_points);
        assert_eq!(back.estimates, bundle.estimates);
        assert_eq!(back.ledger, bundle.ledger);
        assert_eq!(back.mass_totals, bundle.mass_totals);
        assert_eq!(back.stage_curves.len(), bundle.stage_curves.len());
        assert!(dir.path().join(ANCESTRY_FILE).exists());
    }

    #[test]
    fn rewriting_identical_results_is_byte_identical() {
        let cfg = tiny_gpa_config();
        let bundle = run_experiment(&cfg).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_bundle(&bundle, &cfg, d1.path()).unwrap();
        write_bundle(&bundle, &cfg, d2.path()).unwrap();
        for name in [CONFIG_FILE, CURVE_FILE, ESTIMATES_FILE, COST_FILE, SUMMARY_FILE] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical writes");
        }
    }

    #[test]
    fn control_round_trips_with_archive() {
        let mut cfg = ExperimentConfig {
            seed: 4,
            ..ExperimentConfig::default()
        };
        cfg.run.method = Method::Control;
        cfg.run.budget = 100.0;
        cfg.run.final_time = 0.5;
        cfg.run.window = 0.25;
        let control = run_control(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_control(&control, &cfg, dir.path(), true).unwrap();
        let back = read_control(dir.path()).unwrap();
        assert_eq!(back.blocks, control.blocks);
        assert_eq!(back.curve.points, control.curve.points);
        assert_eq!(back.segment_curves.len(), control.segment_curves.len());
        assert_eq!(back.end_samples, control.end_samples);
        assert_eq!(back.window_maxima, control.window_maxima);
        assert_eq!(back.trend_p_value, control.trend_p_value);

        // Without the archive the curves still load.
        let dir2 = tempfile::tempdir().unwrap();
        write_control(&control, &cfg, dir2.path(), false).unwrap();
        let bare = read_control(dir2.path()).unwrap();
        assert!(bare.end_samples.is_empty());
        assert_eq!(bare.curve.points, control.curve.points);
        assert!(bare.tail_reference(0.0).is_none());
    }
}
