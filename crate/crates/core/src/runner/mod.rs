//! Experiment orchestration: configuration, training, ablations, sweeps,
//! the tau/lambda grid, feature dumps and report emission.

pub mod config;
pub mod experiments;
pub mod train;

use std::fs;

use crate::error::{Error, Result};
use crate::localization::per_class_report;
use crate::net::{checkpoint, ClassifierState};

pub use config::{ablation_flags, Clustering, ExperimentConfig, SweepMode, TrainSettings, ABLATION_ROWS};
pub use experiments::{
    ablate, ablate_rows, dump_features, grid_tau_lambda, sweep_ood_count,
    sweep_ood_count_with_baseline, write_report, AblationRow,
    AblationTable, FeatureRow, GridCell, GridResult, SweepPoint, SweepResult,
};
pub use train::{
    evaluate_state, refresh_clusters, train_run, Dataset, EpochLog, EvalSample, RunData, RunReport,
    Sample, SeedLog,
};

/// Trains with `cfg` and writes `model.wtsr` and `report.{json,txt}` to the
/// output directory.
pub fn train(cfg: &ExperimentConfig) -> Result<(ClassifierState, RunReport)> {
    cfg.validate()?;
    if cfg.train.flags.uses_ood() && cfg.ood_manifest.is_none() {
        return Err(Error::Config(
            "OoD loss terms are enabled but `ood_manifest` is not set".into(),
        ));
    }
    let data = Dataset::load(cfg)?;
    let (state, report) = train_run(&data.view(), &cfg.train, "train")?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    checkpoint::save_classifier(&state, cfg.out_dir.join("model.wtsr"))?;
    write_report(&cfg.out_dir, "report", &report, &run_summary(&report))?;
    Ok((state, report))
}

/// Aligned-text summary of one run.
pub fn run_summary(r: &RunReport) -> String {
    use std::fmt::Write as _;
    let mut out = format!(
        "{}: {} in-distribution, {} OoD images, seed {}\n",
        r.label, r.n_in, r.n_ood, r.seeds.root
    );
    out.push_str("epoch      total     cls_in    cls_ood  d_attract    d_repel\n");
    for e in &r.epochs {
        let l = &e.loss;
        let _ = writeln!(
            out,
            "{:>5}  {:9.5}  {:9.5}  {:9.5}  {:9.4}  {:9.4}",
            e.epoch, l.total, l.cls_in, l.cls_ood, l.d_attract, l.d_repel
        );
    }
    if let Some(m) = &r.metrics {
        let _ = writeln!(
            out,
            "mIoU {:.1}  precision {:.1}  recall {:.1}  F1 {:.1}",
            100.0 * m.miou,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1
        );
        for c in &m.classes {
            let iou = c.iou.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(out, "  {:<12} {iou:>6}", c.name);
        }
    }
    out
}

/// Per-class comparison of two runs' metrics, as text.
pub fn compare_runs(baseline: &RunReport, method: &RunReport) -> Result<String> {
    let (Some(b), Some(m)) = (&baseline.metrics, &method.metrics) else {
        return Err(Error::InvalidArgument("both runs need evaluation metrics".into()));
    };
    Ok(per_class_report(b, m)?.to_text())
}
