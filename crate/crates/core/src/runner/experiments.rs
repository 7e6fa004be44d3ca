//! Ablations, data-quantity sweeps, the tau/lambda grid and feature dumps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::load_gray;
use crate::loss::LossFlags;
use crate::manifest::{resolve, Manifest, Split};
use crate::net::ClassifierState;
use crate::rng::{derive_seed, Rng, Stream};
use crate::stats::{median, spearman, variance, Quantiles};

use super::config::{ExperimentConfig, SweepMode, TrainSettings, ABLATION_ROWS};
use super::train::{argmax, train_run, Dataset, RunData, RunReport, Sample};

fn check(flag: bool) -> &'static str {
    if flag {
        "x"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub flags: LossFlags,
    /// One report per repeat, seeds `rng_seed`, `rng_seed + 1`, ...
    pub runs: Vec<RunReport>,
    pub median_miou: f64,
    pub median_precision: f64,
    pub median_recall: f64,
    pub median_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("         L_cls        L_d\n");
        out.push_str("row   D_in D_ood  D_in D_ood    mIoU   Prec.  Recall      F1\n");
        for r in &self.rows {
            let f = r.flags;
            let _ = writeln!(
                out,
                "({})  {:^4} {:^5}  {:^4} {:^5}  {:6.1}  {:6.1}  {:6.1}  {:6.1}",
                r.row,
                check(f.cls_on_in),
                check(f.cls_on_ood),
                check(f.d_on_in),
                check(f.d_on_ood),
                100.0 * r.median_miou,
                100.0 * r.median_precision,
                100.0 * r.median_recall,
                100.0 * r.median_f1,
            );
        }
        out
    }
}

fn metric_medians(runs: &[RunReport]) -> [f64; 4] {
    let pick = |f: &dyn Fn(&RunReport) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    [
        pick(&|r| r.miou()),
        pick(&|r| r.precision()),
        pick(&|r| r.metrics.as_ref().map_or(0.0, |m| m.recall)),
        pick(&|r| r.metrics.as_ref().map_or(0.0, |m| m.f1)),
    ]
}

/// Runs every row of the loss ablation `repeats` times on the same data.
pub fn ablate(data: &Dataset, cfg: &ExperimentConfig) -> Result<AblationTable> {
    ablate_rows(data, cfg, &ABLATION_ROWS.iter().map(|(r, _)| *r).collect::<Vec<_>>())
}

/// Like [`ablate`] but restricted to the named rows.
pub fn ablate_rows(data: &Dataset, cfg: &ExperimentConfig, rows: &[&str]) -> Result<AblationTable> {
    let view = data.view();
    let mut out = Vec::with_capacity(rows.len());
    for &(name, flags) in ABLATION_ROWS.iter().filter(|(r, _)| rows.contains(r)) {
        let mut runs = Vec::with_capacity(cfg.repeats);
        for rep in 0..cfg.repeats {
            let settings = TrainSettings {
                flags,
                rng_seed: cfg.train.rng_seed + rep as u64,
                ..cfg.train.clone()
            };
            let (_, report) = train_run(&view, &settings, &format!("({name}) seed {}", settings.rng_seed))?;
            runs.push(report);
        }
        let [miou, precision, recall, f1] = metric_medians(&runs);
        out.push(AblationRow {
            row: name.to_string(),
            flags,
            runs,
            median_miou: miou,
            median_precision: precision,
            median_recall: recall,
            median_f1: f1,
        });
    }
    Ok(AblationTable { rows: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// OoD count, or in-distribution count in `in_dist` mode.
    pub n: usize,
    pub miou: Vec<f64>,
    pub precision: Vec<f64>,
    pub quantiles: Quantiles,
    pub variance: f64,
    pub subset_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: SweepMode,
    /// mIoU of the baseline run (classification on in-distribution data only).
    pub baseline_miou: f64,
    pub points: Vec<SweepPoint>,
    /// Rank correlation between the swept count and the per-point variance.
    pub variance_trend: f64,
}

impl SweepResult {
    pub fn point(&self, n: usize) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.n == n)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mode {:?}, baseline mIoU {:.1}, variance trend {:+.3}\n",
            self.mode,
            100.0 * self.baseline_miou,
            self.variance_trend
        );
        out.push_str("    n     min      q1  median      q3     max   variance\n");
        for p in &self.points {
            let q = &p.quantiles;
            let _ = writeln!(
                out,
                "{:>5}  {:6.1}  {:6.1}  {:6.1}  {:6.1}  {:6.1}  {:9.3e}",
                p.n,
                100.0 * q.min,
                100.0 * q.q1,
                100.0 * q.median,
                100.0 * q.q3,
                100.0 * q.max,
                p.variance
            );
        }
        out
    }
}

/// Sorted random subset of `0..pool` of size `n`.
fn subset(pool: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, pool, n).into_vec();
    idx.sort_unstable();
    idx
}

fn pick<'a>(all: &[&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| all[i]).collect()
}

/// Trains `repeats` runs per requested data quantity, each on a fresh random
/// subset, and summarizes the mIoU spread per point.
pub fn sweep_ood_count(data: &Dataset, cfg: &ExperimentConfig) -> Result<SweepResult> {
    sweep_ood_count_with_baseline(data, cfg, None)
}

/// [`sweep_ood_count`] reusing an already trained baseline run with the same
/// settings and seed.
pub fn sweep_ood_count_with_baseline(
    data: &Dataset,
    cfg: &ExperimentConfig,
    baseline: Option<&RunReport>,
) -> Result<SweepResult> {
    let view = data.view();
    let mode = cfg.sweep_mode;
    let counts = match mode {
        SweepMode::Ood | SweepMode::Budget => &cfg.sweep_ood,
        SweepMode::InDist => &cfg.sweep_in,
    };
    if counts.is_empty() {
        return Err(Error::Config("sweep list is empty".into()));
    }
    for &n in counts {
        let (pool, what) = match mode {
            SweepMode::Ood | SweepMode::Budget => (view.ood.len(), "hard-OoD"),
            SweepMode::InDist => (view.train_in.len(), "in-distribution"),
        };
        if n > pool {
            return Err(Error::InvalidArgument(format!(
                "requested {n} {what} images but only {pool} are available"
            )));
        }
        if mode == SweepMode::Budget && n >= view.train_in.len() {
            return Err(Error::InvalidArgument(format!(
                "budget sweep cannot replace {n} of {} in-distribution images",
                view.train_in.len()
            )));
        }
    }

    let baseline_settings = TrainSettings {
        flags: LossFlags::BASELINE,
        ..cfg.train.clone()
    };
    let baseline = match baseline {
        Some(r) => r.clone(),
        None => train_run(&view, &baseline_settings, "baseline")?.1,
    };
    let all_in: Vec<usize> = (0..view.train_in.len()).collect();
    let all_ood: Vec<usize> = (0..view.ood.len()).collect();

    // Runs are pure functions of their data, so repeats that draw the same
    // subset share one run.
    let mut cache: HashMap<(Vec<usize>, Vec<usize>), RunReport> = HashMap::new();
    let mut points = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut miou = Vec::with_capacity(cfg.repeats);
        let mut precision = Vec::with_capacity(cfg.repeats);
        let mut seeds = Vec::with_capacity(cfg.repeats);
        for rep in 0..cfg.repeats {
            let seed = derive_seed(cfg.train.rng_seed, Stream::Subset, ((n as u64) << 20) | rep as u64);
            seeds.push(seed);
            let (in_idx, ood_idx) = match mode {
                SweepMode::Ood => (all_in.clone(), subset(view.ood.len(), n, seed)),
                SweepMode::Budget => (
                    subset(view.train_in.len(), view.train_in.len() - n, seed ^ 1),
                    subset(view.ood.len(), n, seed),
                ),
                SweepMode::InDist => (subset(view.train_in.len(), n, seed), all_ood.clone()),
            };
            let key = (in_idx, ood_idx);
            let report = if key.0 == all_in && key.1.is_empty() {
                baseline.clone()
            } else if let Some(r) = cache.get(&key) {
                r.clone()
            } else {
                let run = RunData {
                    train_in: pick(&view.train_in, &key.0),
                    ood: pick(&view.ood, &key.1),
                    ..view.clone()
                };
                let mut settings = cfg.train.clone();
                if run.ood.is_empty() {
                    settings.flags = LossFlags::BASELINE;
                }
                let r = train_run(&run, &settings, &format!("n={n} repeat {rep}"))?.1;
                cache.insert(key, r.clone());
                r
            };
            miou.push(report.miou());
            precision.push(report.precision());
        }
        points.push(SweepPoint {
            n,
            quantiles: Quantiles::of(&miou),
            variance: variance(&miou),
            miou,
            precision,
            subset_seeds: seeds,
        });
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let vars: Vec<f64> = points.iter().map(|p| p.variance).collect();
    Ok(SweepResult {
        mode,
        baseline_miou: baseline.miou(),
        variance_trend: spearman(&ns, &vars),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau: f64,
    pub lambda: f64,
    pub miou: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub taus: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Row-major over `taus` then `lambdas`.
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn cell(&self, tau: f64, lambda: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.tau == tau && c.lambda == lambda)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("tau \\ lambda");
        for l in &self.lambdas {
            let _ = write!(out, " {l:>8}");
        }
        out.push('\n');
        for t in &self.taus {
            let _ = write!(out, "{t:>12}");
            for l in &self.lambdas {
                let v = self.cell(*t, *l).map_or(f64::NAN, |c| 100.0 * c.miou);
                let _ = write!(out, " {v:>8.1}");
            }
            out.push('\n');
        }
        out
    }
}

/// One run with the configured loss flags per `(tau, lambda)` pair.
pub fn grid_tau_lambda(data: &Dataset, cfg: &ExperimentConfig) -> Result<GridResult> {
    if cfg.grid_tau.is_empty() || cfg.grid_lambda.is_empty() {
        return Err(Error::Config("grid needs at least one tau and one lambda".into()));
    }
    let view = data.view();
    let mut cells = Vec::with_capacity(cfg.grid_tau.len() * cfg.grid_lambda.len());
    for &tau in &cfg.grid_tau {
        for &lambda in &cfg.grid_lambda {
            let mut settings = cfg.train.clone();
            settings.hp.tau = tau;
            settings.hp.lambda = lambda;
            let (_, report) = train_run(&view, &settings, &format!("tau={tau} lambda={lambda}"))?;
            cells.push(GridCell {
                tau,
                lambda,
                miou: report.miou(),
                precision: report.precision(),
            });
        }
    }
    Ok(GridResult {
        taus: cfg.grid_tau.clone(),
        lambdas: cfg.grid_lambda.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub split: Split,
    pub labels: Vec<u8>,
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub z: Vec<f64>,
}

/// Writes one JSONL row of penultimate features per record of `manifest`.
pub fn dump_features(
    state: &ClassifierState,
    manifest: &Manifest,
    manifest_path: &Path,
    out: &Path,
) -> Result<usize> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for rec in &manifest.records {
        let image = load_gray(resolve(manifest_path, &rec.path))?;
        let fwd = state.forward(&image)?;
        let row = FeatureRow {
            id: rec.id.clone(),
            split: rec.split,
            labels: rec.labels.clone(),
            predicted: argmax(&fwd.scores),
            scores: fwd.scores,
            z: fwd.z,
        };
        let line = serde_json::to_string(&row).expect("row serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(manifest.records.len())
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.txt`.
pub fn write_report<T: Serialize>(dir: &Path, name: &str, value: &T, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let text_path = dir.join(format!("{name}.txt"));
    fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))
}
