//! Experiment configuration, read from a flat `key = value` file.
//!
//! ```text
//! train_manifest = data/manifest.jsonl
//! test_manifest = data/test.jsonl
//! ood_manifest = hard_ood.jsonl
//! out_dir = runs/wood
//! ablation = f
//! lambda = 0.007
//! tau = 20
//! k = 50
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::localization::DEFAULT_THETA;
use crate::loss::{LossFlags, OodTarget, WoodHyperparams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clustering {
    /// K-means over all OoD features.
    Kmeans,
    /// One cluster per class, grouping OoD features by their top-scoring class.
    PredictedClass,
}

impl FromStr for Clustering {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kmeans" => Ok(Clustering::Kmeans),
            "predicted_class" => Ok(Clustering::PredictedClass),
            _ => Err(format!("unknown clustering `{s}` (kmeans, predicted_class)")),
        }
    }
}

/// How a data-quantity sweep varies the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Add `n` OoD images to the full in-distribution set.
    Ood,
    /// Keep the total fixed: `n` OoD images replace `n` in-distribution ones.
    Budget,
    /// Vary the in-distribution count with the full OoD set.
    InDist,
}

impl FromStr for SweepMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ood" => Ok(SweepMode::Ood),
            "budget" => Ok(SweepMode::Budget),
            "in_dist" => Ok(SweepMode::InDist),
            _ => Err(format!("unknown sweep mode `{s}` (ood, budget, in_dist)")),
        }
    }
}

/// The six loss configurations of the ablation table, in row order.
pub const ABLATION_ROWS: [(&str, LossFlags); 6] = [
    ("a", flags(true, false, false, false)),
    ("b", flags(true, true, false, false)),
    ("c", flags(true, false, true, true)),
    ("d", flags(true, true, true, false)),
    ("e", flags(true, true, false, true)),
    ("f", flags(true, true, true, true)),
];

const fn flags(cls_on_in: bool, cls_on_ood: bool, d_on_in: bool, d_on_ood: bool) -> LossFlags {
    LossFlags {
        cls_on_in,
        cls_on_ood,
        d_on_in,
        d_on_ood,
    }
}

pub fn ablation_flags(row: &str) -> Option<LossFlags> {
    let row = row.trim_matches(|c| c == '(' || c == ')');
    ABLATION_ROWS.iter().find(|(r, _)| *r == row).map(|(_, f)| *f)
}

/// Everything a single training run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub feature_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_in: usize,
    pub batch_ood: usize,
    pub hp: WoodHyperparams,
    pub flags: LossFlags,
    pub clustering: Clustering,
    pub ood_target: OodTarget,
    pub theta: f64,
    pub rng_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            feature_dim: 16,
            lr: 0.05,
            epochs: 15,
            batch_in: 16,
            batch_ood: 16,
            hp: WoodHyperparams::default(),
            flags: LossFlags::BASELINE,
            clustering: Clustering::Kmeans,
            ood_target: OodTarget::Zero,
            theta: DEFAULT_THETA,
            rng_seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if !self.flags.cls_on_in {
            return Err(Error::Config("cls_on_in must be enabled".into()));
        }
        if self.feature_dim == 0 || self.batch_in == 0 || self.batch_ood == 0 {
            return Err(Error::Config(
                "feature_dim, batch_in and batch_ood must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    /// Hard-OoD manifest; required when any OoD term is enabled.
    pub ood_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train: TrainSettings,
    /// Use at most this many in-distribution / OoD images (first in file order).
    pub n_in: Option<usize>,
    pub n_ood: Option<usize>,
    pub sweep_ood: Vec<usize>,
    pub sweep_in: Vec<usize>,
    pub sweep_mode: SweepMode,
    pub grid_tau: Vec<f64>,
    pub grid_lambda: Vec<f64>,
    pub repeats: usize,
}

impl ExperimentConfig {
    pub fn new(train_manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            train_manifest: train_manifest.into(),
            test_manifest: None,
            ood_manifest: None,
            out_dir: out_dir.into(),
            train: TrainSettings::default(),
            n_in: None,
            n_ood: None,
            sweep_ood: vec![1, 2, 5, 10, 20],
            sweep_in: Vec::new(),
            sweep_mode: SweepMode::Ood,
            grid_tau: vec![10.0, 20.0, 30.0, 40.0],
            grid_lambda: vec![0.003, 0.005, 0.007, 0.01],
            repeats: 5,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_kv(KvFile::load(path)?, base)
    }

    pub fn from_kv(mut kv: KvFile, base: &Path) -> Result<Self> {
        let join = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let train_manifest = kv
            .take_raw("train_manifest")
            .map(join)
            .ok_or_else(|| Error::Config("missing `train_manifest`".into()))?;
        let out_dir = kv.take_raw("out_dir").map(join).unwrap_or_else(|| base.join("out"));
        let mut cfg = ExperimentConfig::new(train_manifest, out_dir);
        cfg.test_manifest = kv.take_raw("test_manifest").map(join);
        cfg.ood_manifest = kv.take_raw("ood_manifest").map(join);

        let t = &mut cfg.train;
        t.feature_dim = kv.take_or("feature_dim", t.feature_dim)?;
        t.lr = kv.take_or("lr", t.lr)?;
        t.epochs = kv.take_or("epochs", t.epochs)?;
        t.batch_in = kv.take_or("batch_in", t.batch_in)?;
        t.batch_ood = kv.take_or("batch_ood", t.batch_ood)?;
        t.hp.lambda = kv.take_or("lambda", t.hp.lambda)?;
        t.hp.tau = kv.take_or("tau", t.hp.tau)?;
        t.hp.k = kv.take_or("k", t.hp.k)?;
        t.hp.refresh_every = kv.take_or("refresh_every", t.hp.refresh_every)?;
        t.clustering = kv.take_or("clustering", t.clustering)?;
        if let Some(target) = kv.take_raw("ood_target") {
            t.ood_target = match target.as_str() {
                "zero" => OodTarget::Zero,
                "uniform" => OodTarget::Uniform,
                other => return Err(Error::Config(format!("unknown ood_target `{other}`"))),
            };
        }
        t.theta = kv.take_or("theta", t.theta)?;
        t.rng_seed = kv.take_or("rng_seed", t.rng_seed)?;
        if let Some(row) = kv.take_raw("ablation") {
            t.flags = ablation_flags(&row)
                .ok_or_else(|| Error::Config(format!("unknown ablation row `{row}` (a-f)")))?;
        }
        t.flags.cls_on_in = kv.take_or("cls_on_in", t.flags.cls_on_in)?;
        t.flags.cls_on_ood = kv.take_or("cls_on_ood", t.flags.cls_on_ood)?;
        t.flags.d_on_in = kv.take_or("d_on_in", t.flags.d_on_in)?;
        t.flags.d_on_ood = kv.take_or("d_on_ood", t.flags.d_on_ood)?;

        cfg.n_in = kv.take("n_in")?;
        cfg.n_ood = kv.take("n_ood")?;
        if let Some(v) = kv.take_list("sweep_ood")? {
            cfg.sweep_ood = v;
        }
        if let Some(v) = kv.take_list("sweep_in")? {
            cfg.sweep_in = v;
        }
        cfg.sweep_mode = kv.take_or("sweep_mode", cfg.sweep_mode)?;
        if let Some(v) = kv.take_list("grid_tau")? {
            cfg.grid_tau = v;
        }
        if let Some(v) = kv.take_list("grid_lambda")? {
            cfg.grid_lambda = v;
        }
        cfg.repeats = kv.take_or("repeats", cfg.repeats)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}
