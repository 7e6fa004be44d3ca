//! Data loading and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_gray, load_mask, GrayImage, LabelMask};
use crate::localization::{cam_from_features, evaluate_seeds, seed_from_map, SeedMetrics};
use crate::loss::{
    build_in_clusters, build_ood_clusters_by_predicted_class, build_ood_clusters_kmeans,
    total_loss, ClusterSet, InSample, LossBreakdown, Objective,
};
use crate::manifest::{load_manifest, resolve, ClassList, Manifest, Split};
use crate::net::{self, Architecture, ClassifierState, ForwardResult};
use crate::rng::{derive_seed, stream, Stream};

use super::config::{Clustering, ExperimentConfig, TrainSettings};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub image: GrayImage,
    pub labels: Vec<u8>,
    pub gt: LabelMask,
}

/// Images decoded once and shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: ClassList,
    pub train_in: Vec<Sample>,
    pub ood: Vec<Sample>,
    pub test: Vec<EvalSample>,
}

fn load_samples(m: &Manifest, path: &Path, keep: impl Fn(Split) -> bool) -> Result<Vec<Sample>> {
    m.records
        .iter()
        .filter(|r| keep(r.split))
        .map(|r| {
            Ok(Sample {
                id: r.id.clone(),
                image: load_gray(resolve(path, &r.path))?,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

impl Dataset {
    /// Loads the in-distribution training images, the hard-OoD images (from
    /// the OoD manifest and any `ood_hard` records of the training manifest)
    /// and the evaluation images with their masks.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let train_path = cfg.train_manifest.as_path();
        let train = load_manifest(train_path)?;
        let mut train_in = load_samples(&train, train_path, |s| s == Split::InDist)?;
        let mut ood = load_samples(&train, train_path, |s| s == Split::OodHard)?;
        if let Some(p) = &cfg.ood_manifest {
            let m = load_manifest(p)?;
            if m.classes != train.classes {
                return Err(Error::InvalidManifest(format!(
                    "{}: class list differs from the training manifest",
                    p.display()
                )));
            }
            ood.extend(load_samples(&m, p, |s| s == Split::OodHard)?);
        }
        let mut test = Vec::new();
        if let Some(p) = &cfg.test_manifest {
            let m = load_manifest(p)?;
            if m.classes != train.classes {
                return Err(Error::InvalidManifest(format!(
                    "{}: class list differs from the training manifest",
                    p.display()
                )));
            }
            for r in m.by_split(Split::InDist) {
                let gt = r.gt_mask_path.as_ref().ok_or_else(|| {
                    Error::InvalidManifest(format!("`{}` has no ground-truth mask", r.id))
                })?;
                test.push(EvalSample {
                    id: r.id.clone(),
                    image: load_gray(resolve(p, &r.path))?,
                    labels: r.labels.clone(),
                    gt: load_mask(resolve(p, gt))?,
                });
            }
        }
        if let Some(n) = cfg.n_in {
            train_in.truncate(n);
        }
        if let Some(n) = cfg.n_ood {
            ood.truncate(n);
        }
        Ok(Dataset {
            classes: train.classes,
            train_in,
            ood,
            test,
        })
    }

    pub fn view(&self) -> RunData<'_> {
        RunData {
            classes: &self.classes,
            train_in: self.train_in.iter().collect(),
            ood: self.ood.iter().collect(),
            test: &self.test,
        }
    }

    pub fn image_size(&self) -> Result<usize> {
        let first = self
            .train_in
            .first()
            .ok_or_else(|| Error::InvalidManifest("no in-distribution training images".into()))?;
        Ok(first.image.width)
    }
}

/// The samples one run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct RunData<'a> {
    pub classes: &'a ClassList,
    pub train_in: Vec<&'a Sample>,
    pub ood: Vec<&'a Sample>,
    pub test: &'a [EvalSample],
}

/// Seeds derived from the root seed, one per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLog {
    pub root: u64,
    pub init: u64,
    pub shuffle: u64,
    pub kmeans: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<u64>,
}

impl SeedLog {
    pub fn new(root: u64) -> Self {
        SeedLog {
            root,
            init: derive_seed(root, Stream::Init, 0),
            shuffle: derive_seed(root, Stream::Shuffle, 0),
            kmeans: derive_seed(root, Stream::KMeans, 0),
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of every loss term.
    pub loss: LossBreakdown,
    pub clamped: usize,
    pub ood_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub settings: TrainSettings,
    pub seeds: SeedLog,
    pub n_in: usize,
    pub n_ood: usize,
    /// Number of OoD clusters actually used, after clamping K to the pool.
    pub effective_k: Option<usize>,
    pub epochs: Vec<EpochLog>,
    pub metrics: Option<SeedMetrics>,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            wall_time_s: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn miou(&self) -> f64 {
        self.metrics.as_ref().map_or(0.0, |m| m.miou)
    }

    pub fn precision(&self) -> f64 {
        self.metrics.as_ref().map_or(0.0, |m| m.precision)
    }

    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|e| &e.loss)
    }
}

pub struct Clusters {
    pub pin: Option<ClusterSet>,
    pub pood: Option<ClusterSet>,
}

/// Recomputes the cluster sets from the current classifier.
pub fn refresh_clusters(
    state: &ClassifierState,
    data: &RunData<'_>,
    settings: &TrainSettings,
    refresh_index: u64,
) -> Result<Clusters> {
    let flags = settings.flags;
    if !flags.uses_distance() {
        return Ok(Clusters {
            pin: None,
            pood: None,
        });
    }
    let z_in: Vec<Vec<f64>> = data
        .train_in
        .iter()
        .map(|s| state.forward(&s.image).map(|f| f.z))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&[f64], &[u8])> = z_in
        .iter()
        .zip(&data.train_in)
        .map(|(z, s)| (z.as_slice(), s.labels.as_slice()))
        .collect();
    let pin = build_in_clusters(&pairs, data.classes)?;

    let pood = if flags.d_on_ood {
        let fwd: Vec<ForwardResult> = data
            .ood
            .iter()
            .map(|s| state.forward(&s.image))
            .collect::<Result<_>>()?;
        Some(match settings.clustering {
            Clustering::Kmeans => {
                let k = settings.hp.k.min(fwd.len());
                let zs: Vec<&[f64]> = fwd.iter().map(|f| f.z.as_slice()).collect();
                let seed = derive_seed(settings.rng_seed, Stream::KMeans, refresh_index);
                build_ood_clusters_kmeans(&zs, k, seed)?
            }
            Clustering::PredictedClass => {
                let pairs: Vec<(&[f64], usize)> = fwd
                    .iter()
                    .map(|f| (f.z.as_slice(), argmax(&f.scores)))
                    .collect();
                build_ood_clusters_by_predicted_class(&pairs, data.classes.len())?
            }
        })
    } else {
        None
    };
    Ok(Clusters {
        pin: Some(pin),
        pood,
    })
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains one classifier and evaluates its seeds on `data.test`.
pub fn train_run(data: &RunData<'_>, settings: &TrainSettings, label: &str) -> Result<(ClassifierState, RunReport)> {
    let started = Instant::now();
    settings.validate()?;
    let flags = settings.flags;
    if flags.uses_ood() && data.ood.is_empty() {
        return Err(Error::Config(
            "OoD loss terms are enabled but no hard-OoD images were given".into(),
        ));
    }
    if data.train_in.is_empty() {
        return Err(Error::InvalidManifest("no in-distribution training images".into()));
    }
    let size = data.train_in[0].image.width;
    let arch = Architecture::small(size, data.classes.len(), settings.feature_dim);
    let root = settings.rng_seed;
    let mut state = ClassifierState::init(arch, &mut stream(root, Stream::Init, 0))?;
    let objective = Objective {
        hp: settings.hp,
        flags,
        ood_target: settings.ood_target,
    };

    let mut epochs = Vec::with_capacity(settings.epochs);
    let mut clusters = Clusters {
        pin: None,
        pood: None,
    };
    let mut refreshes = 0u64;
    let mut step = 0usize;
    let mut effective_k = None;
    let mut ood_order: Vec<usize> = (0..data.ood.len()).collect();
    let mut ood_cursor = 0usize;
    for epoch in 0..settings.epochs {
        let mut shuffle = stream(root, Stream::Shuffle, epoch as u64);
        let mut order: Vec<usize> = (0..data.train_in.len()).collect();
        order.shuffle(&mut shuffle);
        ood_order.shuffle(&mut shuffle);
        ood_cursor = ood_cursor.min(ood_order.len());

        let mut sum = LossBreakdown::default();
        let mut clamped = 0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_in) {
            let due = if settings.hp.refresh_every == 0 {
                batches == 0
            } else {
                step % settings.hp.refresh_every == 0
            };
            if due && flags.uses_distance() {
                clusters = refresh_clusters(&state, data, settings, refreshes)?;
                refreshes += 1;
                effective_k = clusters.pood.as_ref().map(ClusterSet::k);
            }

            let mut images: Vec<&GrayImage> = chunk.iter().map(|&i| &data.train_in[i].image).collect();
            let labels: Vec<&[u8]> = chunk.iter().map(|&i| data.train_in[i].labels.as_slice()).collect();
            if flags.cls_on_ood {
                for _ in 0..settings.batch_ood.min(ood_order.len()) {
                    if ood_cursor == ood_order.len() {
                        ood_cursor = 0;
                    }
                    images.push(&data.ood[ood_order[ood_cursor]].image);
                    ood_cursor += 1;
                }
            }
            let n_in = chunk.len();
            let mut breakdown = None;
            let (_, grads) = net::grad(&state, &images, |fwds| {
                let (fin, food) = fwds.split_at(n_in);
                let batch: Vec<InSample<'_>> = fin
                    .iter()
                    .zip(&labels)
                    .map(|(f, y)| InSample { forward: f, labels: y })
                    .collect();
                let ood: Vec<&ForwardResult> = food.iter().collect();
                let t = total_loss(&batch, &ood, clusters.pin.as_ref(), clusters.pood.as_ref(), &objective)?;
                breakdown = Some((t.breakdown, t.clamped));
                Ok(t.into_seeds())
            })?;
            state.apply_sgd(&grads, settings.lr)?;
            let (b, c) = breakdown.expect("loss evaluated");
            sum.cls_in += b.cls_in;
            sum.cls_ood += b.cls_ood;
            sum.d_attract += b.d_attract;
            sum.d_repel += b.d_repel;
            sum.total += b.total;
            clamped += c;
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            loss: LossBreakdown {
                cls_in: sum.cls_in / n,
                cls_ood: sum.cls_ood / n,
                d_attract: sum.d_attract / n,
                d_repel: sum.d_repel / n,
                lambda: settings.hp.lambda,
                total: sum.total / n,
            },
            clamped,
            ood_clusters: clusters.pood.as_ref().map_or(0, ClusterSet::k),
        });
        log::info!(
            "{label} epoch {epoch}: loss {:.5} (cls {:.5}, d {:+.4})",
            sum.total / n,
            (sum.cls_in + sum.cls_ood) / n,
            (sum.d_attract - sum.d_repel) / n
        );
    }

    let metrics = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_state(&state, data.classes, data.test, settings.theta)?)
    };
    let report = RunReport {
        label: label.to_string(),
        settings: settings.clone(),
        seeds: SeedLog::new(root),
        n_in: data.train_in.len(),
        n_ood: if flags.uses_ood() { data.ood.len() } else { 0 },
        effective_k,
        epochs,
        metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Seed metrics of `state` on evaluation samples, localizing each image at
/// its labeled classes.
pub fn evaluate_state(
    state: &ClassifierState,
    classes: &ClassList,
    samples: &[EvalSample],
    theta: f64,
) -> Result<SeedMetrics> {
    let mut seeds = Vec::with_capacity(samples.len());
    for s in samples {
        let fwd = state.forward(&s.image)?;
        let present: Vec<usize> = (0..s.labels.len()).filter(|&c| s.labels[c] == 1).collect();
        let map = cam_from_features(state, &fwd.feature_map, &present, s.image.width, s.image.height)?;
        seeds.push(seed_from_map(&map, theta));
    }
    let pairs: Vec<(&LabelMask, &LabelMask)> = seeds.iter().zip(samples).map(|(p, s)| (p, &s.gt)).collect();
    evaluate_seeds(&pairs, classes)
}
