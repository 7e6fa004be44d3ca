//! Distance, classification and total objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::clusters::{ClusterKind, ClusterSet};
use crate::net::{ForwardResult, OutputGrad};

/// Scores are clipped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WoodHyperparams {
    pub lambda: f64,
    /// Percentage of OoD clusters, nearest first, that repel each sample.
    pub tau: f64,
    pub k: usize,
    /// Training steps between cluster refreshes; 0 means once per epoch.
    pub refresh_every: usize,
}

impl Default for WoodHyperparams {
    fn default() -> Self {
        WoodHyperparams {
            lambda: 0.007,
            tau: 20.0,
            k: 50,
            refresh_every: 0,
        }
    }
}

impl WoodHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau <= 100.0) {
            return Err(Error::Config(format!("tau must lie in (0, 100], got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which loss terms participate; each maps to one column group of the loss
/// ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// BCE on in-distribution samples.
    pub cls_on_in: bool,
    /// BCE against the zero label on OoD samples.
    pub cls_on_ood: bool,
    /// Attraction of in-distribution features to their class centers.
    pub d_on_in: bool,
    /// Repulsion of in-distribution features from nearby OoD centers.
    pub d_on_ood: bool,
}

impl LossFlags {
    pub const BASELINE: LossFlags = LossFlags {
        cls_on_in: true,
        cls_on_ood: false,
        d_on_in: false,
        d_on_ood: false,
    };
    pub const ALL: LossFlags = LossFlags {
        cls_on_in: true,
        cls_on_ood: true,
        d_on_in: true,
        d_on_ood: true,
    };

    pub fn uses_ood(&self) -> bool {
        self.cls_on_ood || self.d_on_ood
    }

    pub fn uses_distance(&self) -> bool {
        self.d_on_in || self.d_on_ood
    }
}

/// Target used for OoD samples in the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodTarget {
    /// All-zero label vector.
    #[default]
    Zero,
    /// `1 / |C|` for every class; kept only as an ablation.
    Uniform,
}

pub fn distance(z: &[f64], center: &[f64]) -> Result<f64> {
    if z.len() != center.len() {
        return Err(Error::Shape(format!(
            "feature of dimension {} vs center of dimension {}",
            z.len(),
            center.len()
        )));
    }
    Ok(z
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Number of OoD clusters selected for `K` clusters at percentage `tau`.
pub fn selection_size(k: usize, tau: f64) -> usize {
    let raw = (tau * k as f64 / 100.0 + 1e-9).floor() as usize;
    raw.clamp(1, k.max(1))
}

/// Indices of the `selection_size(K, tau)` nearest OoD centers, nearest first,
/// ties broken by lower index.
pub fn select_nearest_ood(z: &[f64], ood: &ClusterSet, tau: f64) -> Result<Vec<usize>> {
    if ood.is_empty() {
        return Err(Error::InvalidArgument("OoD cluster set is empty".into()));
    }
    let dists = ood
        .centers
        .iter()
        .map(|c| distance(z, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_from_distances(&dists, tau))
}

pub fn select_from_distances(dists: &[f64], tau: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    idx.truncate(selection_size(dists.len(), tau));
    idx
}

/// Distance loss of one in-distribution feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceLoss {
    /// Sum of distances to the centers of the sample's classes.
    pub attract: f64,
    /// Sum of distances to the selected OoD centers.
    pub repel: f64,
    pub selected: Vec<usize>,
    pub grad_attract: Vec<f64>,
    pub grad_repel: Vec<f64>,
}

impl DistanceLoss {
    pub fn value(&self) -> f64 {
        self.attract - self.repel
    }

    pub fn grad(&self) -> Vec<f64> {
        self.grad_attract
            .iter()
            .zip(&self.grad_repel)
            .map(|(a, r)| a - r)
            .collect()
    }
}

/// Adds the unit vector `(z - c) / |z - c|` to `g`; zero at the singularity.
fn add_unit(g: &mut [f64], z: &[f64], c: &[f64], d: f64) {
    if d > 0.0 {
        for ((gi, zi), ci) in g.iter_mut().zip(z).zip(c) {
            *gi += (zi - ci) / d;
        }
    }
}

/// `sum_{c: y_c = 1} d(z, p_c^in) - sum_{k in K} d(z, p_k^ood)`. Centers are
/// constants; the nearest-cluster set is chosen per sample. When `pood` is
/// `None` the repulsion term is zero.
pub fn loss_d(
    z: &[f64],
    y: &[u8],
    pin: &ClusterSet,
    pood: Option<&ClusterSet>,
    tau: f64,
) -> Result<DistanceLoss> {
    if pin.kind != ClusterKind::InDistClassMeans {
        return Err(Error::InvalidArgument(
            "attraction clusters must be in-distribution class means".into(),
        ));
    }
    if !y.iter().any(|&v| v == 1) {
        return Err(Error::InvalidArgument(
            "distance loss is defined only for in-distribution samples (all-zero label)".into(),
        ));
    }
    if y.len() != pin.k() {
        return Err(Error::Shape(format!(
            "{} labels for {} class clusters",
            y.len(),
            pin.k()
        )));
    }
    let mut out = DistanceLoss {
        attract: 0.0,
        repel: 0.0,
        selected: Vec::new(),
        grad_attract: vec![0.0; z.len()],
        grad_repel: vec![0.0; z.len()],
    };
    for (c, _) in y.iter().enumerate().filter(|(_, &v)| v == 1) {
        let center = &pin.centers[c];
        let d = distance(z, center)?;
        out.attract += d;
        add_unit(&mut out.grad_attract, z, center, d);
    }
    if let Some(pood) = pood {
        out.selected = select_nearest_ood(z, pood, tau)?;
        for &k in &out.selected {
            let center = &pood.centers[k];
            let d = distance(z, center)?;
            out.repel += d;
            add_unit(&mut out.grad_repel, z, center, d);
        }
    }
    Ok(out)
}

/// Binary cross entropy of one clamped probability.
pub fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

fn is_clamped(p: f64) -> bool {
    !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p)
}

/// Batch classification loss with per-term breakdown and gradients.
///
/// Gradients are taken with respect to the logits, `(s - t) / (|C| B)`. This
/// is the exact derivative wherever the clamp is inactive and keeps
/// confidently wrong predictions trainable where it is not.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    /// `(1/|C|) sum_c mean_i BCE(F^c(x_in), y_c)`.
    pub in_term: f64,
    /// `(1/|C|) sum_c mean_j BCE(F^c(x_ood), 0)`.
    pub ood_term: f64,
    pub d_logits_in: Vec<Vec<f64>>,
    pub d_logits_ood: Vec<Vec<f64>>,
    /// Number of scores that hit the clamp.
    pub clamped: usize,
}

impl ClassificationLoss {
    pub fn value(&self) -> f64 {
        self.in_term + self.ood_term
    }
}

fn check_scores(scores: &[f64], n: usize) -> Result<()> {
    if scores.len() != n {
        return Err(Error::Shape(format!("{} scores for {n} classes", scores.len())));
    }
    Ok(())
}

/// Classification loss over an in-distribution batch and an OoD batch. Either
/// batch may be empty, in which case its term is omitted.
pub fn loss_cls_batch(
    scores_in: &[&[f64]],
    labels_in: &[&[u8]],
    scores_ood: &[&[f64]],
    num_classes: usize,
    ood_target: OodTarget,
) -> Result<ClassificationLoss> {
    if scores_in.len() != labels_in.len() {
        return Err(Error::Shape("scores and labels differ in batch size".into()));
    }
    let nc = num_classes as f64;
    let mut clamped = 0;
    let mut in_term = 0.0;
    let mut d_in = Vec::with_capacity(scores_in.len());
    let b_in = scores_in.len() as f64;
    for (s, y) in scores_in.iter().zip(labels_in) {
        check_scores(s, num_classes)?;
        if y.len() != num_classes {
            return Err(Error::Shape(format!("{} labels for {num_classes} classes", y.len())));
        }
        let mut g = vec![0.0; num_classes];
        for c in 0..num_classes {
            let t = f64::from(y[c]);
            clamped += usize::from(is_clamped(s[c]));
            in_term += bce(s[c], t);
            g[c] = (s[c] - t) / (nc * b_in);
        }
        d_in.push(g);
    }
    if !scores_in.is_empty() {
        in_term /= nc * b_in;
    }

    let target = match ood_target {
        OodTarget::Zero => 0.0,
        OodTarget::Uniform => 1.0 / nc,
    };
    let mut ood_term = 0.0;
    let mut d_ood = Vec::with_capacity(scores_ood.len());
    let b_ood = scores_ood.len() as f64;
    for s in scores_ood {
        check_scores(s, num_classes)?;
        let mut g = vec![0.0; num_classes];
        for c in 0..num_classes {
            clamped += usize::from(is_clamped(s[c]));
            ood_term += bce(s[c], target);
            g[c] = (s[c] - target) / (nc * b_ood);
        }
        d_ood.push(g);
    }
    if !scores_ood.is_empty() {
        ood_term /= nc * b_ood;
    }
    if clamped > 0 {
        log::debug!("{clamped} scores clamped in BCE");
    }
    Ok(ClassificationLoss {
        in_term,
        ood_term,
        d_logits_in: d_in,
        d_logits_ood: d_ood,
        clamped,
    })
}

/// Classification loss of one in-distribution sample and, optionally, one OoD
/// sample.
pub fn loss_cls(scores_in: &[f64], y: &[u8], scores_ood: Option<&[f64]>) -> Result<f64> {
    let ood: Vec<&[f64]> = scores_ood.into_iter().collect();
    loss_cls_batch(&[scores_in], &[y], &ood, y.len(), OodTarget::Zero).map(|l| l.value())
}

/// Per-batch value of every loss term. Disabled terms are zero; `total` is
/// `cls_in + cls_ood + lambda * (d_attract - d_repel)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_in: f64,
    pub cls_ood: f64,
    /// Batch mean of attraction distances.
    pub d_attract: f64,
    /// Batch mean of repulsion distances.
    pub d_repel: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn cls(&self) -> f64 {
        self.cls_in + self.cls_ood
    }

    pub fn distance(&self) -> f64 {
        self.d_attract - self.d_repel
    }

    fn assemble(cls_in: f64, cls_ood: f64, d_attract: f64, d_repel: f64, lambda: f64) -> Self {
        let cls = cls_in + cls_ood;
        LossBreakdown {
            cls_in,
            cls_ood,
            d_attract,
            d_repel,
            lambda,
            total: cls + lambda * (d_attract - d_repel),
        }
    }
}

/// One in-distribution batch element.
#[derive(Debug, Clone, Copy)]
pub struct InSample<'a> {
    pub forward: &'a ForwardResult,
    pub labels: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grads_in: Vec<OutputGrad>,
    pub grads_ood: Vec<OutputGrad>,
    pub clamped: usize,
}

impl TotalLoss {
    pub fn value(&self) -> f64 {
        self.breakdown.total
    }

    /// Output gradients in `[in..., ood...]` order, matching the image order
    /// handed to [`crate::net::grad`].
    pub fn into_seeds(self) -> (f64, Vec<OutputGrad>) {
        let v = self.breakdown.total;
        let mut seeds = self.grads_in;
        seeds.extend(self.grads_ood);
        (v, seeds)
    }
}

/// Settings of the total objective that do not change within a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub hp: WoodHyperparams,
    pub flags: LossFlags,
    pub ood_target: OodTarget,
}

/// `L = L_cls + lambda * L_d`, with `L_d` averaged over the in-batch.
pub fn total_loss(
    batch_in: &[InSample<'_>],
    batch_ood: &[&ForwardResult],
    pin: Option<&ClusterSet>,
    pood: Option<&ClusterSet>,
    obj: &Objective,
) -> Result<TotalLoss> {
    let flags = obj.flags;
    if batch_in.is_empty() {
        return Err(Error::InvalidArgument("in-distribution batch is empty".into()));
    }
    let num_classes = batch_in[0].forward.scores.len();
    let d = batch_in[0].forward.z.len();

    let scores_in: Vec<&[f64]> = batch_in.iter().map(|s| s.forward.scores.as_slice()).collect();
    let labels_in: Vec<&[u8]> = batch_in.iter().map(|s| s.labels).collect();
    let scores_ood: Vec<&[f64]> = if flags.cls_on_ood {
        batch_ood.iter().map(|f| f.scores.as_slice()).collect()
    } else {
        Vec::new()
    };
    let in_for_cls: (&[&[f64]], &[&[u8]]) = if flags.cls_on_in {
        (&scores_in, &labels_in)
    } else {
        (&[], &[])
    };
    let cls = loss_cls_batch(in_for_cls.0, in_for_cls.1, &scores_ood, num_classes, obj.ood_target)?;

    let mut grads_in: Vec<OutputGrad> = (0..batch_in.len())
        .map(|i| OutputGrad {
            d_scores: vec![0.0; num_classes],
            d_logits: cls
                .d_logits_in
                .get(i)
                .cloned()
                .unwrap_or_else(|| vec![0.0; num_classes]),
            d_z: vec![0.0; d],
        })
        .collect();
    let grads_ood: Vec<OutputGrad> = (0..batch_ood.len())
        .map(|j| OutputGrad {
            d_scores: vec![0.0; num_classes],
            d_logits: cls
                .d_logits_ood
                .get(j)
                .cloned()
                .unwrap_or_else(|| vec![0.0; num_classes]),
            d_z: vec![0.0; d],
        })
        .collect();

    let mut attract = 0.0;
    let mut repel = 0.0;
    if flags.uses_distance() {
        let pin = pin.ok_or_else(|| {
            Error::InvalidArgument("distance loss needs in-distribution clusters".into())
        })?;
        let pood = if flags.d_on_ood {
            Some(pood.ok_or_else(|| {
                Error::InvalidArgument("repulsion term needs OoD clusters".into())
            })?)
        } else {
            None
        };
        let b = batch_in.len() as f64;
        let scale = obj.hp.lambda / b;
        for (s, g) in batch_in.iter().zip(grads_in.iter_mut()) {
            let dl = loss_d(&s.forward.z, s.labels, pin, pood, obj.hp.tau)?;
            if flags.d_on_in {
                attract += dl.attract;
                for (gz, a) in g.d_z.iter_mut().zip(&dl.grad_attract) {
                    *gz += scale * a;
                }
            }
            if flags.d_on_ood {
                repel += dl.repel;
                for (gz, r) in g.d_z.iter_mut().zip(&dl.grad_repel) {
                    *gz -= scale * r;
                }
            }
        }
        attract /= b;
        repel /= b;
    }

    let breakdown = LossBreakdown::assemble(cls.in_term, cls.ood_term, attract, repel, obj.hp.lambda);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(breakdown.total));
    }
    Ok(TotalLoss {
        breakdown,
        grads_in,
        grads_ood,
        clamped: cls.clamped,
    })
}
