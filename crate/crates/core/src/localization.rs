//! Class activation maps, thresholded seeds and seed quality metrics.
//!
//! Metrics JSON (as written by `wood eval`):
//!
//! ```text
//! {
//!   "classes": [{"name": "background", "iou": 0.93, "tp": 1, "fp": 0, "fn": 0}, ...],
//!   "miou": 0.71, "precision": 0.64, "recall": 0.88, "f1": 0.74,
//!   "excluded": ["cross"],
//!   "flags": ["precision_undefined"]
//! }
//! ```
//!
//! `iou` is `null` for a class absent from both prediction and ground truth;
//! such classes are listed in `excluded` and left out of `miou`. Undefined
//! ratios (0/0) are reported as 0 and named in `flags`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_gray, load_mask, write_pfm, GrayImage, LabelMask};
use crate::manifest::{resolve, ClassList, Manifest, Split};
use crate::net::{ClassifierState, FeatureMap};

pub const DEFAULT_THETA: f64 = 0.25;

/// Normalized score map of one class at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub class: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub maps: Vec<ClassMap>,
}

/// `M_c(u, v) = sum_k W[c, k] * F(u, v, k)` at feature resolution.
pub fn raw_cam(state: &ClassifierState, fmap: &FeatureMap, class: usize) -> Result<Vec<f64>> {
    let w = state.fc_weight();
    let (num_classes, d) = (w.shape[0], w.shape[1]);
    if class >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "class index {class} out of range for {num_classes} classes"
        )));
    }
    if fmap.channels != d {
        return Err(Error::Shape(format!(
            "feature map has {} channels, classifier expects {d}",
            fmap.channels
        )));
    }
    let row = &w.data[class * d..(class + 1) * d];
    let n = fmap.height * fmap.width;
    let mut out = vec![0.0; n];
    for (k, &wk) in row.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(fmap.plane(k)) {
            *o += wk * f;
        }
    }
    Ok(out)
}

/// Clamps negatives to zero and scales the maximum to 1. A map with no
/// positive value is left at zero.
pub fn normalize(raw: &mut [f64]) {
    let mut max = 0.0f64;
    for v in raw.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        max = max.max(*v);
    }
    if max > 0.0 {
        for v in raw.iter_mut() {
            *v /= max;
        }
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// CAM for each class in `present`, normalized at feature resolution and then
/// upsampled to the image size.
pub fn cam(state: &ClassifierState, image: &GrayImage, present: &[usize]) -> Result<LocalizationMap> {
    if present.is_empty() {
        return Err(Error::InvalidArgument("no classes to localize".into()));
    }
    let fwd = state.forward(image)?;
    cam_from_features(state, &fwd.feature_map, present, image.width, image.height)
}

pub fn cam_from_features(
    state: &ClassifierState,
    fmap: &FeatureMap,
    present: &[usize],
    width: usize,
    height: usize,
) -> Result<LocalizationMap> {
    let mut maps = Vec::with_capacity(present.len());
    for &c in present {
        let mut m = raw_cam(state, fmap, c)?;
        normalize(&mut m);
        maps.push(ClassMap {
            class: c,
            data: upsample_bilinear(&m, fmap.height, fmap.width, height, width),
        });
    }
    Ok(LocalizationMap {
        image_id: String::new(),
        width,
        height,
        maps,
    })
}

/// Per-pixel argmax over the present classes, kept when it reaches `theta`.
/// Ties go to the lower class index.
pub fn seed_from_map(map: &LocalizationMap, theta: f64) -> LabelMask {
    let mut order: Vec<&ClassMap> = map.maps.iter().collect();
    order.sort_by_key(|m| m.class);
    let mut seed = LabelMask::background(map.width, map.height);
    for (i, px) in seed.data.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for m in &order {
            let v = m.data[i];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((m.class, v));
            }
        }
        if let Some((c, v)) = best {
            if v >= theta {
                *px = (c + 1) as u8;
            }
        }
    }
    seed
}

/// Writes one PFM per class map, named `<image_id>.<class>.pfm`.
pub fn write_maps(dir: &Path, map: &LocalizationMap, classes: &ClassList) -> Result<()> {
    for m in &map.maps {
        let name = classes
            .name(m.class)
            .ok_or_else(|| Error::InvalidArgument(format!("class index {}", m.class)))?;
        let path = dir.join(format!("{}.{}.pfm", map.image_id, name));
        write_pfm(&path, map.width, map.height, &m.data)?;
    }
    Ok(())
}

/// Pixel counts pooled over a split; row = ground truth, column = prediction,
/// index 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        let n = num_classes + 1;
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.n || g >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "mask value {} outside {} classes",
                    p.max(g),
                    self.n - 1
                )));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    /// Background first, then the foreground classes in class-list order.
    pub classes: Vec<ClassIou>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub excluded: Vec<String>,
    pub flags: Vec<String>,
}

impl SeedMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix, classes: &ClassList) -> Result<Self> {
        if cm.n != classes.len() + 1 {
            return Err(Error::Shape(format!(
                "confusion matrix for {} classes, class list has {}",
                cm.n - 1,
                classes.len()
            )));
        }
        let mut flags = Vec::new();
        let mut excluded = Vec::new();
        let mut rows = Vec::with_capacity(cm.n);
        for i in 0..cm.n {
            let tp = cm.get(i, i);
            let fp: u64 = (0..cm.n).filter(|&g| g != i).map(|g| cm.get(g, i)).sum();
            let fn_: u64 = (0..cm.n).filter(|&p| p != i).map(|p| cm.get(i, p)).sum();
            let name = if i == 0 {
                "background".to_string()
            } else {
                classes.names()[i - 1].clone()
            };
            let denom = tp + fp + fn_;
            let iou = if denom == 0 {
                excluded.push(name.clone());
                None
            } else {
                Some(tp as f64 / denom as f64)
            };
            rows.push(ClassIou {
                name,
                iou,
                tp,
                fp,
                fn_,
            });
        }
        let present: Vec<f64> = rows.iter().filter_map(|r| r.iou).collect();
        let miou = if present.is_empty() {
            flags.push("miou_undefined".to_string());
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };

        let mut fg_tp = 0u64;
        let mut pred_fg = 0u64;
        let mut gt_fg = 0u64;
        for g in 0..cm.n {
            for p in 0..cm.n {
                let v = cm.get(g, p);
                if p != 0 {
                    pred_fg += v;
                }
                if g != 0 {
                    gt_fg += v;
                }
                if p != 0 && g != 0 {
                    fg_tp += v;
                }
            }
        }
        let mut ratio = |num: u64, den: u64, flag: &str| {
            if den == 0 {
                flags.push(flag.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(fg_tp, pred_fg, "precision_undefined");
        let recall = ratio(fg_tp, gt_fg, "recall_undefined");
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flags.push("f1_undefined".to_string());
            0.0
        };
        Ok(SeedMetrics {
            classes: rows,
            miou,
            precision,
            recall,
            f1,
            excluded,
            flags,
        })
    }

    pub fn iou_of(&self, name: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == name).and_then(|c| c.iou)
    }
}

/// Scores (seed, ground truth) pairs pooled over the whole split.
pub fn evaluate_seeds(pairs: &[(&LabelMask, &LabelMask)], classes: &ClassList) -> Result<SeedMetrics> {
    let mut cm = ConfusionMatrix::new(classes.len());
    for (pred, gt) in pairs {
        cm.add(pred, gt)?;
    }
    SeedMetrics::from_confusion(&cm, classes)
}

/// CAM seeds for every in-distribution record of `manifest`, localized at the
/// record's labeled classes, paired with the ground-truth masks.
pub fn seeds_for_manifest(
    state: &ClassifierState,
    manifest: &Manifest,
    manifest_path: &Path,
    theta: f64,
) -> Result<Vec<(String, LabelMask, LabelMask)>> {
    let mut out = Vec::new();
    for rec in manifest.by_split(Split::InDist) {
        let gt_path = rec.gt_mask_path.as_ref().ok_or_else(|| {
            Error::InvalidManifest(format!("`{}` has no ground-truth mask", rec.id))
        })?;
        let image = load_gray(resolve(manifest_path, &rec.path))?;
        let gt = load_mask(resolve(manifest_path, gt_path))?;
        let present: Vec<usize> = rec.positive_classes().collect();
        let map = cam(state, &image, &present)?;
        out.push((rec.id.clone(), seed_from_map(&map, theta), gt));
    }
    Ok(out)
}

/// One row of the baseline-vs-method comparison, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: String,
    pub baseline: Option<f64>,
    pub method: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    /// Sorted by descending delta; undefined deltas last.
    pub rows: Vec<ClassDelta>,
}

/// Per-class IoU improvement of `method` over `baseline`.
pub fn per_class_report(baseline: &SeedMetrics, method: &SeedMetrics) -> Result<PerClassReport> {
    let names = |m: &SeedMetrics| m.classes.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    if names(baseline) != names(method) {
        return Err(Error::InvalidArgument("metric files have different class lists".into()));
    }
    let mut rows: Vec<ClassDelta> = baseline
        .classes
        .iter()
        .zip(&method.classes)
        .map(|(b, m)| {
            let pb = b.iou.map(|v| 100.0 * v);
            let pm = m.iou.map(|v| 100.0 * v);
            ClassDelta {
                class: b.name.clone(),
                baseline: pb,
                method: pm,
                delta: pb.zip(pm).map(|(b, m)| m - b),
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.delta, b.delta) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(PerClassReport { rows })
}

impl PerClassReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let width = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$} {:>9} {:>9} {:>8}\n", "class", "baseline", "method", "delta");
        for r in &self.rows {
            let delta = r.delta.map_or_else(|| "-".to_string(), |d| format!("{d:+.1}"));
            let _ = writeln!(
                out,
                "{:<width$} {:>9} {:>9} {:>8}",
                r.class,
                fmt(r.baseline),
                fmt(r.method),
                delta
            );
        }
        out
    }
}
