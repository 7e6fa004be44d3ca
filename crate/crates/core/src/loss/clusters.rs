//! Cluster sets in penultimate-feature space.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ClassList;
use crate::net::checkpoint;
use crate::net::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKind {
    InDistClassMeans,
    OodKmeans,
    OodPredictedClass,
}

/// A named collection of centers, each the arithmetic mean of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub kind: ClusterKind,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    /// Class index behind each cluster, for class-based kinds.
    pub class_of: Vec<Option<usize>>,
    /// Classes that received no members (predicted-class clustering only).
    pub skipped_classes: Vec<usize>,
}

impl ClusterSet {
    pub fn empty(kind: ClusterKind, dim: usize) -> Self {
        ClusterSet {
            kind,
            dim,
            centers: Vec::new(),
            sizes: Vec::new(),
            class_of: Vec::new(),
            skipped_classes: Vec::new(),
        }
    }

    /// Number of clusters.
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

fn check_dims<'a>(features: impl Iterator<Item = &'a [f64]>) -> Result<usize> {
    let mut dim = None;
    for z in features {
        match dim {
            None => dim = Some(z.len()),
            Some(d) if d != z.len() => {
                return Err(Error::Shape(format!(
                    "feature dimension {} differs from {d}",
                    z.len()
                )))
            }
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}

fn accumulate(center: &mut [f64], z: &[f64]) {
    for (c, v) in center.iter_mut().zip(z) {
        *c += v;
    }
}

fn finish_means(sums: &mut [Vec<f64>], sizes: &[usize]) {
    for (s, &n) in sums.iter_mut().zip(sizes) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
}

/// One cluster per class; a multi-label sample joins every positive class.
pub fn build_in_clusters(features: &[(&[f64], &[u8])], classes: &ClassList) -> Result<ClusterSet> {
    let dim = check_dims(features.iter().map(|(z, _)| *z))?;
    let n_classes = classes.len();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut sizes = vec![0usize; n_classes];
    for (z, y) in features {
        if y.len() != n_classes {
            return Err(Error::Shape(format!(
                "label vector of length {} for {n_classes} classes",
                y.len()
            )));
        }
        for (c, _) in y.iter().enumerate().filter(|(_, &v)| v == 1) {
            accumulate(&mut sums[c], z);
            sizes[c] += 1;
        }
    }
    if let Some(c) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(classes.names()[c].clone()));
    }
    finish_means(&mut sums, &sizes);
    Ok(ClusterSet {
        kind: ClusterKind::InDistClassMeans,
        dim,
        centers: sums,
        sizes,
        class_of: (0..n_classes).map(Some).collect(),
        skipped_classes: Vec::new(),
    })
}

/// Groups OoD features by the class the classifier (wrongly) predicts for
/// them. Classes without members are skipped and recorded.
pub fn build_ood_clusters_by_predicted_class(
    features: &[(&[f64], usize)],
    num_classes: usize,
) -> Result<ClusterSet> {
    let dim = check_dims(features.iter().map(|(z, _)| *z))?;
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut sizes = vec![0usize; num_classes];
    for &(z, c) in features {
        if c >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "predicted class {c} out of range for {num_classes} classes"
            )));
        }
        accumulate(&mut sums[c], z);
        sizes[c] += 1;
    }
    finish_means(&mut sums, &sizes);
    let mut set = ClusterSet::empty(ClusterKind::OodPredictedClass, dim);
    for (c, (center, n)) in sums.into_iter().zip(sizes).enumerate() {
        if n == 0 {
            set.skipped_classes.push(c);
        } else {
            set.centers.push(center);
            set.sizes.push(n);
            set.class_of.push(Some(c));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterMeta {
    kind: ClusterKind,
    #[serde(rename = "K")]
    k: usize,
    dim: usize,
    sizes: Vec<usize>,
    class_of: Vec<Option<usize>>,
    skipped_classes: Vec<usize>,
}

/// Path of the JSON sidecar written next to a cluster container.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the centers as a `K x d` tensor in the checkpoint container, plus a
/// `<path>.json` sidecar with kind, K and sizes.
pub fn save_clusters(set: &ClusterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = ClusterMeta {
        kind: set.kind,
        k: set.k(),
        dim: set.dim,
        sizes: set.sizes.clone(),
        class_of: set.class_of.clone(),
        skipped_classes: set.skipped_classes.clone(),
    };
    let meta_json = serde_json::to_string(&meta).expect("meta serializes");
    let centers = Tensor {
        name: "centers".into(),
        shape: vec![set.k(), set.dim],
        data: set.centers.iter().flatten().copied().collect(),
    };
    checkpoint::write(path, &meta_json, &[centers])?;
    let side = sidecar_path(path);
    let pretty = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&side, pretty).map_err(|e| Error::io(side, e))
}

pub fn load_clusters(path: impl AsRef<Path>) -> Result<ClusterSet> {
    let (meta_json, tensors) = checkpoint::read(path)?;
    let meta: ClusterMeta = serde_json::from_str(&meta_json)
        .map_err(|e| Error::Checkpoint(format!("bad cluster metadata: {e}")))?;
    let centers = tensors
        .into_iter()
        .find(|t| t.name == "centers")
        .ok_or_else(|| Error::Checkpoint("missing `centers` tensor".into()))?;
    if centers.shape != [meta.k, meta.dim] || meta.sizes.len() != meta.k {
        return Err(Error::Checkpoint("cluster metadata disagrees with tensor".into()));
    }
    Ok(ClusterSet {
        kind: meta.kind,
        dim: meta.dim,
        centers: if meta.dim == 0 {
            vec![Vec::new(); meta.k]
        } else {
            centers.data.chunks(meta.dim).map(<[f64]>::to_vec).collect()
        },
        sizes: meta.sizes,
        class_of: meta.class_of,
        skipped_classes: meta.skipped_classes,
    })
}
