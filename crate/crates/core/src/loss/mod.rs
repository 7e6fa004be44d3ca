//! In-distribution and OoD cluster construction plus the training objective
//! `L = L_cls + lambda * L_d`.

pub mod clusters;
pub mod kmeans;
pub mod objective;

pub use clusters::{
    build_in_clusters, build_ood_clusters_by_predicted_class, load_clusters, save_clusters,
    ClusterKind, ClusterSet,
};
pub use kmeans::{build_ood_clusters_kmeans, KMeansFit};
pub use objective::{
    bce, distance, loss_cls, loss_cls_batch, loss_d, select_nearest_ood, selection_size,
    total_loss, InSample, LossBreakdown, LossFlags, Objective, OodTarget, TotalLoss,
    WoodHyperparams,
};
