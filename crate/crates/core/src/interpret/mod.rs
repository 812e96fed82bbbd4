//! Grad-CAM heatmaps, exact t-SNE and cluster-quality scoring.

mod gradcam;
mod tsne;

pub use gradcam::{grad_cam, jet, Heatmap};
pub use tsne::{silhouette, tsne, tsne_keyed, write_projection, Projection, TsneOptions};
