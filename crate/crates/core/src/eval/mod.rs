//! Layout statistics, likelihood-based verification and corpus analyses.

mod analysis;
mod attention;
mod stats;

pub use analysis::{
    analogy, category_embeddings, chamfer_distance, flip_lr, flip_ud, nearest_neighbors, ngram_stats, verify_flips,
    FlipScores,
};
pub use attention::{attention_records, export_attention, AttentionExport, AttentionRecord};
pub use stats::{coverage, iou, layout_stats, mean_stats, overlap, LayoutStats, DEFAULT_GRID};
