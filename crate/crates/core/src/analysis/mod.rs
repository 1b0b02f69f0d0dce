//! Interpretability: attention atlases aggregated to category heatmaps,
//! group comparisons, item-embedding similarity, and test-time category
//! removal.

mod atlas;
mod heatmap;
mod spillover;

pub use atlas::{collect_attention, AttentionAtlas, UserAttention};
pub use heatmap::{
    aggregate_dense, aggregate_to_categories, category_labels, embedding_similarity,
    export_category_heatmap, export_heatmap, group_heatmaps, sign_agreement, structure_summary,
    CategoryHeatmap, GroupHeatmaps, StructureSummary, DISPLAY_THRESHOLD,
};
pub use spillover::{mape, spillover_change, spillover_experiment, SpilloverReport, SpilloverRow};

#[cfg(test)]
mod tests;
