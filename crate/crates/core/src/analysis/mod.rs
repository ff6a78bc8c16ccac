//! Attention statistics, heatmaps, branch-weight ranking and ablation runs.

mod ablation;
mod filters;
mod heatmap;
mod ranking;
mod stats;

pub use ablation::{
    ablation_csv, ablation_table, fusion_study, mask_study, published_reference, run_ablation, AblationRow,
    AblationSpec, AblationVariant, PublishedReference,
};
pub use filters::{highpass, highpass_with, pearson, FilterKernel, Plane};
pub use heatmap::{attention_heatmap, diverging, export_heatmaps, feature_heatmap, hot};
pub use ranking::{compare_captures, rank_branch_weights, rank_captures, BranchRanking, RankedCapture};
pub use stats::{
    attention_stats, attention_table_csv, AttentionProbe, AttentionRecord, BlockCapture, Construction,
    SyntheticAttention,
};
