//! Segment-pair similarity measures and the two evaluation protocols.

pub mod measures;
mod protocols;

pub use measures::{glcm_dissimilarity, lbp_similarity, sam, ssim, Patch, GLCM_LEVELS};
pub use protocols::{
    context_pairs, eval_context_aware, eval_feature_based, evaluate, feature_matches, pair_measures, render_table,
    EvalChip, EvalParams, Evaluation, Measures, MetricReport, Protocol, SegRef, SegmentView, CONTEXT_NEIGHBOURS,
};
