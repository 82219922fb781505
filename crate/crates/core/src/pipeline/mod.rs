//! End-to-end runs over the library stages, and a synthetic data source.

mod stages;
pub mod synthetic;

pub use stages::{
    chip_graph, fit_fcm, model_tag, parse_segment_point, project_chips, project_segments, segment_point_id, sweep,
    unet_sample, FeatureStage, GraphStage, PipelineConfig, SweepAxis, Timings, TrainSummary,
};
pub use synthetic::{synthetic_tile, SyntheticConfig, SyntheticTile, MATERIALS};
