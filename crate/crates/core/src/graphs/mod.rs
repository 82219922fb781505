//! Segment graphs and the graph neural networks that embed their nodes.

mod gnn;
mod graph;
mod train;

pub use gnn::{
    soft_cross_entropy, GatLayer, GcnLayer, GnnConfig, GnnNet, GnnOutput, LayerChoice, Topology, Variant,
    ATTENTION_SLOPE,
};
pub use graph::{build_graph, knn_edges, SegmentGraph};
pub use train::{train_gnn, GnnModel, GnnTrainConfig, GnnTrainReport};
