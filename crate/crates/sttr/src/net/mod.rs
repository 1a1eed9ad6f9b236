//! Stream networks: architecture configuration, assembly, training,
//! evaluation, fusion, parameter accounting, attention extraction, and
//! checkpointing.

mod checkpoint;
mod config;
mod stream;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    AdjacencyKind, LayerSpec, NetworkConfig, SpatialOp, StreamKind, TemporalOp, TrainConfig,
};
pub use stream::{
    average_record, build_stream, count_parameters, extract_attention_maps, AttentionMaps,
    AttentionSummary, ParamReport, StreamModel,
};
pub use train::{
    add_scores, evaluate, fuse_streams, metrics_from_scores, train, EpochStats, Evaluation,
    Example, History,
};
