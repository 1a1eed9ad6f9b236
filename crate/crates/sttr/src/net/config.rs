//! Stream architecture and training-run configuration.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::graph::PartitionStrategy;
use crate::layers::{AgcnOptions, ValueDim};

/// Spatial operator of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialOp {
    Gcn,
    Agcn,
    Ssa,
    AugGcn,
}

/// Temporal operator of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalOp {
    Tcn,
    Tsa,
    AugTcn,
}

/// One layer of the stream: a spatial operator followed by a temporal one.
/// The temporal operator carries the stride.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub spatial: SpatialOp,
    pub temporal: TemporalOp,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub d_block: Option<usize>,
}

/// Which operators replace convolutions after the first `k` feature layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    /// Graph + temporal convolutions throughout.
    StGcn,
    /// Adaptive graph convolutions throughout.
    #[serde(rename = "agcn-1s")]
    Agcn1s,
    /// Spatial attention + temporal convolution.
    STr,
    /// Graph convolution + temporal attention.
    TTr,
    /// Adaptive graph convolution + temporal attention.
    TTrAgcn,
    /// Spatial and temporal attention in one stream.
    #[serde(rename = "st-tr-1s")]
    StTr1s,
    /// Conv/attention channel-split spatial layers.
    STrAugmented,
    /// Conv/attention channel-split temporal layers.
    TTrAugmented,
}

impl StreamKind {
    pub const ALL: [StreamKind; 8] = [
        StreamKind::StGcn,
        StreamKind::Agcn1s,
        StreamKind::STr,
        StreamKind::TTr,
        StreamKind::TTrAgcn,
        StreamKind::StTr1s,
        StreamKind::STrAugmented,
        StreamKind::TTrAugmented,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            StreamKind::StGcn => "st-gcn",
            StreamKind::Agcn1s => "agcn-1s",
            StreamKind::STr => "s-tr",
            StreamKind::TTr => "t-tr",
            StreamKind::TTrAgcn => "t-tr-agcn",
            StreamKind::StTr1s => "st-tr-1s",
            StreamKind::STrAugmented => "s-tr-augmented",
            StreamKind::TTrAugmented => "t-tr-augmented",
        }
    }

    /// Operators used from layer k+1 on (the first k are always GCN+TCN).
    fn replacement_ops(&self) -> (SpatialOp, TemporalOp) {
        match self {
            StreamKind::StGcn => (SpatialOp::Gcn, TemporalOp::Tcn),
            StreamKind::Agcn1s => (SpatialOp::Agcn, TemporalOp::Tcn),
            StreamKind::STr => (SpatialOp::Ssa, TemporalOp::Tcn),
            StreamKind::TTr => (SpatialOp::Gcn, TemporalOp::Tsa),
            StreamKind::TTrAgcn => (SpatialOp::Agcn, TemporalOp::Tsa),
            StreamKind::StTr1s => (SpatialOp::Ssa, TemporalOp::Tsa),
            StreamKind::STrAugmented => (SpatialOp::AugGcn, TemporalOp::Tcn),
            StreamKind::TTrAugmented => (SpatialOp::Gcn, TemporalOp::AugTcn),
        }
    }

    /// The pure-convolution baselines keep their operators in every layer.
    fn is_baseline(&self) -> bool {
        matches!(self, StreamKind::StGcn | StreamKind::Agcn1s)
    }
}

/// Which graph the fixed adjacency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyKind {
    /// The skeleton topology, split by the partition strategy.
    Skeleton,
    /// A single normalized all-ones matrix (every joint sees every joint).
    FullyConnected,
}

/// Architecture of one stream. Defaults give the full-scale setup: 9 layers
/// of 64/128/256 channels with stride 2 where the width doubles, 8 heads,
/// 9-frame temporal kernels, spatial partitioning on 25 joints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub v: usize,
    pub t: usize,
    pub c_in: usize,
    pub classes: usize,
    /// Output channels per layer.
    pub channels: Vec<usize>,
    /// Temporal stride per layer; None = 2 wherever the width grows.
    pub strides: Option<Vec<usize>>,
    /// Temporal attention window per layer; None = unwindowed.
    pub d_blocks: Option<Vec<Option<usize>>>,
    /// Leading layers that always use GCN+TCN; 0 = attention from layer 1.
    pub k: usize,
    pub input_bn: bool,
    pub heads: usize,
    pub kernel_t: usize,
    pub strategy: PartitionStrategy,
    pub adjacency: AdjacencyKind,
    pub value_dim: ValueDim,
    pub drop_rate: f64,
    /// Width multiplier on the channel schedule (2 for joints+bones input).
    pub channel_multiplier: usize,
    pub agcn: AgcnOptions,
    /// Record attention maps during forward passes.
    pub capture: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            v: 25,
            t: 64,
            c_in: 3,
            classes: 60,
            channels: vec![64, 64, 64, 128, 128, 128, 256, 256, 256],
            strides: None,
            d_blocks: None,
            k: 3,
            input_bn: true,
            heads: 8,
            kernel_t: 9,
            strategy: PartitionStrategy::Spatial,
            adjacency: AdjacencyKind::Skeleton,
            value_dim: ValueDim::FullOutput,
            drop_rate: 0.1,
            channel_multiplier: 1,
            agcn: AgcnOptions::default(),
            capture: false,
        }
    }
}

impl NetworkConfig {
    /// Channel schedule with the width multiplier applied.
    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| c * self.channel_multiplier).collect()
    }

    /// Stride schedule: explicit, or 2 wherever the channel count grows.
    pub fn layer_strides(&self) -> Vec<usize> {
        match &self.strides {
            Some(s) => s.clone(),
            None => {
                let ch = &self.channels;
                (0..ch.len()).map(|i| if i > 0 && ch[i] > ch[i - 1] { 2 } else { 1 }).collect()
            }
        }
    }

    /// Expands the schedule into per-layer specs for the given stream kind.
    pub fn layer_specs(&self, kind: StreamKind) -> Result<Vec<LayerSpec>, ConfigError> {
        if self.channels.is_empty() {
            return Err(ConfigError("network needs at least one layer".into()));
        }
        if self.k > self.channels.len() {
            return Err(ConfigError(format!(
                "feature-extraction depth k={} exceeds the {} configured layers",
                self.k,
                self.channels.len()
            )));
        }
        if self.channel_multiplier == 0 {
            return Err(ConfigError("channel multiplier must be at least 1".into()));
        }
        let channels = self.scaled_channels();
        let strides = self.layer_strides();
        if strides.len() != channels.len() {
            return Err(ConfigError(format!(
                "{} strides configured for {} layers",
                strides.len(),
                channels.len()
            )));
        }
        if let Some(bad) = strides.iter().find(|&&s| s == 0) {
            return Err(ConfigError(format!("temporal stride must be at least 1, got {bad}")));
        }
        let d_blocks = match &self.d_blocks {
            None => vec![None; channels.len()],
            Some(d) if d.len() == channels.len() => d.clone(),
            Some(d) => {
                return Err(ConfigError(format!(
                    "{} d_block entries configured for {} layers",
                    d.len(),
                    channels.len()
                )))
            }
        };
        let mut specs = Vec::with_capacity(channels.len());
        let mut c_in = self.c_in;
        for (i, &c_out) in channels.iter().enumerate() {
            let (spatial, temporal) = if kind.is_baseline() || i >= self.k {
                kind.replacement_ops()
            } else {
                (SpatialOp::Gcn, TemporalOp::Tcn)
            };
            specs.push(LayerSpec {
                spatial,
                temporal,
                c_in,
                c_out,
                stride: strides[i],
                d_block: d_blocks[i],
            });
            c_in = c_out;
        }
        Ok(specs)
    }
}

/// Settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs where the rate drops by 10x; must be strictly increasing.
    pub drop_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One linear-warmup epoch; None = on exactly when the stream has
    /// adaptive graph-convolution layers.
    pub warmup: Option<bool>,
    /// Attention-logit column dropout, applied to every attention sublayer.
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 32,
            base_lr: 0.1,
            drop_epochs: vec![60, 90],
            momentum: 0.9,
            weight_decay: 0.0,
            warmup: None,
            drop_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError("batch size must be at least 1".into()));
        }
        if !self.drop_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(ConfigError(format!(
                "drop epochs must be strictly increasing, got {:?}",
                self.drop_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(ConfigError(format!(
                "attention drop rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        Ok(())
    }
}
