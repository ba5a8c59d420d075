//! Layer-graph networks: layer specs, parameter layout, forward and
//! reverse-mode backward passes.

pub mod batchnorm;
mod graph;
pub mod loss;
mod params;
mod spec;

pub use batchnorm::{batch_norm_backward, batch_norm_forward, BnCache, BnMode, RunningStats};
pub use graph::{Batch, ForwardPass, Mode, Network};
pub use params::{init_params, Layout, ParamVector, Segment, SegmentRole};
pub use spec::{
    Activation, LayerSpec, LossKind, NetworkSpec, SkipEdge, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
    DEFAULT_LEAKY_SLOPE,
};
