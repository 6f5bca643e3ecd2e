//! Transformer-MoE model: configuration, routing, forward variants and checkpoints.

pub mod checkpoint;
mod config;
mod decode;
mod routing;
mod transformer;

pub use config::{ExpertKind, ModelConfig};
pub use decode::{DecodeStep, Decoder};
pub use routing::{route_topk, top_k, RouterParams, RoutingDecision};
pub use transformer::{
    param_specs, BoundParams, ForwardOptions, ForwardOutput, Inference, LayerTrace, MoeBlockOutput, MoeModel,
    ParamStore, RenormalizedOutput, Token,
};

#[cfg(test)]
mod tests;
