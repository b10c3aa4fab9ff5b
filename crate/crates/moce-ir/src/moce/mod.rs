//! Mixture-of-complexity-experts layer: nested experts, shared expert,
//! Sobel-guided image-level routing, modulation and merge.

pub mod attention;
pub mod layer;
pub mod params;
pub mod spec;

pub use attention::TsaParams;
pub use layer::{
    argmax_lowest, effective_window, ExpertParams, MoceLayer, RouteMode, RoutingNodes,
    RoutingTrace,
};
pub use params::{Binder, Init, Linear, Norm, ParamId, ParamSet};
pub use spec::{expert_param_shapes, expert_specs, BiasNorm, ExpertSpec, MoceLayerConfig, ScalingMode};
