//! Declarative architectures compiled into parameterized layer graphs:
//! ResNet-50, the EfficientNet family, the metadata FNN and the fusion model.
//!
//! Every tensor lives in a [`ParamStore`] under a dotted name. Image
//! branches use unprefixed names (`stem.conv.weight`, `stage3.block1...`),
//! the metadata branch `fnn.*` and the fusion head `head.*`, so a backbone
//! checkpoint loads by name into any model sharing that backbone.

mod fusion;
mod graph;
mod params;
mod spec;
mod zoo;

pub use fusion::{build_fusion, FusionModel, FusionPass, Part, Selector, CLASSES, FNN_HIDDEN, HEAD_HIDDEN};
pub use graph::{Block, BnParams, ConvBn, DenseParams, GraphPass, ModelGraph, SeParams, Stage, StatUpdate};
pub use params::{CountMode, ParamCount, ParamId, ParamRole, ParamStore, Parameter};
pub use spec::{BlockKind, InputSpec, ScalingConfig, StageSpec};
pub use zoo::{
    architecture_names, build_classifier, build_efficientnet, build_efficientnet_features, build_fnn,
    build_image_features, build_mbconv, build_bottleneck, build_resnet50, build_resnet50_features, DROP_CONNECT_SURVIVAL, EFFICIENTNET_BASE,
    RESNET_DROPOUT, SE_RATIO,
};
