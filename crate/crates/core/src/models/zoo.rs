use super::graph::{Block, GraphBuilder, ModelGraph, SeParams};
use super::spec::{BlockKind, InputSpec, ScalingConfig, StageSpec};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::PoolGeometry;

/// Residual-branch survival probability inside MBConv blocks.
pub const DROP_CONNECT_SURVIVAL: f64 = 0.8;
/// Dropout before the ResNet-50 classifier.
pub const RESNET_DROPOUT: f64 = 0.5;
/// Squeeze width relative to a block's input channels.
pub const SE_RATIO: f64 = 0.25;

const RESNET_REPEATS: [usize; 4] = [3, 4, 6, 3];
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET_EXPANSION: usize = 4;

/// EfficientNet-B0 base table: (expand ratio, kernel, stride, channels, repeats).
pub const EFFICIENTNET_BASE: [(usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
];
const EFFICIENTNET_STEM: usize = 32;
const EFFICIENTNET_TOP: usize = 1280;

/// What follows the convolutional trunk.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Head {
    Classifier { classes: usize, dropout: f64 },
    Features,
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("a classifier needs at least 2 classes, got {classes}")));
    }
    Ok(())
}

fn finish_head(b: &mut GraphBuilder, head: Head, width: usize) -> Result<()> {
    match head {
        Head::Classifier { classes, dropout } => {
            b.begin_stage(
                "classifier",
                StageSpec::new(BlockKind::Classifier, 1, 1, classes, 1).with_dropout(dropout),
            )?;
            let dense = b.dense("classifier.dense", width, classes);
            b.push(Block::Classifier { dropout, dense });
        }
        Head::Features => {
            b.begin_stage("pool", StageSpec::new(BlockKind::GlobalPool, 1, 1, width, 1))?;
            b.push(Block::GlobalPool);
        }
    }
    Ok(())
}

fn resnet50(head: Head, input_channels: usize, resolution: usize, seed: u64) -> Result<ModelGraph> {
    if input_channels == 0 {
        return Err(Error::Config("input channels must be positive".into()));
    }
    let input = InputSpec::Image { channels: input_channels, resolution };
    let name = match head {
        Head::Classifier { .. } => "resnet50",
        Head::Features => "resnet50-features",
    };
    let mut b = GraphBuilder::new(name, input, seed);
    b.begin_stage("stem", StageSpec::new(BlockKind::StemConv, 7, 2, 64, 1))?;
    let stem = b.conv_bn("stem", input_channels, 64, 7, 2, 1, Activation::Relu);
    b.push(Block::Conv(stem));
    b.begin_stage("stem.pool", StageSpec::new(BlockKind::MaxPool, 3, 2, 64, 1))?;
    b.push(Block::MaxPool(PoolGeometry::square(3, 2, 1)));

    let mut in_ch = 64;
    for (s, (&repeats, &width)) in RESNET_REPEATS.iter().zip(&RESNET_WIDTHS).enumerate() {
        let out_ch = width * RESNET_EXPANSION;
        let stage_stride = if s == 0 { 1 } else { 2 };
        let label = format!("stage{}", s + 1);
        b.begin_stage(
            &label,
            StageSpec::new(BlockKind::ResnetBottleneck, 3, stage_stride, out_ch, repeats),
        )?;
        for i in 0..repeats {
            let p = format!("{label}.block{i}");
            let stride = if i == 0 { stage_stride } else { 1 };
            let conv1 = b.conv_bn(&format!("{p}.conv1"), in_ch, width, 1, 1, 1, Activation::Relu);
            let conv2 = b.conv_bn(&format!("{p}.conv2"), width, width, 3, stride, 1, Activation::Relu);
            let conv3 = b.conv_bn(&format!("{p}.conv3"), width, out_ch, 1, 1, 1, Activation::Identity);
            let shortcut = (stride != 1 || in_ch != out_ch)
                .then(|| b.conv_bn(&format!("{p}.shortcut"), in_ch, out_ch, 1, stride, 1, Activation::Identity));
            b.push(Block::Bottleneck { conv1, conv2, conv3, shortcut });
            in_ch = out_ch;
        }
    }
    finish_head(&mut b, head, in_ch)?;
    b.finish()
}

/// ResNet-50 classifier at the nominal 224 resolution.
pub fn build_resnet50(classes: usize, input_channels: usize, seed: u64) -> Result<ModelGraph> {
    check_classes(classes)?;
    resnet50(Head::Classifier { classes, dropout: RESNET_DROPOUT }, input_channels, 224, seed)
}

/// Headless ResNet-50 emitting the pooled 2048-wide feature vector.
pub fn build_resnet50_features(input_channels: usize, resolution: usize, seed: u64) -> Result<ModelGraph> {
    resnet50(Head::Features, input_channels, resolution, seed)
}

fn efficientnet(scaling: ScalingConfig, head: Head, seed: u64) -> Result<ModelGraph> {
    scaling.validate()?;
    let input = InputSpec::Image { channels: 3, resolution: scaling.resolution };
    let name = match head {
        Head::Classifier { .. } => "efficientnet",
        Head::Features => "efficientnet-features",
    };
    let mut b = GraphBuilder::new(name, input, seed);
    let stem_ch = scaling.round_filters(EFFICIENTNET_STEM);
    b.begin_stage("stem", StageSpec::new(BlockKind::StemConv, 3, 2, stem_ch, 1))?;
    let stem = b.conv_bn("stem", 3, stem_ch, 3, 2, 1, Activation::Swish);
    b.push(Block::Conv(stem));

    let mut in_ch = stem_ch;
    for (s, &(ratio, kernel, stage_stride, channels, repeats)) in EFFICIENTNET_BASE.iter().enumerate() {
        let out_ch = scaling.round_filters(channels);
        let repeats = scaling.round_repeats(repeats);
        let label = format!("stage{}", s + 1);
        b.begin_stage(&label, StageSpec::mbconv(ratio, kernel, stage_stride, out_ch, repeats))?;
        for i in 0..repeats {
            let p = format!("{label}.block{i}");
            let stride = if i == 0 { stage_stride } else { 1 };
            let expanded = in_ch * ratio;
            let expand = (ratio != 1)
                .then(|| b.conv_bn(&format!("{p}.expand"), in_ch, expanded, 1, 1, 1, Activation::Swish));
            let depthwise = b.conv_bn(
                &format!("{p}.depthwise"),
                expanded,
                expanded,
                kernel,
                stride,
                expanded,
                Activation::Swish,
            );
            let squeeze = ((in_ch as f64 * SE_RATIO).round() as usize).max(1);
            let se = SeParams {
                reduce: b.dense(&format!("{p}.se.reduce"), expanded, squeeze),
                expand: b.dense(&format!("{p}.se.expand"), squeeze, expanded),
            };
            let project = b.conv_bn(&format!("{p}.project"), expanded, out_ch, 1, 1, 1, Activation::Identity);
            let skip = (stride == 1 && in_ch == out_ch).then_some(DROP_CONNECT_SURVIVAL);
            b.push(Block::MbConv { expand, depthwise, se, project, skip });
            in_ch = out_ch;
        }
    }

    let top_ch = scaling.round_filters(EFFICIENTNET_TOP);
    b.begin_stage("top", StageSpec::new(BlockKind::HeadConv, 1, 1, top_ch, 1))?;
    let top = b.conv_bn("top", in_ch, top_ch, 1, 1, 1, Activation::Swish);
    b.push(Block::Conv(top));
    finish_head(&mut b, head, top_ch)?;
    b.finish()
}

pub fn build_efficientnet(scaling: ScalingConfig, classes: usize, seed: u64) -> Result<ModelGraph> {
    check_classes(classes)?;
    efficientnet(scaling, Head::Classifier { classes, dropout: scaling.dropout_rate }, seed)
}

/// Headless EfficientNet emitting the pooled top-convolution features.
pub fn build_efficientnet_features(scaling: ScalingConfig, seed: u64) -> Result<ModelGraph> {
    efficientnet(scaling, Head::Features, seed)
}

fn dense_stack(
    name: &str,
    prefix: &str,
    input_dim: usize,
    hidden: &[usize],
    dropout_p: f64,
    classes: Option<usize>,
    seed: u64,
) -> Result<ModelGraph> {
    if input_dim == 0 {
        return Err(Error::Config("dense input width must be positive".into()));
    }
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::Config(format!("hidden widths must be a non-empty list of positive values, got {hidden:?}")));
    }
    let mut b = GraphBuilder::new(name, InputSpec::Vector { width: input_dim }, seed);
    let mut width = input_dim;
    for (i, &h) in hidden.iter().enumerate() {
        let p = format!("{prefix}.layer{i}");
        b.begin_stage(&p, StageSpec::new(BlockKind::DenseLayer, 1, 1, h, 1).with_dropout(dropout_p))?;
        let dense = b.dense(&format!("{p}.dense"), width, h);
        let bn = b.bn(&format!("{p}.bn"), h);
        b.push(Block::DenseLayer { dense, bn, dropout: dropout_p });
        width = h;
    }
    if let Some(classes) = classes {
        let p = format!("{prefix}.out");
        b.begin_stage(&p, StageSpec::new(BlockKind::Output, 1, 1, classes, 1))?;
        let dense = b.dense(&format!("{p}.dense"), width, classes);
        b.push(Block::Output { dense });
    }
    b.finish()
}

/// Feed-forward metadata branch emitting its last hidden vector.
pub fn build_fnn(input_dim: usize, hidden: &[usize], dropout_p: f64, seed: u64) -> Result<ModelGraph> {
    dense_stack("fnn", "fnn", input_dim, hidden, dropout_p, None, seed)
}

/// Fusion head: hidden dense layer then a `classes`-way softmax.
pub(crate) fn build_head(input_dim: usize, hidden: usize, dropout_p: f64, classes: usize, seed: u64) -> Result<ModelGraph> {
    dense_stack("head", "head", input_dim, &[hidden], dropout_p, Some(classes), seed)
}

/// Image branch by architecture name: `resnet50` or an EfficientNet preset
/// (`efficientnet-b0` … `efficientnet-b7`, `efficientnet-desk`).
pub fn build_image_features(arch: &str, resolution: Option<usize>, seed: u64) -> Result<ModelGraph> {
    if arch == "resnet50" {
        return build_resnet50_features(3, resolution.unwrap_or(224), seed);
    }
    let mut scaling = efficientnet_preset(arch)?;
    if let Some(r) = resolution {
        scaling.resolution = r;
    }
    build_efficientnet_features(scaling, seed)
}

/// Full classifier by architecture name.
pub fn build_classifier(arch: &str, classes: usize, seed: u64) -> Result<ModelGraph> {
    if arch == "resnet50" {
        return build_resnet50(classes, 3, seed);
    }
    build_efficientnet(efficientnet_preset(arch)?, classes, seed)
}

pub fn architecture_names() -> Vec<String> {
    std::iter::once("resnet50".to_string())
        .chain(ScalingConfig::PRESETS.iter().map(|p| format!("efficientnet-{p}")))
        .collect()
}

fn efficientnet_preset(arch: &str) -> Result<ScalingConfig> {
    arch.strip_prefix("efficientnet-")
        .and_then(ScalingConfig::preset)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown architecture {arch:?}; valid names: {}",
                architecture_names().join(", ")
            ))
        })
}

/// A single MBConv block as its own graph, for audits and gradient checks.
pub fn build_mbconv(
    in_channels: usize,
    expand_ratio: usize,
    kernel: usize,
    stride: usize,
    out_channels: usize,
    resolution: usize,
    seed: u64,
) -> Result<ModelGraph> {
    let spec = StageSpec::mbconv(expand_ratio, kernel, stride, out_channels, 1);
    let mut b = GraphBuilder::new("mbconv", InputSpec::Image { channels: in_channels, resolution }, seed);
    b.begin_stage("block", spec)?;
    let expanded = in_channels * expand_ratio;
    let expand = (expand_ratio != 1)
        .then(|| b.conv_bn("block.expand", in_channels, expanded, 1, 1, 1, Activation::Swish));
    let depthwise = b.conv_bn("block.depthwise", expanded, expanded, kernel, stride, expanded, Activation::Swish);
    let squeeze = ((in_channels as f64 * SE_RATIO).round() as usize).max(1);
    let se = SeParams {
        reduce: b.dense("block.se.reduce", expanded, squeeze),
        expand: b.dense("block.se.expand", squeeze, expanded),
    };
    let project = b.conv_bn("block.project", expanded, out_channels, 1, 1, 1, Activation::Identity);
    let skip = (stride == 1 && in_channels == out_channels).then_some(DROP_CONNECT_SURVIVAL);
    b.push(Block::MbConv { expand, depthwise, se, project, skip });
    b.finish()
}

/// A single ResNet bottleneck block (`width` inner channels, `4·width` out).
pub fn build_bottleneck(in_channels: usize, width: usize, stride: usize, resolution: usize, seed: u64) -> Result<ModelGraph> {
    let out_ch = width * RESNET_EXPANSION;
    let spec = StageSpec::new(BlockKind::ResnetBottleneck, 3, stride, out_ch, 1);
    let mut b = GraphBuilder::new("bottleneck", InputSpec::Image { channels: in_channels, resolution }, seed);
    b.begin_stage("block", spec)?;
    let conv1 = b.conv_bn("block.conv1", in_channels, width, 1, 1, 1, Activation::Relu);
    let conv2 = b.conv_bn("block.conv2", width, width, 3, stride, 1, Activation::Relu);
    let conv3 = b.conv_bn("block.conv3", width, out_ch, 1, 1, 1, Activation::Identity);
    let shortcut = (stride != 1 || in_channels != out_ch)
        .then(|| b.conv_bn("block.shortcut", in_channels, out_ch, 1, stride, 1, Activation::Identity));
    b.push(Block::Bottleneck { conv1, conv2, conv3, shortcut });
    b.finish()
}
