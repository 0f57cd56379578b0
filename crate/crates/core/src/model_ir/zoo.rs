//! Builders for the bundled networks.

use std::fmt;
use std::str::FromStr;

use super::{LayerKind, LayerSpec, ModelGraph, Padding, TensorShape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelName {
    TwoStream,
    AlexNet,
    Vgg16,
}

impl ModelName {
    pub const ALL: [ModelName; 3] = [ModelName::TwoStream, ModelName::AlexNet, ModelName::Vgg16];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::TwoStream => "two_stream",
            ModelName::AlexNet => "alexnet",
            ModelName::Vgg16 => "vgg16",
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stream" | "two-stream" => Ok(ModelName::TwoStream),
            "alexnet" => Ok(ModelName::AlexNet),
            "vgg16" => Ok(ModelName::Vgg16),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    /// Multiplier on channel and unit counts (rounded up, minimum 1).
    pub scale: f64,
    pub seed: u64,
    /// Two-stream only: use 4096/4096 dense layers instead of 8192/8192.
    pub reduced_dense: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            scale: 1.0,
            seed: 1,
            reduced_dense: false,
        }
    }
}

impl BuildOptions {
    pub fn new(scale: f64, seed: u64) -> Self {
        Self {
            scale,
            seed,
            ..Self::default()
        }
    }
}

/// Frames per flow stack in the two-stream network.
pub const FLOW_WINDOW: usize = 10;
/// Pyramid levels in the two-stream network.
pub const PYRAMID_LEVELS: u32 = 4;
/// Action classes of the two-stream classifier.
pub const TWO_STREAM_CLASSES: usize = 51;
/// ImageNet classes of the AlexNet and VGG16 classifiers.
pub const IMAGENET_CLASSES: usize = 1000;

pub fn build_model(name: &str, scale: f64) -> Result<ModelGraph> {
    let name: ModelName = name.parse()?;
    build_model_with(name, &BuildOptions::new(scale, 1))
}

pub fn build_model_with(name: ModelName, opts: &BuildOptions) -> Result<ModelGraph> {
    if !(opts.scale > 0.0) || !opts.scale.is_finite() {
        return Err(Error::InvalidScale(opts.scale));
    }
    let s = Scaler(opts.scale);
    let g = match name {
        ModelName::TwoStream => two_stream(&s, opts),
        ModelName::AlexNet => alexnet(&s, opts),
        ModelName::Vgg16 => vgg16(&s, opts),
    };
    g.validate()
}

struct Scaler(f64);

impl Scaler {
    fn units(&self, n: usize) -> usize {
        ((n as f64 * self.0).ceil() as usize).max(1)
    }

    /// Image extent scaled like channels but kept large enough for the
    /// network's pooling stack.
    fn extent(&self, n: usize, min: usize) -> usize {
        self.units(n).clamp(min.min(n), n)
    }
}

fn shape(d: &[usize]) -> TensorShape {
    TensorShape::new(d.to_vec()).expect("builder shapes are positive")
}

fn conv(filters: usize, k: usize) -> LayerKind {
    LayerKind::Conv2D {
        filters,
        kernel_h: k,
        kernel_w: k,
        stride: 1,
        padding: Padding::Same,
    }
}

fn fc(out_size: usize) -> LayerKind {
    LayerKind::FullyConnected { out_size }
}

fn pool(window: usize, stride: usize) -> LayerKind {
    LayerKind::MaxPool { window, stride }
}

fn stream(g: &mut ModelGraph, s: &Scaler, input: &str, suffix: char) {
    let n = |base: &str| format!("{base}_{suffix}");
    let filters = s.units(256);
    g.push(LayerSpec::new(n("conv1"), conv(filters, 5), &[input]));
    g.push(LayerSpec::new(n("relu1"), LayerKind::ReLU, &[&n("conv1")]));
    g.push(LayerSpec::new(n("conv2"), conv(filters, 3), &[&n("relu1")]));
    g.push(LayerSpec::new(n("relu2"), LayerKind::ReLU, &[&n("conv2")]));
    g.push(LayerSpec::new(n("pool2"), pool(2, 2), &[&n("relu2")]));
    g.push(LayerSpec::new(n("conv3"), conv(filters, 3), &[&n("pool2")]));
    g.push(LayerSpec::new(n("relu3"), LayerKind::ReLU, &[&n("conv3")]));
    g.push(LayerSpec::new(n("pool3"), pool(2, 2), &[&n("relu3")]));
    g.push(LayerSpec::new(format!("fc_1{suffix}"), fc(s.units(256)), &[&n("pool3")]));
    g.push(LayerSpec::new(
        format!("relu_fc_1{suffix}"),
        LayerKind::ReLU,
        &[&format!("fc_1{suffix}")],
    ));
}

fn two_stream(s: &Scaler, opts: &BuildOptions) -> ModelGraph {
    let mut g = ModelGraph::new("two_stream", opts.seed);
    g.push(LayerSpec::new(
        "frames",
        LayerKind::Source {
            shape: shape(&[16, 12, 3]),
        },
        &[],
    ));
    g.push(LayerSpec::new(
        "flow",
        LayerKind::FlowStack {
            window_len: FLOW_WINDOW,
        },
        &["frames"],
    ));
    stream(&mut g, s, "frames", 's');
    stream(&mut g, s, "flow", 't');
    let levels = PYRAMID_LEVELS;
    g.push(LayerSpec::new("pyramid_s", LayerKind::TemporalPyramid { levels }, &["relu_fc_1s"]));
    g.push(LayerSpec::new("pyramid_t", LayerKind::TemporalPyramid { levels }, &["relu_fc_1t"]));
    g.push(LayerSpec::new("concat", LayerKind::Concat, &["pyramid_s", "pyramid_t"]));
    let dense = if opts.reduced_dense { 4096 } else { 8192 };
    dense_head(&mut g, "concat", s.units(dense), TWO_STREAM_CLASSES);
    g
}

fn dense_head(g: &mut ModelGraph, input: &str, width: usize, classes: usize) {
    g.push(LayerSpec::new("fc_1", fc(width), &[input]));
    g.push(LayerSpec::new("relu_fc_1", LayerKind::ReLU, &["fc_1"]));
    g.push(LayerSpec::new("fc_2", fc(width), &["relu_fc_1"]));
    g.push(LayerSpec::new("relu_fc_2", LayerKind::ReLU, &["fc_2"]));
    g.push(LayerSpec::new("fc_3", fc(classes), &["relu_fc_2"]));
    g.push(LayerSpec::new("softmax", LayerKind::Softmax, &["fc_3"]));
    g.push(LayerSpec::new("output", LayerKind::Sink, &["softmax"]));
}

fn alexnet(s: &Scaler, opts: &BuildOptions) -> ModelGraph {
    let mut g = ModelGraph::new("alexnet", opts.seed);
    let hw = s.extent(227, 67);
    g.push(LayerSpec::new("data", LayerKind::Source { shape: shape(&[hw, hw, 3]) }, &[]));
    g.push(LayerSpec::new(
        "conv1",
        LayerKind::Conv2D {
            filters: s.units(96),
            kernel_h: 11,
            kernel_w: 11,
            stride: 4,
            padding: Padding::Valid,
        },
        &["data"],
    ));
    g.push(LayerSpec::new("relu1", LayerKind::ReLU, &["conv1"]));
    g.push(LayerSpec::new("norm1", LayerKind::BatchNorm, &["relu1"]));
    g.push(LayerSpec::new("pool1", pool(3, 2), &["norm1"]));
    g.push(LayerSpec::new("conv2", conv(s.units(256), 5), &["pool1"]));
    g.push(LayerSpec::new("relu2", LayerKind::ReLU, &["conv2"]));
    g.push(LayerSpec::new("norm2", LayerKind::BatchNorm, &["relu2"]));
    g.push(LayerSpec::new("pool2", pool(3, 2), &["norm2"]));
    g.push(LayerSpec::new("conv3", conv(s.units(384), 3), &["pool2"]));
    g.push(LayerSpec::new("relu3", LayerKind::ReLU, &["conv3"]));
    g.push(LayerSpec::new("conv4", conv(s.units(384), 3), &["relu3"]));
    g.push(LayerSpec::new("relu4", LayerKind::ReLU, &["conv4"]));
    g.push(LayerSpec::new("conv5", conv(s.units(256), 3), &["relu4"]));
    g.push(LayerSpec::new("relu5", LayerKind::ReLU, &["conv5"]));
    g.push(LayerSpec::new("pool5", pool(3, 2), &["relu5"]));
    dense_head(&mut g, "pool5", s.units(4096), IMAGENET_CLASSES);
    g
}

/// Conv block widths and depths of VGG16.
pub const VGG16_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

fn vgg16(s: &Scaler, opts: &BuildOptions) -> ModelGraph {
    let mut g = ModelGraph::new("vgg16", opts.seed);
    let hw = s.extent(224, 32);
    g.push(LayerSpec::new("data", LayerKind::Source { shape: shape(&[hw, hw, 3]) }, &[]));
    let mut prev = "data".to_string();
    for (b, &(width, depth)) in VGG16_BLOCKS.iter().enumerate() {
        let b = b + 1;
        for i in 1..=depth {
            let c = format!("conv{b}_{i}");
            let r = format!("relu{b}_{i}");
            g.push(LayerSpec::new(&c, conv(s.units(width), 3), &[&prev]));
            g.push(LayerSpec::new(&r, LayerKind::ReLU, &[&c]));
            prev = r;
        }
        let p = format!("pool{b}");
        g.push(LayerSpec::new(&p, pool(2, 2), &[&prev]));
        prev = p;
    }
    dense_head(&mut g, &prev, s.units(4096), IMAGENET_CLASSES);
    g
}
