//! Declarative feed-forward graphs with shape inference.
//!
//! A [`ModelGraph`] is a DAG of [`LayerSpec`]s. After [`ModelGraph::validate`]
//! every layer has an inferred [`TensorShape`] and the graph carries a fixed
//! topological order that both the reference engine and the partitioner use.
//!
//! Graphs containing a [`LayerKind::TemporalPyramid`] are *sequence* graphs:
//! layers upstream of the pyramid run once per frame, layers downstream run
//! once per inference over a clip of frames.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod zoo;

pub use zoo::{build_model, build_model_with, BuildOptions, ModelName};

/// Ordered tensor extents, row-major. Images are `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape extents must be >= 1, got {dims:?}"
            )));
        }
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(s: TensorShape) -> Self {
        s.0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        out_size: usize,
    },
    Conv2D {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    BatchNorm,
    #[serde(rename = "relu")]
    ReLU,
    Softmax,
    Concat,
    TemporalPyramid {
        levels: u32,
    },
    FlowStack {
        window_len: usize,
    },
    Source {
        shape: TensorShape,
    },
    Sink,
}

impl LayerKind {
    /// Layers that carry trainable parameters.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::FullyConnected { .. } | LayerKind::Conv2D { .. } | LayerKind::BatchNorm
        )
    }

    /// Elementwise layers that can follow a producer without changing its
    /// partitioning.
    pub fn is_elementwise(&self) -> bool {
        matches!(self, LayerKind::ReLU | LayerKind::BatchNorm)
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Conv2D { .. } => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::BatchNorm => "norm",
            LayerKind::ReLU => "relu",
            LayerKind::Softmax => "softmax",
            LayerKind::Concat => "concat",
            LayerKind::TemporalPyramid { .. } => "pyramid",
            LayerKind::FlowStack { .. } => "flow",
            LayerKind::Source { .. } => "source",
            LayerKind::Sink => "sink",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub weights_seed: u64,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights_seed: 0,
        }
    }
}

/// Same-padding amount before the first row/column for a given extent.
pub fn same_pad(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Infers the output shape of `layer` from its input shapes.
pub fn shape_inference(layer: &LayerSpec, in_shapes: &[TensorShape]) -> Result<TensorShape> {
    let err = |reason: String| Error::Shape {
        layer: layer.name.clone(),
        reason,
    };
    if let LayerKind::Source { shape } = &layer.kind {
        return Ok(shape.clone());
    }
    let first = in_shapes
        .first()
        .ok_or_else(|| err("layer has no input shapes".into()))?;
    let rank3 = |s: &TensorShape| -> Result<(usize, usize, usize)> {
        match s.dims() {
            [h, w, c] => Ok((*h, *w, *c)),
            d => Err(err(format!("expected rank-3 input, got {d:?}"))),
        }
    };
    let single = || -> Result<()> {
        if in_shapes.len() != 1 {
            return Err(err(format!("expected 1 input, got {}", in_shapes.len())));
        }
        Ok(())
    };
    let shape = match &layer.kind {
        LayerKind::Source { .. } => unreachable!(),
        LayerKind::FullyConnected { out_size } => {
            single()?;
            vec![*out_size]
        }
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            single()?;
            let (h, w, _) = rank3(first)?;
            if *stride == 0 {
                return Err(err("stride must be >= 1".into()));
            }
            match padding {
                Padding::Same => {
                    let (oh, _) = same_pad(h, *kernel_h, *stride);
                    let (ow, _) = same_pad(w, *kernel_w, *stride);
                    vec![oh, ow, *filters]
                }
                Padding::Valid => {
                    if *kernel_h > h || *kernel_w > w {
                        return Err(err(format!(
                            "kernel {kernel_h}x{kernel_w} larger than input {h}x{w}"
                        )));
                    }
                    vec![(h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1, *filters]
                }
            }
        }
        LayerKind::MaxPool { window, stride } => {
            single()?;
            let (h, w, c) = rank3(first)?;
            if *window > h || *window > w || *stride == 0 {
                return Err(err(format!("pool window {window} exceeds input {h}x{w}")));
            }
            vec![(h - window) / stride + 1, (w - window) / stride + 1, c]
        }
        LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::Softmax | LayerKind::Sink => {
            single()?;
            first.dims().to_vec()
        }
        LayerKind::Concat => {
            let rank = first.rank();
            let mut axis0 = 0;
            for s in in_shapes {
                if s.rank() != rank || s.dims()[1..] != first.dims()[1..] {
                    return Err(err(format!(
                        "concat inputs disagree off the concat axis: {first} vs {s}"
                    )));
                }
                axis0 += s.dims()[0];
            }
            let mut d = first.dims().to_vec();
            d[0] = axis0;
            d
        }
        LayerKind::TemporalPyramid { levels } => {
            single()?;
            if *levels == 0 || *levels > 16 {
                return Err(err(format!("pyramid levels must be in 1..=16, got {levels}")));
            }
            match first.dims() {
                [d] => vec![(1usize << levels) - 1, *d],
                d => return Err(err(format!("pyramid expects per-frame vectors, got {d:?}"))),
            }
        }
        LayerKind::FlowStack { window_len } => {
            single()?;
            let (h, w, _) = rank3(first)?;
            if *window_len == 0 {
                return Err(err("flow window must be >= 1".into()));
            }
            vec![h, w, 2 * window_len]
        }
    };
    TensorShape::new(shape).map_err(|e| err(e.to_string()))
}

/// Execution rate of a layer in a sequence graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rate {
    /// Runs once per recorded frame; `lookahead` extra future frames are
    /// consumed (a flow stack over `w` pairs looks `w` frames ahead).
    PerFrame { lookahead: usize },
    /// Runs once per inference (downstream of a temporal pyramid).
    PerInference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelGraph {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(skip)]
    shapes: BTreeMap<String, TensorShape>,
    #[serde(skip)]
    order: Vec<String>,
    #[serde(skip)]
    rates: BTreeMap<String, Rate>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.seed == other.seed
            && self.layers == other.layers
            && self.inputs == other.inputs
            && self.outputs == other.outputs
    }
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            layers: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            shapes: BTreeMap::new(),
            order: Vec::new(),
            rates: BTreeMap::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a layer; sources and sinks are registered as graph inputs and
    /// outputs. The layer's weight seed is its 1-based declaration index.
    pub fn push(&mut self, mut layer: LayerSpec) -> &mut Self {
        if layer.weights_seed == 0 {
            layer.weights_seed = self.layers.len() as u64 + 1;
        }
        match layer.kind {
            LayerKind::Source { .. } => self.inputs.push(layer.name.clone()),
            LayerKind::Sink => self.outputs.push(layer.name.clone()),
            _ => {}
        }
        self.layers.push(layer);
        self
    }

    pub fn is_validated(&self) -> bool {
        !self.order.is_empty() && self.shapes.len() == self.layers.len()
    }

    /// Checks structure, fixes a deterministic topological order and infers
    /// every shape.
    pub fn validate(mut self) -> Result<Self> {
        if self.layers.is_empty() {
            return Err(Error::Graph("graph has no layers".into()));
        }
        let mut index = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.name.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let mut sources = Vec::new();
        for l in &self.layers {
            for inp in &l.inputs {
                if !index.contains_key(inp) {
                    return Err(Error::DanglingInput {
                        layer: l.name.clone(),
                        input: inp.clone(),
                    });
                }
            }
            match l.kind {
                LayerKind::Source { .. } => {
                    if !l.inputs.is_empty() {
                        return Err(Error::Graph(format!("source `{}` has inputs", l.name)));
                    }
                    sources.push(l.name.clone());
                }
                _ if l.inputs.is_empty() => {
                    return Err(Error::Graph(format!("layer `{}` has no inputs", l.name)));
                }
                _ => {}
            }
        }
        if sources.is_empty() {
            return Err(Error::Graph("graph has no source".into()));
        }
        for o in &self.outputs {
            if !index.contains_key(o) {
                return Err(Error::Graph(format!("unknown output `{o}`")));
            }
        }
        self.inputs = sources;
        if self.outputs.is_empty() {
            self.outputs = self
                .layers
                .iter()
                .filter(|l| matches!(l.kind, LayerKind::Sink))
                .map(|l| l.name.clone())
                .collect();
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            if l.weights_seed == 0 {
                l.weights_seed = i as u64 + 1;
            }
        }

        // Kahn's algorithm, ties broken by declaration order.
        let n = self.layers.len();
        let mut indeg = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, l) in self.layers.iter().enumerate() {
            for inp in &l.inputs {
                let j = index[inp];
                indeg[i] += 1;
                consumers[j].push(i);
            }
        }
        let mut heap: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = heap.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(Error::Cycle(self.layers[stuck].name.clone()));
        }

        let mut shapes: BTreeMap<String, TensorShape> = BTreeMap::new();
        let mut rates = BTreeMap::new();
        for &i in &order {
            let l = &self.layers[i];
            let ins: Vec<TensorShape> = l.inputs.iter().map(|x| shapes[x.as_str()].clone()).collect();
            let shape = shape_inference(l, &ins)?;
            let rate = infer_rate(l, &rates)?;
            shapes.insert(l.name.clone(), shape);
            rates.insert(l.name.clone(), rate);
        }
        self.order = order.iter().map(|&i| self.layers[i].name.clone()).collect();
        self.shapes = shapes;
        self.rates = rates;
        self.index = index;
        Ok(self)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        match self.index.get(name) {
            Some(&i) => self.layers.get(i),
            None => self.layers.iter().find(|l| l.name == name),
        }
    }

    pub fn shape(&self, name: &str) -> Option<&TensorShape> {
        self.shapes.get(name)
    }

    pub fn shapes(&self) -> &BTreeMap<String, TensorShape> {
        &self.shapes
    }

    /// Layer names in the fixed topological order.
    pub fn topo_order(&self) -> &[String] {
        &self.order
    }

    pub fn topo_index(&self, name: &str) -> Option<usize> {
        self.order.iter().position(|n| n == name)
    }

    pub fn rate(&self, name: &str) -> Option<Rate> {
        self.rates.get(name).copied()
    }

    /// Whether the graph aggregates frames through a temporal pyramid.
    pub fn is_sequence(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::TemporalPyramid { .. }))
    }

    /// Layers that read `name`'s output, in topological order.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.order
            .iter()
            .filter_map(|n| self.layer(n))
            .filter(|l| l.inputs.iter().any(|i| i == name))
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ModelGraph = serde_json::from_str(s)?;
        g.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn infer_rate(layer: &LayerSpec, rates: &BTreeMap<String, Rate>) -> Result<Rate> {
    let err = |reason: &str| Error::Shape {
        layer: layer.name.clone(),
        reason: reason.to_string(),
    };
    let ins: Vec<Rate> = layer.inputs.iter().map(|i| rates[i]).collect();
    Ok(match &layer.kind {
        LayerKind::Source { .. } => Rate::PerFrame { lookahead: 0 },
        LayerKind::TemporalPyramid { .. } => match ins[0] {
            Rate::PerFrame { .. } => Rate::PerInference,
            Rate::PerInference => return Err(err("pyramid input must be per-frame")),
        },
        LayerKind::FlowStack { window_len } => match ins[0] {
            Rate::PerFrame { lookahead } => Rate::PerFrame {
                lookahead: lookahead + window_len,
            },
            Rate::PerInference => return Err(err("flow stack input must be per-frame")),
        },
        _ => {
            let per_inf = ins.iter().filter(|r| **r == Rate::PerInference).count();
            if per_inf == ins.len() {
                Rate::PerInference
            } else if per_inf == 0 {
                let lookahead = ins
                    .iter()
                    .map(|r| match r {
                        Rate::PerFrame { lookahead } => *lookahead,
                        Rate::PerInference => 0,
                    })
                    .max()
                    .unwrap_or(0);
                Rate::PerFrame { lookahead }
            } else {
                return Err(err("inputs mix per-frame and per-inference rates"));
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: &[usize]) -> TensorShape {
        TensorShape::new(d.to_vec()).unwrap()
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

    #[test]
    fn conv_same_padding_keeps_spatial_dims() {
        let l = LayerSpec::new("c", conv(256, 5), &["x"]);
        let out = shape_inference(&l, &[shape(&[16, 12, 3])]).unwrap();
        assert_eq!(out.dims(), &[16, 12, 256]);
    }

    #[test]
    fn fc_flattens_any_input() {
        let l = LayerSpec::new("fc", LayerKind::FullyConnected { out_size: 8192 }, &["x"]);
        let out = shape_inference(&l, &[shape(&[2, 15, 256])]).unwrap();
        assert_eq!(out.dims(), &[8192]);
    }

    #[test]
    fn maxpool_floor_divides() {
        let l = LayerSpec::new("p", LayerKind::MaxPool { window: 2, stride: 2 }, &["x"]);
        let out = shape_inference(&l, &[shape(&[16, 12, 256])]).unwrap();
        assert_eq!(out.dims(), &[8, 6, 256]);
        let out = shape_inference(&l, &[shape(&[5, 3, 1])]).unwrap();
        assert_eq!(out.dims(), &[2, 1, 1]);
    }

    #[test]
    fn pyramid_rows() {
        let l = LayerSpec::new("p", LayerKind::TemporalPyramid { levels: 4 }, &["x"]);
        assert_eq!(
            shape_inference(&l, &[shape(&[256])]).unwrap().dims(),
            &[15, 256]
        );
        assert!(shape_inference(&l, &[shape(&[4, 4, 2])]).is_err());
    }

    #[test]
    fn concat_sums_leading_axis() {
        let l = LayerSpec::new("c", LayerKind::Concat, &["a", "b"]);
        let out = shape_inference(&l, &[shape(&[15, 256]), shape(&[15, 256])]).unwrap();
        assert_eq!(out.dims(), &[30, 256]);
        assert!(shape_inference(&l, &[shape(&[15, 256]), shape(&[15, 128])]).is_err());
    }

    #[test]
    fn rank_and_kernel_errors() {
        let l = LayerSpec::new("c", conv(4, 3), &["x"]);
        assert!(matches!(
            shape_inference(&l, &[shape(&[10])]),
            Err(Error::Shape { .. })
        ));
        let v = LayerSpec::new(
            "v",
            LayerKind::Conv2D {
                filters: 1,
                kernel_h: 7,
                kernel_w: 7,
                stride: 1,
                padding: Padding::Valid,
            },
            &["x"],
        );
        assert!(shape_inference(&v, &[shape(&[5, 5, 1])]).is_err());
    }

    #[test]
    fn flow_stack_channels() {
        let l = LayerSpec::new("f", LayerKind::FlowStack { window_len: 10 }, &["x"]);
        let out = shape_inference(&l, &[shape(&[16, 12, 3])]).unwrap();
        assert_eq!(out.dims(), &[16, 12, 20]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(TensorShape::new(vec![3, 0]).is_err());
        assert!(TensorShape::new(vec![]).is_err());
    }

    #[test]
    fn self_loop_is_cycle() {
        let mut g = ModelGraph::new("loop", 1);
        g.push(LayerSpec::new(
            "x",
            LayerKind::Source { shape: shape(&[4]) },
            &[],
        ));
        g.push(LayerSpec::new("r", LayerKind::ReLU, &["x", "r"]));
        assert!(matches!(g.validate(), Err(Error::Cycle(_))));
    }

    #[test]
    fn empty_graph_rejected() {
        assert!(ModelGraph::new("empty", 1).validate().is_err());
    }

    #[test]
    fn dangling_reference_rejected() {
        let mut g = ModelGraph::new("d", 1);
        g.push(LayerSpec::new("x", LayerKind::Source { shape: shape(&[4]) }, &[]));
        g.push(LayerSpec::new("r", LayerKind::ReLU, &["nope"]));
        assert!(matches!(g.validate(), Err(Error::DanglingInput { .. })));
    }

    #[test]
    fn shape_failure_names_layer() {
        let mut g = ModelGraph::new("bad", 1);
        g.push(LayerSpec::new("x", LayerKind::Source { shape: shape(&[4]) }, &[]));
        g.push(LayerSpec::new("c", conv(2, 3), &["x"]));
        match g.validate() {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rates_follow_pyramid() {
        let mut g = ModelGraph::new("seq", 1);
        g.push(LayerSpec::new("x", LayerKind::Source { shape: shape(&[4, 4, 1]) }, &[]));
        g.push(LayerSpec::new("f", LayerKind::FlowStack { window_len: 3 }, &["x"]));
        g.push(LayerSpec::new("fc", LayerKind::FullyConnected { out_size: 5 }, &["f"]));
        g.push(LayerSpec::new("p", LayerKind::TemporalPyramid { levels: 2 }, &["fc"]));
        g.push(LayerSpec::new("o", LayerKind::Sink, &["p"]));
        let g = g.validate().unwrap();
        assert_eq!(g.rate("fc"), Some(Rate::PerFrame { lookahead: 3 }));
        assert_eq!(g.rate("o"), Some(Rate::PerInference));
        assert!(g.is_sequence());
    }
}
