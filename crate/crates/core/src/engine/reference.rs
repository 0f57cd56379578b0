//! Single-process execution of a whole graph.
//!
//! Per-frame layers are evaluated for every frame that has enough lookahead.
//! Inference `k` of a sequence graph covers frames `[k*stride, k*stride+clip_len)`;
//! a pyramid fed by a layer with lookahead `a` pools that layer's values at
//! frames `[k*stride, k*stride + clip_len - a)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{eval_layer, eval_window};
use super::params::ModelParams;
use super::Tensor;
use crate::error::{Error, Result};
use crate::model_ir::{LayerKind, ModelGraph, Rate};

pub type Outputs = BTreeMap<String, Tensor>;

/// How a frame sequence is cut into inferences for sequence graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_len: usize,
    pub stride: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            clip_len: 16,
            stride: 1,
        }
    }
}

impl ClipSpec {
    pub fn new(clip_len: usize, stride: usize) -> Self {
        Self { clip_len, stride }
    }

    /// Number of complete inferences over `frames` frames.
    pub fn inferences(&self, frames: usize) -> usize {
        if frames < self.clip_len || self.stride == 0 {
            0
        } else {
            (frames - self.clip_len) / self.stride + 1
        }
    }

    /// Window length a pyramid uses over an input with the given lookahead.
    pub fn pyramid_len(&self, lookahead: usize) -> Result<usize> {
        if self.clip_len <= lookahead {
            return Err(Error::Dimension(format!(
                "clip of {} frames leaves no window after lookahead {lookahead}",
                self.clip_len
            )));
        }
        Ok(self.clip_len - lookahead)
    }
}

fn lookahead(graph: &ModelGraph, name: &str) -> usize {
    match graph.rate(name) {
        Some(Rate::PerFrame { lookahead }) => lookahead,
        _ => 0,
    }
}

type PerFrame<'g> = BTreeMap<&'g str, Vec<Option<Tensor>>>;
type PerInference<'g> = BTreeMap<&'g str, Vec<Tensor>>;

/// Every layer's value for every tag it produces. Per-frame layers are keyed
/// by frame tag, per-inference layers of sequence graphs by inference index.
pub type LayerTrace = BTreeMap<String, BTreeMap<u64, Tensor>>;

fn evaluate<'g>(
    graph: &'g ModelGraph,
    params: &ModelParams,
    sources: &BTreeMap<String, Vec<Tensor>>,
    clip: ClipSpec,
) -> Result<(PerFrame<'g>, PerInference<'g>, usize, usize)> {
    if !graph.is_validated() {
        return Err(Error::Graph("graph must be validated first".into()));
    }
    let mut frames = None;
    for s in &graph.inputs {
        let seq = sources.get(s).ok_or_else(|| Error::MissingInput(s.clone()))?;
        match frames {
            None => frames = Some(seq.len()),
            Some(f) if f != seq.len() => {
                return Err(Error::Dimension("sources differ in frame count".into()))
            }
            _ => {}
        }
    }
    let f = frames.unwrap_or(0);

    let mut per_frame: BTreeMap<&str, Vec<Option<Tensor>>> = BTreeMap::new();
    let mut per_inf: BTreeMap<&str, Vec<Tensor>> = BTreeMap::new();
    let sequence = graph.is_sequence();
    let k_max = if sequence { clip.inferences(f) } else { 0 };

    for name in graph.topo_order() {
        let layer = graph.layer(name).unwrap();
        let shape = graph.shape(name).unwrap();
        let at = |e: Error| match e {
            Error::Shape { .. } => e,
            other => Error::Shape {
                layer: name.clone(),
                reason: other.to_string(),
            },
        };
        match graph.rate(name).unwrap() {
            Rate::PerFrame { .. } => {
                let mut vals = Vec::with_capacity(f);
                for t in 0..f {
                    let v = match &layer.kind {
                        LayerKind::Source { shape: s } => {
                            let x = &sources[name][t];
                            if x.shape() != s {
                                return Err(at(Error::Dimension(format!(
                                    "frame {t} has shape {}, expected {s}",
                                    x.shape()
                                ))));
                            }
                            Some(x.clone())
                        }
                        LayerKind::FlowStack { window_len } => {
                            let src = &per_frame[layer.inputs[0].as_str()];
                            let items: Option<Vec<&Tensor>> = (t..=t + window_len)
                                .map(|i| src.get(i).and_then(|x| x.as_ref()))
                                .collect();
                            match items {
                                Some(items) => Some(eval_window(&layer.kind, &items).map_err(at)?),
                                None => None,
                            }
                        }
                        _ => {
                            let ins: Option<Vec<&Tensor>> = layer
                                .inputs
                                .iter()
                                .map(|i| per_frame[i.as_str()][t].as_ref())
                                .collect();
                            match ins {
                                Some(ins) => Some(
                                    eval_layer(&layer.kind, &ins, params.get(name)).map_err(at)?,
                                ),
                                None => None,
                            }
                        }
                    };
                    if let Some(v) = &v {
                        if v.shape() != shape && !matches!(layer.kind, LayerKind::Source { .. }) {
                            return Err(at(Error::Dimension(format!(
                                "produced {}, expected {shape}",
                                v.shape()
                            ))));
                        }
                    }
                    vals.push(v);
                }
                per_frame.insert(name, vals);
            }
            Rate::PerInference => {
                let mut vals = Vec::with_capacity(k_max);
                for k in 0..k_max {
                    let v = match &layer.kind {
                        LayerKind::TemporalPyramid { .. } => {
                            let input = layer.inputs[0].as_str();
                            let len = clip.pyramid_len(lookahead(graph, input)).map_err(at)?;
                            let start = k * clip.stride;
                            let src = &per_frame[input];
                            let items: Vec<&Tensor> = (start..start + len)
                                .map(|t| {
                                    src[t].as_ref().ok_or_else(|| {
                                        at(Error::Dimension(format!("frame {t} unavailable")))
                                    })
                                })
                                .collect::<Result<_>>()?;
                            eval_window(&layer.kind, &items).map_err(at)?
                        }
                        _ => {
                            let ins: Vec<&Tensor> =
                                layer.inputs.iter().map(|i| &per_inf[i.as_str()][k]).collect();
                            eval_layer(&layer.kind, &ins, params.get(name)).map_err(at)?
                        }
                    };
                    vals.push(v);
                }
                per_inf.insert(name, vals);
            }
        }
    }
    Ok((per_frame, per_inf, f, k_max))
}

/// Runs a clip given per-source frame sequences. Returns one output map per
/// inference, in tag order.
pub fn run_clip(
    graph: &ModelGraph,
    params: &ModelParams,
    sources: &BTreeMap<String, Vec<Tensor>>,
    clip: ClipSpec,
) -> Result<Vec<Outputs>> {
    let (per_frame, per_inf, f, k_max) = evaluate(graph, params, sources, clip)?;
    let sequence = graph.is_sequence();
    let mut out = Vec::new();
    if sequence {
        for k in 0..k_max {
            let mut m = Outputs::new();
            for o in &graph.outputs {
                let v = per_inf
                    .get(o.as_str())
                    .ok_or_else(|| Error::Graph(format!("output `{o}` is not per-inference")))?;
                m.insert(o.clone(), v[k].clone());
            }
            out.push(m);
        }
    } else {
        for t in 0..f {
            let mut m = Outputs::new();
            for o in &graph.outputs {
                if let Some(v) = &per_frame[o.as_str()][t] {
                    m.insert(o.clone(), v.clone());
                }
            }
            if m.len() == graph.outputs.len() {
                out.push(m);
            } else {
                break;
            }
        }
    }
    Ok(out)
}

/// Like [`run_clip`] but keeps every intermediate value.
pub fn run_clip_trace(
    graph: &ModelGraph,
    params: &ModelParams,
    sources: &BTreeMap<String, Vec<Tensor>>,
    clip: ClipSpec,
) -> Result<LayerTrace> {
    let (per_frame, per_inf, _, _) = evaluate(graph, params, sources, clip)?;
    let mut trace = LayerTrace::new();
    for (name, vals) in per_frame {
        let m = trace.entry(name.to_string()).or_default();
        for (t, v) in vals.into_iter().enumerate() {
            if let Some(v) = v {
                m.insert(t as u64, v);
            }
        }
    }
    for (name, vals) in per_inf {
        let m = trace.entry(name.to_string()).or_default();
        for (k, v) in vals.into_iter().enumerate() {
            m.insert(k as u64, v);
        }
    }
    Ok(trace)
}

/// Single-source convenience wrapper around [`run_clip`].
pub fn run_frames(
    graph: &ModelGraph,
    params: &ModelParams,
    frames: &[Tensor],
    clip: ClipSpec,
) -> Result<Vec<Outputs>> {
    let [source] = graph.inputs.as_slice() else {
        return Err(Error::Graph(format!(
            "expected one source, graph has {}",
            graph.inputs.len()
        )));
    };
    let mut m = BTreeMap::new();
    m.insert(source.clone(), frames.to_vec());
    run_clip(graph, params, &m, clip)
}

/// Runs the graph with parameters generated from its seed.
///
/// Each input is either one frame (the source's shape) or a clip with a
/// leading frame axis. A clip through a sequence graph is one inference over
/// all its frames; through any other graph it yields one result per frame,
/// stacked on a leading axis.
pub fn run_reference(graph: &ModelGraph, inputs: &BTreeMap<String, Tensor>) -> Result<Outputs> {
    let params = ModelParams::generate(graph)?;
    let mut sources = BTreeMap::new();
    let mut clip = false;
    for s in &graph.inputs {
        let x = inputs.get(s).ok_or_else(|| Error::MissingInput(s.clone()))?;
        let LayerKind::Source { shape } = &graph.layer(s).unwrap().kind else {
            unreachable!()
        };
        if x.shape() == shape {
            sources.insert(s.clone(), vec![x.clone()]);
        } else if x.dims().len() == shape.rank() + 1 && &x.dims()[1..] == shape.dims() {
            clip = true;
            sources.insert(s.clone(), x.unstack()?);
        } else {
            return Err(Error::Shape {
                layer: s.clone(),
                reason: format!("input {} does not match source {shape}", x.shape()),
            });
        }
    }
    let frames = sources.values().next().map_or(0, |v| v.len());
    let spec = ClipSpec::new(frames, 1);
    let results = run_clip(graph, &params, &sources, spec)?;
    if !clip || graph.is_sequence() {
        return results
            .into_iter()
            .next()
            .ok_or_else(|| Error::Dimension("input too short for one inference".into()));
    }
    let mut out = Outputs::new();
    for o in &graph.outputs {
        let items: Vec<Tensor> = results.iter().map(|m| m[o].clone()).collect();
        out.insert(o.clone(), Tensor::stack(&items)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{
        build_model_with, BuildOptions, LayerSpec, ModelName, TensorShape,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(dims: &[usize], frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![frames];
        d.extend_from_slice(dims);
        let n: usize = d.iter().product();
        Tensor::from_dims(&d, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn two_stream_clip_is_distribution() {
        let g = build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 1)).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("frames".to_string(), clip(&[16, 12, 3], 30, 7));
        let out = run_reference(&g, &inputs).unwrap();
        let y = &out["output"];
        assert_eq!(y.dims(), &[51]);
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        let again = run_reference(&g, &inputs).unwrap();
        assert!(again["output"].bit_eq(y));
    }

    #[test]
    fn single_relu_zeroes_negatives() {
        let mut g = ModelGraph::new("relu", 1);
        g.push(LayerSpec::new(
            "x",
            LayerKind::Source {
                shape: TensorShape::new(vec![4]).unwrap(),
            },
            &[],
        ));
        g.push(LayerSpec::new("r", LayerKind::ReLU, &["x"]));
        g.push(LayerSpec::new("y", LayerKind::Sink, &["r"]));
        let g = g.validate().unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::vector(vec![-1.0, -2.0, -0.5, -9.0]).unwrap());
        let out = run_reference(&g, &inputs).unwrap();
        assert_eq!(out["y"].data(), &[0.0; 4]);
        assert!(matches!(
            run_reference(&g, &BTreeMap::new()),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn sliding_inferences_count() {
        let c = ClipSpec::new(12, 1);
        assert_eq!(c.inferences(11), 0);
        assert_eq!(c.inferences(12), 1);
        assert_eq!(c.inferences(14), 3);
        assert_eq!(ClipSpec::new(10, 4).inferences(30), 6);
    }
}
