//! Atomic layer groups: the smallest units the planner moves between devices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model_ir::{LayerKind, ModelGraph};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    /// Member layers in topological order.
    pub layers: Vec<String>,
}

impl LayerGroup {
    pub fn contains(&self, name: &str) -> bool {
        self.layers.iter().any(|l| l == name)
    }

    pub fn has_kind(&self, graph: &ModelGraph, f: impl Fn(&LayerKind) -> bool) -> bool {
        self.layers
            .iter()
            .any(|l| graph.layer(l).is_some_and(|s| f(&s.kind)))
    }
}

struct Builder<'g> {
    graph: &'g ModelGraph,
    groups: Vec<Option<Vec<String>>>,
    owner: BTreeMap<String, usize>,
}

impl<'g> Builder<'g> {
    fn kind(&self, name: &str) -> &'g LayerKind {
        &self.graph.layer(name).unwrap().kind
    }

    fn members(&self, g: usize) -> &[String] {
        self.groups[g].as_deref().unwrap()
    }

    fn new_group(&mut self, name: &str) -> usize {
        self.groups.push(Some(vec![name.to_string()]));
        let g = self.groups.len() - 1;
        self.owner.insert(name.to_string(), g);
        g
    }

    fn add(&mut self, g: usize, name: &str) {
        self.groups[g].as_mut().unwrap().push(name.to_string());
        self.owner.insert(name.to_string(), g);
    }

    fn merge_into(&mut self, from: usize, into: usize) {
        let moved = self.groups[from].take().unwrap();
        for l in &moved {
            self.owner.insert(l.clone(), into);
        }
        self.groups[into].as_mut().unwrap().extend(moved);
    }

    /// Groups that feed `g` from outside.
    fn producers(&self, g: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for l in self.members(g) {
            for i in &self.graph.layer(l).unwrap().inputs {
                let p = self.owner[i];
                if p != g && !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Layers outside `g` that read from `g`.
    fn external_consumers(&self, g: usize) -> Vec<String> {
        let mut out = Vec::new();
        for l in self.members(g) {
            for c in self.graph.consumers(l) {
                if self.owner.get(c) != Some(&g) && !out.iter().any(|x| x == c) {
                    out.push(c.to_string());
                }
            }
        }
        out
    }

    fn is_weightless(&self, g: usize) -> bool {
        self.members(g).iter().all(|l| !self.kind(l).has_weights())
    }

    fn has_conv(&self, g: usize) -> bool {
        self.members(g)
            .iter()
            .any(|l| matches!(self.kind(l), LayerKind::Conv2D { .. }))
    }

    fn ends_with_pool(&self, g: usize) -> bool {
        matches!(
            self.members(g).last().map(|l| self.kind(l)),
            Some(LayerKind::MaxPool { .. })
        )
    }

    /// A pool just closed group `g`: absorb the chain of open conv groups
    /// feeding it.
    fn close_block(&mut self, g: usize) {
        loop {
            let producers = self.producers(g);
            let [p] = producers.as_slice() else { return };
            let p = *p;
            let feeds_only_g = self
                .external_consumers(p)
                .iter()
                .all(|c| self.owner.get(c) == Some(&g));
            if !self.has_conv(p) || self.ends_with_pool(p) || !feeds_only_g {
                return;
            }
            let mut layers = self.groups[p].take().unwrap();
            layers.extend(self.groups[g].take().unwrap());
            for l in &layers {
                self.owner.insert(l.clone(), g);
            }
            self.groups[g] = Some(layers);
        }
    }
}

/// Splits a validated graph into topologically ordered atomic groups.
///
/// Activations, normalization, softmax, sinks and pools join their producer's
/// group; a pool closes a conv block, pulling in the open conv groups that
/// lead to it. The flow stack stays with the source. Weightless producers of a
/// concat merge with it.
pub fn model_to_layers(graph: &ModelGraph) -> Vec<LayerGroup> {
    let mut b = Builder {
        graph,
        groups: Vec::new(),
        owner: BTreeMap::new(),
    };
    for name in graph.topo_order() {
        let layer = graph.layer(name).unwrap();
        let producer = match layer.inputs.as_slice() {
            [one] => Some(b.owner[one]),
            _ => None,
        };
        match (&layer.kind, producer) {
            (LayerKind::FlowStack { .. }, Some(p))
                if b.members(p)
                    .iter()
                    .any(|l| matches!(b.kind(l), LayerKind::Source { .. })) =>
            {
                b.add(p, name)
            }
            (LayerKind::MaxPool { .. }, Some(p)) => {
                b.add(p, name);
                b.close_block(p);
            }
            (
                LayerKind::ReLU | LayerKind::BatchNorm | LayerKind::Softmax | LayerKind::Sink,
                Some(p),
            ) => b.add(p, name),
            (LayerKind::Concat, _) => {
                let producers: Vec<usize> = {
                    let mut v: Vec<usize> = layer.inputs.iter().map(|i| b.owner[i]).collect();
                    v.dedup();
                    v
                };
                let mergeable = producers.iter().all(|&p| {
                    b.is_weightless(p)
                        && b.external_consumers(p).iter().all(|c| c == name)
                        && !b
                            .members(p)
                            .iter()
                            .any(|l| matches!(b.kind(l), LayerKind::Source { .. }))
                });
                let g = b.new_group(name);
                if mergeable {
                    let into = producers[0];
                    for &p in &producers[1..] {
                        if p != into {
                            b.merge_into(p, into);
                        }
                    }
                    b.merge_into(g, into);
                }
            }
            _ => {
                b.new_group(name);
            }
        }
    }
    let mut groups: Vec<Vec<String>> = b.groups.into_iter().flatten().collect();
    for g in &mut groups {
        g.sort_by_key(|l| graph.topo_index(l).unwrap());
    }
    groups.sort_by_key(|g| graph.topo_index(&g[0]).unwrap());
    groups.into_iter().map(|layers| LayerGroup { layers }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{
        build_model_with, BuildOptions, LayerSpec, ModelName, Padding, TensorShape,
    };

    fn names(groups: &[LayerGroup]) -> Vec<Vec<&str>> {
        groups
            .iter()
            .map(|g| g.layers.iter().map(String::as_str).collect())
            .collect()
    }

    #[test]
    fn two_stream_groups() {
        let g = build_model_with(ModelName::TwoStream, &BuildOptions::default()).unwrap();
        let groups = model_to_layers(&g);
        let n = names(&groups);
        assert_eq!(n[0], ["frames", "flow"]);
        assert_eq!(n[1], ["conv1_s", "relu1_s", "conv2_s", "relu2_s", "pool2_s"]);
        assert_eq!(n[2], ["conv3_s", "relu3_s", "pool3_s"]);
        assert_eq!(n[3], ["fc_1s", "relu_fc_1s"]);
        assert_eq!(n[7], ["pyramid_s", "pyramid_t", "concat"]);
        assert_eq!(n[8], ["fc_1", "relu_fc_1"]);
        assert_eq!(n[9], ["fc_2", "relu_fc_2"]);
        assert_eq!(n[10], ["fc_3", "softmax", "output"]);
        assert_eq!(groups.len(), 11);
        let covered: usize = groups.iter().map(|g| g.layers.len()).sum();
        assert_eq!(covered, g.layers.len());
    }

    #[test]
    fn vgg_blocks_are_groups() {
        let g = build_model_with(ModelName::Vgg16, &BuildOptions::default()).unwrap();
        let groups = model_to_layers(&g);
        assert_eq!(groups.len(), 1 + 5 + 3);
        assert_eq!(groups[3].layers.first().unwrap(), "conv3_1");
        assert_eq!(groups[3].layers.last().unwrap(), "pool3");
    }

    fn src(g: &mut ModelGraph, dims: &[usize]) {
        g.push(LayerSpec::new(
            "x",
            LayerKind::Source {
                shape: TensorShape::new(dims.to_vec()).unwrap(),
            },
            &[],
        ));
    }

    #[test]
    fn conv_relu_conv_is_two_groups() {
        let mut g = ModelGraph::new("c", 1);
        src(&mut g, &[4, 4, 1]);
        let conv = || LayerKind::Conv2D {
            filters: 2,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: Padding::Same,
        };
        g.push(LayerSpec::new("c1", conv(), &["x"]));
        g.push(LayerSpec::new("r1", LayerKind::ReLU, &["c1"]));
        g.push(LayerSpec::new("c2", conv(), &["r1"]));
        let g = g.validate().unwrap();
        let groups = model_to_layers(&g);
        let n = names(&groups);
        assert_eq!(n, vec![vec!["x"], vec!["c1", "r1"], vec!["c2"]]);
    }

    #[test]
    fn single_fc_is_one_group() {
        let mut g = ModelGraph::new("f", 1);
        src(&mut g, &[4]);
        g.push(LayerSpec::new("fc", LayerKind::FullyConnected { out_size: 3 }, &["x"]));
        let g = g.validate().unwrap();
        let groups = model_to_layers(&g);
        assert_eq!(names(&groups)[1], ["fc"]);
    }
}
