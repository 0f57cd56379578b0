//! Per-device dataflow: evaluates one task's layers as their inputs arrive.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::engine::{eval_layer, eval_window, generate_layer_params, is_windowed, ClipSpec, LayerParams, Tensor};
use crate::error::{Error, Result};
use crate::metrics::Breakdown;
use crate::model_ir::{LayerKind, ModelGraph, Rate};
use crate::partition::{split_rows, DeviceId, Task};

use super::window::{SlidingWindow, WindowSpec};

/// Latency bookkeeping that travels with a value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Account {
    /// When the newest frame behind this value was recorded.
    pub origin: f64,
    /// Critical-path costs accumulated so far.
    pub breakdown: Breakdown,
}

impl Account {
    /// The input that bounds a firing: newest origin, then the larger cost.
    pub fn latest<'a>(accounts: impl IntoIterator<Item = &'a Account>) -> Account {
        accounts
            .into_iter()
            .copied()
            .reduce(|a, b| {
                if b.origin > a.origin || (b.origin == a.origin && b.breakdown.total() > a.breakdown.total()) {
                    b
                } else {
                    a
                }
            })
            .unwrap_or_default()
    }
}

/// A value produced by this task that leaves the device.
#[derive(Clone, Debug)]
pub struct Emitted {
    pub layer: String,
    pub tag: u64,
    pub value: Tensor,
    pub account: Account,
}

/// One traced layer value.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub layer: String,
    pub tag: u64,
    pub value: Tensor,
}

type Item = (Tensor, Account);

/// Values waiting to be pushed into consumer windows, drained in
/// topological order so resident sets are visited in sequence.
#[derive(Default)]
struct Agenda {
    items: BTreeMap<(usize, u64, u64), (String, Item)>,
    seq: u64,
}

impl Agenda {
    fn push(&mut self, topo: usize, layer: &str, tag: u64, item: Item) {
        self.seq += 1;
        self.items.insert((topo, tag, self.seq), (layer.to_string(), item));
    }

    fn pop(&mut self) -> Option<(String, u64, Item)> {
        self.items.pop_first().map(|((_, tag, _), (layer, item))| (layer, tag, item))
    }
}

#[derive(Debug)]
pub struct Worker {
    device: DeviceId,
    graph: Arc<ModelGraph>,
    task: Task,
    clip: ClipSpec,
    params: BTreeMap<String, LayerParams>,
    /// External inputs, in slot order.
    ports: Vec<String>,
    /// Layers whose values other tasks consume.
    exports: BTreeSet<String>,
    windows: BTreeMap<(String, String), SlidingWindow<Item>>,
    joins: BTreeMap<String, BTreeMap<u64, Vec<Option<Item>>>>,
    assembly: BTreeMap<(String, u64), Vec<Option<Item>>>,
    loaded_set: Option<usize>,
    slack: usize,
    trace: Option<Vec<TraceEntry>>,
    reloads: u64,
}

impl Worker {
    /// Builds the worker and generates its weights. `slack` is the reorder
    /// tolerance of every window.
    pub fn load(device: DeviceId, graph: Arc<ModelGraph>, task: Task, clip: ClipSpec, slack: usize) -> Result<Self> {
        let mut params = BTreeMap::new();
        for name in &task.layers {
            let spec = graph
                .layer(name)
                .ok_or_else(|| Error::Graph(format!("task {} names unknown layer `{name}`", task.id)))?;
            if !spec.kind.has_weights() {
                continue;
            }
            let full = generate_layer_params(&graph, name)?
                .ok_or_else(|| Error::Param(format!("`{name}` has no weights")))?;
            let p = match &task.split {
                Some(s) if s.layer == *name => {
                    let out = graph.shape(name).unwrap().numel();
                    full.slice_rows(split_rows(out, s.part_count, s.part_index))?
                }
                _ => full,
            };
            params.insert(name.clone(), p);
        }
        let mut ports = Vec::new();
        for name in &task.layers {
            let spec = graph.layer(name).unwrap();
            if matches!(spec.kind, LayerKind::Source { .. }) {
                ports.push(name.clone());
            }
            for i in &spec.inputs {
                if !task.computes(i) && !ports.contains(i) {
                    ports.push(i.clone());
                }
            }
        }
        let mut w = Self {
            device,
            graph,
            task,
            clip,
            params,
            ports,
            exports: BTreeSet::new(),
            windows: BTreeMap::new(),
            joins: BTreeMap::new(),
            assembly: BTreeMap::new(),
            loaded_set: None,
            slack,
            trace: None,
            reloads: 0,
        };
        w.reset()?;
        Ok(w)
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn ports(&self) -> &[String] {
        &self.ports
    }

    /// Takes over `task` without reloading. Its weights must match the ones
    /// loaded; replica placement may differ.
    pub fn retask(&mut self, task: Task, slack: usize) -> Result<()> {
        if task.weight_key() != self.task.weight_key() {
            return Err(Error::RoleUpdate(format!(
                "device {} cannot take task {} without reloading",
                self.device, task.id
            )));
        }
        self.task = task;
        self.slack = slack;
        self.reset()
    }

    /// Marks the layers other tasks consume. Sinks are always exported.
    pub fn set_exports(&mut self, exports: BTreeSet<String>) {
        self.exports = exports;
    }

    pub fn slot_of(&self, layer: &str) -> Option<usize> {
        self.ports.iter().position(|p| p == layer)
    }

    pub fn reload_count(&self) -> u64 {
        self.reloads
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Perturbs one weight of `layer`. Test hook for fault injection.
    pub fn corrupt_weight(&mut self, layer: &str) -> Result<()> {
        let p = self
            .params
            .get_mut(layer)
            .ok_or_else(|| Error::Param(format!("device {} holds no weights for `{layer}`", self.device)))?;
        match p {
            LayerParams::Dense { weights, .. } => {
                let mut data = weights.data().to_vec();
                data[0] += 1.0;
                *weights = Tensor::from_dims(weights.dims(), data)?;
            }
            LayerParams::BatchNorm(s) => s.gamma[0] += 1.0,
        }
        Ok(())
    }

    fn window_spec(&self, layer: &str, input: &str) -> Result<WindowSpec> {
        let spec = self.graph.layer(layer).unwrap();
        let (length, stride) = match &spec.kind {
            LayerKind::FlowStack { window_len } => (window_len + 1, 1),
            LayerKind::TemporalPyramid { .. } => {
                let ahead = match self.graph.rate(input) {
                    Some(Rate::PerFrame { lookahead }) => lookahead,
                    _ => 0,
                };
                (self.clip.pyramid_len(ahead)?, self.clip.stride)
            }
            _ => (1, 1),
        };
        let r = self.task.replica;
        Ok(WindowSpec {
            length,
            stride,
            tag_step: r.count as u64,
            offset: r.index as u64,
            slack: self.slack,
        })
    }

    /// Drops all buffered state for a new stream epoch. Loaded weights stay.
    pub fn reset(&mut self) -> Result<()> {
        self.windows.clear();
        self.joins.clear();
        self.assembly.clear();
        for name in self.task.layers.clone() {
            let spec = self.graph.layer(&name).unwrap().clone();
            for input in &spec.inputs {
                let key = (name.clone(), input.clone());
                if !self.windows.contains_key(&key) {
                    let ws = self.window_spec(&name, input)?;
                    self.windows.insert(key, SlidingWindow::new(ws));
                }
            }
        }
        if self.loaded_set.is_none() {
            self.loaded_set = Some(0);
        }
        Ok(())
    }

    /// Items held in reorder windows and partial joins.
    pub fn pending(&self) -> usize {
        self.windows.values().map(|w| w.held()).sum::<usize>()
            + self.joins.values().map(|m| m.len()).sum::<usize>()
            + self.assembly.len()
    }

    /// Whether `tag` is buffered anywhere in this worker.
    pub fn holds_tag(&self, tag: u64) -> bool {
        self.windows.values().any(|w| w.pending_tags().contains(&tag))
    }

    /// Feeds one value for input port `port` and runs everything it
    /// enables. `part` is the sender's split part for partial inputs.
    /// Returns the values that leave this task and the costs spent.
    pub fn accept(
        &mut self,
        port: &str,
        tag: u64,
        part: Option<(usize, usize)>,
        value: Tensor,
        account: Account,
    ) -> Result<(Vec<Emitted>, Breakdown)> {
        let mut spent = Breakdown::default();
        let mut out = Vec::new();
        let mut queue = Agenda::default();

        let ready = match part {
            Some((index, count)) if count > 1 => {
                let slots = self
                    .assembly
                    .entry((port.to_string(), tag))
                    .or_insert_with(|| vec![None; count]);
                if index >= slots.len() || slots[index].is_some() {
                    return Err(Error::Runtime(format!(
                        "device {}: bad or repeated part {index} of `{port}` tag {tag}",
                        self.device
                    )));
                }
                slots[index] = Some((value, account));
                if slots.iter().all(Option::is_some) {
                    let slots = self.assembly.remove(&(port.to_string(), tag)).unwrap();
                    let parts: Vec<Item> = slots.into_iter().map(Option::unwrap).collect();
                    let acc = Account::latest(parts.iter().map(|p| &p.1));
                    let refs: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
                    Some((Tensor::concat(&refs)?, acc))
                } else {
                    None
                }
            }
            _ => Some((value, account)),
        };
        let Some(item) = ready else {
            return Ok((out, spent));
        };
        if let Some(trace) = &mut self.trace {
            if !self.task.computes(port) {
                trace.push(TraceEntry {
                    layer: port.to_string(),
                    tag,
                    value: item.0.clone(),
                });
            }
        }
        if self.task.computes(port) {
            // A source layer: the arriving frame is its output.
            self.emit(port, tag, item, &mut queue, &mut out);
        } else {
            let topo = self.graph.topo_index(port).unwrap_or(0);
            queue.push(topo, port, tag, item);
        }

        while let Some((producer, tag, item)) = queue.pop() {
            let consumers: Vec<String> = self
                .task
                .layers
                .iter()
                .filter(|l| self.graph.layer(l).unwrap().inputs.contains(&producer))
                .cloned()
                .collect();
            for layer in consumers {
                let key = (layer.clone(), producer.clone());
                let readies = self
                    .windows
                    .get_mut(&key)
                    .expect("window per edge")
                    .push(tag, item.clone())?;
                for r in readies {
                    self.on_ready(&layer, &producer, r, &mut spent, &mut queue, &mut out)?;
                }
            }
        }
        Ok((out, spent))
    }

    fn on_ready(
        &mut self,
        layer: &str,
        producer: &str,
        r: super::window::Ready<Item>,
        spent: &mut Breakdown,
        queue: &mut Agenda,
        out: &mut Vec<Emitted>,
    ) -> Result<()> {
        let spec = self.graph.layer(layer).unwrap().clone();
        if is_windowed(&spec.kind) {
            let out_tag = match self.graph.rate(layer) {
                Some(Rate::PerInference) => r.index,
                _ => r.tag,
            };
            let acc = Account::latest(r.items.iter().map(|i| &i.1));
            let refs: Vec<&Tensor> = r.items.iter().map(|i| &i.0).collect();
            let v = eval_window(&spec.kind, &refs)?;
            let item = self.fire(layer, v, acc, spent);
            self.emit(layer, out_tag, item, queue, out);
            return Ok(());
        }
        let [item] = <[Item; 1]>::try_from(r.items).map_err(|_| Error::Runtime("plain port yielded a window".into()))?;
        let inputs = if spec.inputs.len() == 1 {
            vec![item]
        } else {
            let slots = self
                .joins
                .entry(layer.to_string())
                .or_default()
                .entry(r.tag)
                .or_insert_with(|| vec![None; spec.inputs.len()]);
            for (i, name) in spec.inputs.iter().enumerate() {
                if name == producer {
                    slots[i] = Some(item.clone());
                }
            }
            if !slots.iter().all(Option::is_some) {
                return Ok(());
            }
            let slots = self.joins.get_mut(layer).unwrap().remove(&r.tag).unwrap();
            slots.into_iter().map(Option::unwrap).collect()
        };
        let acc = Account::latest(inputs.iter().map(|i| &i.1));
        let refs: Vec<&Tensor> = inputs.iter().map(|i| &i.0).collect();
        let v = eval_layer(&spec.kind, &refs, self.params.get(layer))?;
        let item = self.fire(layer, v, acc, spent);
        self.emit(layer, r.tag, item, queue, out);
        Ok(())
    }

    /// Charges reload and compute for one firing of `layer`.
    fn fire(&mut self, layer: &str, value: Tensor, mut acc: Account, spent: &mut Breakdown) -> Item {
        let timing = &self.task.timing;
        let mut cost = Breakdown {
            compute: timing.layer_seconds.get(layer).copied().unwrap_or(0.0),
            ..Breakdown::default()
        };
        if timing.reloads() {
            if let Some(set) = timing.set_of(layer) {
                if self.loaded_set != Some(set) {
                    cost.reload = timing.set_load_seconds[set];
                    self.loaded_set = Some(set);
                    self.reloads += 1;
                }
            }
        }
        spent.add(&cost);
        acc.breakdown.add(&cost);
        (value, acc)
    }

    fn emit(
        &mut self,
        layer: &str,
        tag: u64,
        item: Item,
        queue: &mut Agenda,
        out: &mut Vec<Emitted>,
    ) {
        if let Some(trace) = &mut self.trace {
            if !self.task.is_partial(layer) {
                trace.push(TraceEntry {
                    layer: layer.to_string(),
                    tag,
                    value: item.0.clone(),
                });
            }
        }
        let external = matches!(self.graph.layer(layer).unwrap().kind, LayerKind::Sink)
            || self.exports.contains(layer);
        if external {
            out.push(Emitted {
                layer: layer.to_string(),
                tag,
                value: item.0.clone(),
                account: item.1,
            });
        }
        let topo = self.graph.topo_index(layer).unwrap_or(0);
        queue.push(topo, layer, tag, item);
    }
}
