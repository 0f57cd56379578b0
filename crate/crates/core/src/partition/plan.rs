//! The planning loop: stages, parallelism transforms and their selection.

use std::cmp::Ordering;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::cost::{comm_latency, layer_cost, TaskLayer};
use crate::error::{Error, Result};
use crate::model_ir::{LayerKind, ModelGraph, Rate};

use super::groups::model_to_layers;
use super::predict::expand;
use super::tasks::{find_min_load_tasks, minimize_load_time};
use super::{Assignment, AssignmentSet, PlanConfig};

/// Relative tolerance when comparing predicted times.
const REL_TOL: f64 = 1e-9;

/// How a stage's fc layer is cut across devices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSplit {
    pub layer: String,
    /// Elementwise layers applied to each part's rows.
    pub glue: Vec<String>,
    /// Layers before the split layer; they run on part 0.
    pub head: Vec<String>,
    pub parts: usize,
}

/// A logical pipeline stage. It becomes one task per replica, or one per
/// part when split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub layers: Vec<String>,
    pub split: Option<UnitSplit>,
    pub replicas: usize,
    /// Layer sets loaded in turn; empty or a single set means no reloads.
    pub resident_sets: Vec<Vec<String>>,
}

impl Unit {
    pub fn new(layers: Vec<String>) -> Self {
        Self {
            layers,
            split: None,
            replicas: 1,
            resident_sets: Vec::new(),
        }
    }

    pub fn reloads(&self) -> bool {
        self.resident_sets.len() > 1
    }

    pub fn device_count(&self) -> usize {
        match &self.split {
            Some(s) => self.replicas + s.parts - 1,
            None => self.replicas,
        }
    }

    /// Layers of the task that replication copies.
    fn replicated_layers(&self) -> Vec<&String> {
        match &self.split {
            Some(s) => s.head.iter().chain([&s.layer]).chain(&s.glue).collect(),
            None => self.layers.iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Keep,
    Replicate { unit: usize, replicas: usize },
    SplitFc { unit: usize, layer: String, parts: usize },
    /// Filter-wise conv split. Costed for comparison only.
    SplitConv { unit: usize, layer: String, parts: usize },
}

impl Transform {
    fn unit(&self) -> usize {
        match self {
            Transform::Keep => 0,
            Transform::Replicate { unit, .. }
            | Transform::SplitFc { unit, .. }
            | Transform::SplitConv { unit, .. } => *unit,
        }
    }
}

struct FcPlan {
    layer: String,
    head: Vec<String>,
    glue: Vec<String>,
    tail: Vec<String>,
    out: usize,
}

fn fc_params(graph: &ModelGraph, name: &str) -> u64 {
    layer_cost(graph, &TaskLayer::from(name)).map_or(0, |c| c.param_scalars)
}

/// The largest fc layer of a stage and how the stage divides around it.
fn fc_plan(graph: &ModelGraph, unit: &Unit) -> Option<FcPlan> {
    let is_fc = |l: &String| {
        matches!(
            graph.layer(l).map(|s| &s.kind),
            Some(LayerKind::FullyConnected { .. })
        )
    };
    let mut best: Option<&String> = None;
    for l in unit.layers.iter().filter(|l| is_fc(l)) {
        if best.is_none_or(|b| fc_params(graph, l) > fc_params(graph, b)) {
            best = Some(l);
        }
    }
    let layer = best?.clone();
    let pos = unit.layers.iter().position(|l| *l == layer)?;
    let mut glue = Vec::new();
    let mut cur = layer.clone();
    loop {
        let consumers = graph.consumers(&cur);
        match consumers.as_slice() {
            [c] if matches!(graph.layer(c).unwrap().kind, LayerKind::ReLU)
                && unit.layers.iter().any(|l| l == c) =>
            {
                glue.push(c.to_string());
                cur = c.to_string();
            }
            _ => break,
        }
    }
    let head = unit.layers[..pos].to_vec();
    let tail = unit.layers[pos + 1..]
        .iter()
        .filter(|l| !glue.contains(l))
        .cloned()
        .collect();
    let out = graph.shape(&layer)?.numel();
    Some(FcPlan {
        layer,
        head,
        glue,
        tail,
        out,
    })
}

/// Whether copies of the stage's task can each take a share of the items.
pub fn replicable(graph: &ModelGraph, unit: &Unit) -> bool {
    if unit.reloads() {
        return false;
    }
    unit.replicated_layers().iter().all(|l| {
        let spec = graph.layer(l).unwrap();
        let stateless = !matches!(
            spec.kind,
            LayerKind::Source { .. } | LayerKind::FlowStack { .. } | LayerKind::TemporalPyramid { .. }
        );
        let per_item = !graph.is_sequence() || matches!(graph.rate(l), Some(Rate::PerFrame { .. }));
        stateless && per_item
    })
}

fn extra_devices(graph: &ModelGraph, units: &[Unit], t: &Transform) -> Option<usize> {
    match t {
        Transform::Keep => Some(0),
        Transform::Replicate { unit, replicas } => replicas.checked_sub(units[*unit].replicas),
        Transform::SplitFc { unit, parts, .. } | Transform::SplitConv { unit, parts, .. } => {
            let tail = fc_plan(graph, &units[*unit]).is_some_and(|p| !p.tail.is_empty());
            let tail = matches!(t, Transform::SplitFc { .. }) && tail;
            Some(parts - 1 + usize::from(tail))
        }
    }
}

/// Applies an executable transform. Returns the new stages and the indices
/// of the stages it produced.
pub fn apply(graph: &ModelGraph, units: &[Unit], t: &Transform) -> Result<(Vec<Unit>, Vec<usize>)> {
    let mut out = units.to_vec();
    match t {
        Transform::Keep => Ok((out, Vec::new())),
        Transform::Replicate { unit, replicas } => {
            if !replicable(graph, &units[*unit]) {
                return Err(Error::Unsplittable(format!(
                    "stage {unit} keeps state across items"
                )));
            }
            out[*unit].replicas = *replicas;
            Ok((out, vec![*unit]))
        }
        Transform::SplitFc { unit, layer, parts } => {
            let u = &units[*unit];
            let p = fc_plan(graph, u)
                .filter(|p| p.layer == *layer)
                .ok_or_else(|| Error::Unsplittable(format!("`{layer}` is not the stage's fc")))?;
            if u.split.is_some() || u.reloads() || *parts < 2 || *parts > p.out {
                return Err(Error::Unsplittable(format!(
                    "cannot split `{layer}` into {parts} parts"
                )));
            }
            let mut layers = p.head.clone();
            layers.push(p.layer.clone());
            layers.extend(p.glue.iter().cloned());
            out[*unit] = Unit {
                layers,
                split: Some(UnitSplit {
                    layer: p.layer,
                    glue: p.glue,
                    head: p.head,
                    parts: *parts,
                }),
                replicas: u.replicas,
                resident_sets: Vec::new(),
            };
            let mut touched = vec![*unit];
            if !p.tail.is_empty() {
                out.insert(unit + 1, Unit::new(p.tail));
                touched.push(unit + 1);
            }
            Ok((out, touched))
        }
        Transform::SplitConv { layer, .. } => Err(Error::Unsplittable(format!(
            "conv split of `{layer}` is costed but not executed"
        ))),
    }
}

/// Longest per-inference device time among tasks of the given stages.
fn stage_time(a: &Assignment, units: &[usize]) -> f64 {
    a.tasks
        .iter()
        .filter(|(_, t)| units.contains(&t.unit))
        .map(|(d, _)| a.predicted.stage_seconds[d])
        .fold(0.0, f64::max)
}

/// Task-local outcome of one transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelGain {
    pub transform: Transform,
    /// Stage time before over stage time after.
    pub gain: f64,
    pub devices_needed: usize,
}

/// Costs a filter-wise split of the stage's heaviest conv: part 0 keeps the
/// rest of the stage and gathers the other parts' filters.
fn conv_split_time(graph: &ModelGraph, unit: &Unit, before: f64, k: usize, config: &PlanConfig) -> Option<(String, f64)> {
    let device = &config.profile.device;
    let convs = unit
        .layers
        .iter()
        .filter(|l| matches!(graph.layer(l).unwrap().kind, LayerKind::Conv2D { .. }));
    let mut best: Option<(String, f64, u64, u64)> = None;
    for l in convs {
        let c = layer_cost(graph, &TaskLayer::from(l)).ok()?;
        let spec = graph.layer(l).unwrap();
        let in_bytes = graph.shape(&spec.inputs[0])?.numel() as u64 * 4;
        if best.as_ref().is_none_or(|b| c.ops / device.flops_per_sec > b.1) {
            best = Some((l.clone(), c.ops / device.flops_per_sec, c.out_elems * 4, in_bytes));
        }
    }
    let (layer, secs, out_bytes, in_bytes) = best?;
    let kf = k as f64;
    let gather = (k - 1) as f64 * comm_latency(out_bytes / k as u64, &config.profile.comm);
    let part0 = before - secs * (1.0 - 1.0 / kf) + gather;
    let others = secs / kf + comm_latency(in_bytes, &config.profile.comm);
    Some((layer, part0.max(others)))
}

/// Compares replication and splitting of one stage into `k` ways and returns
/// the best executable choice.
pub fn model_vs_data(
    graph: &ModelGraph,
    units: &[Unit],
    unit: usize,
    k: usize,
    config: &PlanConfig,
) -> Result<ParallelGain> {
    let u = units
        .get(unit)
        .ok_or_else(|| Error::Param(format!("no stage {unit}")))?;
    if k <= 1 {
        return Ok(ParallelGain {
            transform: Transform::Keep,
            gain: 1.0,
            devices_needed: 0,
        });
    }
    let base = expand(graph, units, config)?;
    let before = stage_time(&base, &[unit]);
    let mut options = Vec::new();
    if replicable(graph, u) {
        options.push(Transform::Replicate {
            unit,
            replicas: u.replicas * k,
        });
    }
    if u.split.is_none() && !u.reloads() {
        if let Some(p) = fc_plan(graph, u).filter(|p| p.out >= k) {
            options.push(Transform::SplitFc {
                unit,
                layer: p.layer,
                parts: k,
            });
        }
    }
    let mut best: Option<ParallelGain> = None;
    for t in options {
        let (next, touched) = apply(graph, units, &t)?;
        let after = stage_time(&expand(graph, &next, config)?, &touched);
        let g = ParallelGain {
            devices_needed: extra_devices(graph, units, &t).unwrap_or(0),
            transform: t,
            gain: before / after,
        };
        debug!("{:?}: gain {:.3}", g.transform, g.gain);
        if best.as_ref().is_none_or(|b| g.gain > b.gain * (1.0 + REL_TOL)) {
            best = Some(g);
        }
    }
    if let Some((layer, t)) = conv_split_time(graph, u, before, k, config) {
        let gain = before / t;
        debug!("conv split of `{layer}` x{k}: gain {gain:.3}");
        if best.is_none() {
            return Err(Error::Unsplittable(format!(
                "stage {unit} only admits a conv split (gain {gain:.3}), which is not executable"
            )));
        }
    }
    best.ok_or_else(|| Error::Unsplittable(format!("stage {unit} has no fc, conv or replicable task")))
}

/// A transform with its predicted effect on the whole pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub transform: Transform,
    pub devices_needed: usize,
    /// Predicted IPS gain divided by the devices it costs.
    pub gain_per_device: f64,
    /// Per-device stage times after the transform, largest first.
    pub stages: Vec<f64>,
    pub units: Vec<Unit>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs()).max(1e-300)
}

fn cmp_stages(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        if !close(*x, *y) {
            return x.partial_cmp(y).unwrap_or(Ordering::Equal);
        }
    }
    a.len().cmp(&b.len())
}

/// Picks the candidate with the best IPS gain per added device within
/// `budget`. Ties go to fewer devices, then to the smaller stage-time
/// profile, then to the earliest stage. Candidates that lower IPS are never
/// chosen.
pub fn choose_best(candidates: &[Candidate], budget: usize) -> Option<&Candidate> {
    let mut best: Option<&Candidate> = None;
    for c in candidates {
        let loses = c.gain_per_device < 0.0 && !close(c.gain_per_device, 0.0);
        if c.devices_needed == 0 || c.devices_needed > budget || loses {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                if !close(c.gain_per_device, b.gain_per_device) {
                    c.gain_per_device > b.gain_per_device
                } else if c.devices_needed != b.devices_needed {
                    c.devices_needed < b.devices_needed
                } else {
                    match cmp_stages(&c.stages, &b.stages) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => c.transform.unit() < b.transform.unit(),
                    }
                }
            }
        };
        if better {
            best = Some(c);
        }
    }
    best
}

fn sorted_stages(a: &Assignment) -> Vec<f64> {
    let mut v: Vec<f64> = a.predicted.stage_seconds.values().cloned().collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap_or(Ordering::Equal));
    v
}

/// Every executable transform that fits in `budget` extra devices.
pub fn candidates(graph: &ModelGraph, units: &[Unit], budget: usize, config: &PlanConfig) -> Result<Vec<Candidate>> {
    let base_ips = expand(graph, units, config)?.predicted.ips;
    let mut transforms = Vec::new();
    for (i, u) in units.iter().enumerate() {
        if u.reloads() {
            continue;
        }
        if replicable(graph, u) {
            for j in 1..=budget {
                transforms.push(Transform::Replicate {
                    unit: i,
                    replicas: u.replicas + j,
                });
            }
        }
        if u.split.is_none() {
            if let Some(p) = fc_plan(graph, u) {
                for parts in 2..=p.out.min(budget + 1) {
                    transforms.push(Transform::SplitFc {
                        unit: i,
                        layer: p.layer.clone(),
                        parts,
                    });
                }
            }
        }
    }
    let mut out = Vec::new();
    for t in transforms {
        let Some(extra) = extra_devices(graph, units, &t) else { continue };
        if extra == 0 || extra > budget {
            continue;
        }
        let (next, _) = apply(graph, units, &t)?;
        let a = expand(graph, &next, config)?;
        out.push(Candidate {
            gain_per_device: (a.predicted.ips - base_ips) / extra as f64,
            stages: sorted_stages(&a),
            devices_needed: extra,
            transform: t,
            units: next,
        });
    }
    Ok(out)
}

/// Stages for exactly `n` devices, or fewer if no transform helps.
pub fn plan_units(graph: &ModelGraph, tasks: &[Vec<String>], n: usize, config: &PlanConfig) -> Result<Vec<Unit>> {
    if n <= tasks.len() {
        return minimize_load_time(graph, tasks, n, config);
    }
    let mut units: Vec<Unit> = tasks.iter().map(|t| Unit::new(t.clone())).collect();
    let mut budget = n - tasks.len();
    while budget > 0 {
        let cands = candidates(graph, &units, budget, config)?;
        let Some(best) = choose_best(&cands, budget) else {
            warn!("{n} devices: no transform fits the remaining {budget}, leaving them idle");
            break;
        };
        debug!("{n} devices: {:?}", best.transform);
        budget -= best.devices_needed;
        units = best.units.clone();
    }
    Ok(units)
}

/// Plans every device count from 1 to `n_max`.
pub fn task_assign(graph: &ModelGraph, n_max: usize, config: &PlanConfig) -> Result<AssignmentSet> {
    if n_max == 0 {
        return Err(Error::Param("n_max must be at least 1".into()));
    }
    if n_max > u16::MAX as usize {
        return Err(Error::Param(format!("n_max {n_max} exceeds device id range")));
    }
    config.profile.device.validate()?;
    let groups = model_to_layers(graph);
    let tasks = find_min_load_tasks(graph, &groups, &config.profile.device)?;
    let mut assignments: Vec<Assignment> = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let units = plan_units(graph, &tasks, n, config)?;
        let mut a = expand(graph, &units, config)?;
        // More devices never do worse than leaving the extra one idle.
        if let Some(prev) = assignments.last() {
            if a.predicted.ips < prev.predicted.ips && !close(a.predicted.ips, prev.predicted.ips) {
                a = prev.clone();
            }
        }
        a.device_count = n;
        assignments.push(a);
    }
    Ok(AssignmentSet {
        model: graph.name.clone(),
        n_max,
        config: *config,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{LayerSpec, Padding, TensorShape};

    fn source(g: &mut ModelGraph, dims: &[usize]) {
        g.push(LayerSpec::new(
            "x",
            LayerKind::Source {
                shape: TensorShape::new(dims.to_vec()).unwrap(),
            },
            &[],
        ));
    }

    fn stages(g: &ModelGraph) -> Vec<Unit> {
        let cfg = PlanConfig::default();
        let groups = model_to_layers(g);
        find_min_load_tasks(g, &groups, &cfg.profile.device)
            .unwrap()
            .into_iter()
            .map(Unit::new)
            .collect()
    }

    #[test]
    fn swapped_fc_prefers_model_split() {
        let mut g = ModelGraph::new("fc8k", 1);
        source(&mut g, &[8192]);
        g.push(LayerSpec::new("fc", LayerKind::FullyConnected { out_size: 8192 }, &["x"]));
        g.push(LayerSpec::new("act", LayerKind::ReLU, &["fc"]));
        let g = g.validate().unwrap();
        let units = stages(&g);
        let r = model_vs_data(&g, &units, 1, 2, &PlanConfig::default()).unwrap();
        assert!(matches!(r.transform, Transform::SplitFc { parts: 2, .. }), "{r:?}");
        assert!(r.gain > 2.0, "{r:?}");
        assert_eq!(r.devices_needed, 1);
    }

    #[test]
    fn conv_stack_prefers_replication() {
        let mut g = ModelGraph::new("convs", 1);
        source(&mut g, &[32, 32, 3]);
        g.push(LayerSpec::new(
            "conv",
            LayerKind::Conv2D {
                filters: 16,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: Padding::Same,
            },
            &["x"],
        ));
        g.push(LayerSpec::new("act", LayerKind::ReLU, &["conv"]));
        g.push(LayerSpec::new("pool", LayerKind::MaxPool { window: 2, stride: 2 }, &["act"]));
        let g = g.validate().unwrap();
        let units = stages(&g);
        let cfg = PlanConfig::default();
        let r = model_vs_data(&g, &units, 1, 2, &cfg).unwrap();
        assert_eq!(r.transform, Transform::Replicate { unit: 1, replicas: 2 });
        let base = expand(&g, &units, &cfg).unwrap();
        let before = stage_time(&base, &[1]);
        let (_, conv_time) = conv_split_time(&g, &units[1], before, 2, &cfg).unwrap();
        assert!(before / conv_time < r.gain);
        let one = model_vs_data(&g, &units, 1, 1, &cfg).unwrap();
        assert_eq!((one.gain, one.devices_needed), (1.0, 0));
        assert!(matches!(
            model_vs_data(&g, &units, 0, 2, &cfg),
            Err(Error::Unsplittable(_))
        ));
    }

    fn cand(unit: usize, devices: usize, gain: f64, stages: Vec<f64>) -> Candidate {
        Candidate {
            transform: Transform::Replicate { unit, replicas: 2 },
            devices_needed: devices,
            gain_per_device: gain,
            stages,
            units: Vec::new(),
        }
    }

    #[test]
    fn choose_best_tie_breaks() {
        let c = vec![
            cand(0, 2, 0.5, vec![1.0]),
            cand(1, 1, 0.5, vec![1.0]),
            cand(2, 1, 0.5, vec![0.5]),
            cand(3, 4, 9.0, vec![0.1]),
            cand(4, 1, -1.0, vec![0.1]),
        ];
        let best = choose_best(&c, 3).unwrap();
        assert_eq!(best.transform.unit(), 2);
        assert!(choose_best(&c[4..], 3).is_none());
        assert_eq!(choose_best(&c[..2], 3).unwrap().transform.unit(), 1);
    }
}
