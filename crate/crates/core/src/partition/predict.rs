//! Turns logical stages into device tasks and predicts their throughput.

use std::collections::{BTreeMap, BTreeSet};

use crate::cost::{comm_latency, layer_cost, load_of, memory_of, TaskLayer};
use crate::error::Result;
use crate::model_ir::{LayerKind, ModelGraph, Rate};

use super::plan::Unit;
use super::split::split_rows;
use super::{
    Assignment, DeviceId, Edge, PlanConfig, Predicted, Replica, SplitPart, Task, TaskTiming,
    WindowInput,
};

/// Firings of `layer` per inference.
fn multiplicity(graph: &ModelGraph, config: &PlanConfig, layer: &str) -> f64 {
    match graph.rate(layer) {
        Some(Rate::PerFrame { .. }) if graph.is_sequence() => config.clip.stride as f64,
        _ => 1.0,
    }
}

fn window_specs(graph: &ModelGraph, config: &PlanConfig, layers: &[String]) -> Result<Vec<WindowInput>> {
    let mut out = Vec::new();
    for name in layers {
        let spec = graph.layer(name).unwrap();
        let length = match &spec.kind {
            LayerKind::FlowStack { window_len } => window_len + 1,
            LayerKind::TemporalPyramid { .. } => {
                let ahead = match graph.rate(&spec.inputs[0]) {
                    Some(Rate::PerFrame { lookahead }) => lookahead,
                    _ => 0,
                };
                config.clip.pyramid_len(ahead)?
            }
            _ => continue,
        };
        for input in &spec.inputs {
            out.push(WindowInput {
                input: input.clone(),
                length,
            });
        }
    }
    Ok(out)
}

fn timing(
    graph: &ModelGraph,
    config: &PlanConfig,
    layers: &[String],
    split: Option<&SplitPart>,
    resident_sets: &[Vec<String>],
) -> Result<TaskTiming> {
    let device = &config.profile.device;
    let task_layer = |name: &str| -> Result<TaskLayer<'_>> {
        let rows = match split {
            Some(s) if s.is_partial(name) => {
                let out = graph.shape(&s.layer).unwrap().numel();
                Some(split_rows(out, s.part_count, s.part_index).len())
            }
            _ => None,
        };
        let name = graph.layer(name).unwrap().name.as_str();
        Ok(TaskLayer { name, rows })
    };
    let sets: Vec<Vec<String>> = if resident_sets.len() > 1 {
        resident_sets.to_vec()
    } else {
        vec![layers.to_vec()]
    };
    let mut t = TaskTiming {
        resident_sets: sets.clone(),
        ..TaskTiming::default()
    };
    for set in &sets {
        let tl: Vec<TaskLayer<'_>> = set.iter().map(|l| task_layer(l)).collect::<Result<_>>()?;
        let costs = tl
            .iter()
            .map(|l| layer_cost(graph, l))
            .collect::<Result<Vec<_>>>()?;
        let factor = if memory_of(&costs, 1.0) > device.swap_threshold {
            device.swap_penalty
        } else {
            1.0
        };
        for (l, c) in tl.iter().zip(&costs) {
            t.layer_seconds
                .insert(l.name.to_string(), c.ops / device.flops_per_sec * factor);
            t.out_bytes.insert(l.name.to_string(), c.out_elems * 4);
        }
        t.set_load_seconds.push(load_of(&costs, device));
    }
    Ok(t)
}

/// Expands stages into tasks on devices `1..=n` and fills in predictions.
pub fn expand(graph: &ModelGraph, units: &[Unit], config: &PlanConfig) -> Result<Assignment> {
    let mut tasks: Vec<Task> = Vec::new();
    for (u, unit) in units.iter().enumerate() {
        let mut push = |layers: Vec<String>, split: Option<SplitPart>, replica: Replica| -> Result<()> {
            let timing = timing(graph, config, &layers, split.as_ref(), &unit.resident_sets)?;
            tasks.push(Task {
                id: tasks.len(),
                unit: u,
                window_specs: window_specs(graph, config, &layers)?,
                layers,
                split,
                replica,
                timing,
            });
            Ok(())
        };
        match &unit.split {
            None => {
                for index in 0..unit.replicas {
                    push(unit.layers.clone(), None, Replica { index, count: unit.replicas })?;
                }
            }
            Some(s) => {
                for part in 0..s.parts {
                    let part_spec = SplitPart {
                        layer: s.layer.clone(),
                        glue: s.glue.clone(),
                        part_index: part,
                        part_count: s.parts,
                    };
                    let mut layers = if part == 0 { s.head.clone() } else { Vec::new() };
                    layers.push(s.layer.clone());
                    layers.extend(s.glue.iter().cloned());
                    let count = if part == 0 { unit.replicas } else { 1 };
                    for index in 0..count {
                        push(layers.clone(), Some(part_spec.clone()), Replica { index, count })?;
                    }
                }
            }
        }
    }
    let tasks: BTreeMap<DeviceId, Task> = tasks
        .into_iter()
        .map(|t| ((t.id + 1) as DeviceId, t))
        .collect();
    let mut a = Assignment {
        device_count: tasks.len(),
        tasks,
        edges: Vec::new(),
        predicted: Predicted::default(),
    };
    a.edges = edges(graph, &a);
    a.predicted = predict(graph, &a, config);
    Ok(a)
}

fn edges(graph: &ModelGraph, a: &Assignment) -> Vec<Edge> {
    let mut out = Vec::new();
    for (&d, t) in &a.tasks {
        for layer in &t.layers {
            let mut seen = BTreeSet::new();
            for c in graph.consumers(layer) {
                if t.computes(c) {
                    continue;
                }
                for (&e, u) in &a.tasks {
                    if e != d && u.computes(c) && seen.insert(e) {
                        out.push(Edge {
                            producer: d,
                            consumer: e,
                            layer: layer.clone(),
                            bytes: t.timing.out_bytes[layer],
                        });
                    }
                }
            }
        }
    }
    out
}

/// Seconds of inbound communication per firing of each external input.
fn inbound(graph: &ModelGraph, a: &Assignment, d: DeviceId, per_inference: bool, config: &PlanConfig) -> f64 {
    let mut seen = BTreeSet::new();
    let mut total = 0.0;
    for e in a.edges.iter().filter(|e| e.consumer == d) {
        let p = &a.tasks[&e.producer];
        // Replicas of one producer deliver each item once between them.
        if !seen.insert((e.layer.clone(), p.group_key())) {
            continue;
        }
        let m = if per_inference {
            multiplicity(graph, config, &e.layer)
        } else {
            1.0
        };
        total += m * comm_latency(e.bytes, &config.profile.comm);
    }
    total
}

fn device_seconds(graph: &ModelGraph, a: &Assignment, d: DeviceId, per_inference: bool, config: &PlanConfig) -> f64 {
    let t = &a.tasks[&d];
    let compute: f64 = t
        .layers
        .iter()
        .map(|l| {
            let m = if per_inference {
                multiplicity(graph, config, l)
            } else {
                1.0
            };
            t.timing.layer_seconds[l] * m
        })
        .sum();
    compute + inbound(graph, a, d, per_inference, config) + t.timing.reload_seconds_per_cycle()
}

pub fn predict(graph: &ModelGraph, a: &Assignment, config: &PlanConfig) -> Predicted {
    let mut p = Predicted::default();
    for (&d, t) in &a.tasks {
        let stage = device_seconds(graph, a, d, true, config) / t.replica.count as f64;
        p.stage_seconds.insert(d, stage);
        p.load_seconds.insert(d, t.timing.initial_load_seconds());
        p.reload_seconds += t.timing.reload_seconds_per_cycle();
    }
    let worst = p.stage_seconds.values().cloned().fold(0.0, f64::max);
    p.ips = if worst > 0.0 { 1.0 / worst } else { f64::INFINITY };
    // Longest path over the device graph. Producers always have lower ids.
    let mut finish: BTreeMap<DeviceId, f64> = BTreeMap::new();
    for &d in a.tasks.keys() {
        let start = a
            .edges
            .iter()
            .filter(|e| e.consumer == d)
            .filter_map(|e| finish.get(&e.producer))
            .cloned()
            .fold(0.0, f64::max);
        finish.insert(d, start + device_seconds(graph, a, d, false, config));
    }
    p.t_forward = finish.values().cloned().fold(0.0, f64::max);
    p
}
