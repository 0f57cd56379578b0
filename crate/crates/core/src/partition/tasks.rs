//! Packing groups into memory-feasible tasks, and merging tasks onto fewer
//! devices than there are tasks.

use crate::cost::{costs, load_of, memory_of, DeviceProfile};
use crate::error::{Error, Result};
use crate::model_ir::{LayerKind, ModelGraph};

use super::groups::LayerGroup;
use super::plan::Unit;
use super::predict::expand;
use super::PlanConfig;

/// Compositions are enumerated exhaustively up to this many tasks.
pub const EXHAUSTIVE_LIMIT: usize = 12;

fn memory(graph: &ModelGraph, layers: &[String], device: &DeviceProfile) -> Result<u64> {
    Ok(memory_of(&costs(graph, layers)?, device.overhead_factor))
}

fn fits(graph: &ModelGraph, layers: &[String], device: &DeviceProfile) -> Result<bool> {
    Ok(memory(graph, layers, device)? <= device.mem_size)
}

fn is_source_group(graph: &ModelGraph, g: &LayerGroup) -> bool {
    g.has_kind(graph, |k| matches!(k, LayerKind::Source { .. }))
}

/// Whether `g` may extend task `task`: everything `g` reads from outside
/// comes from `task`, and everything leaving `task` goes into `g`.
fn joinable(graph: &ModelGraph, task: &[String], g: &LayerGroup) -> bool {
    let in_task = |n: &str| task.iter().any(|l| l == n);
    let reads_ok = g.layers.iter().all(|l| {
        graph.layer(l).unwrap().inputs.iter().all(|i| g.contains(i) || in_task(i))
    });
    let writes_ok = task.iter().all(|l| {
        graph
            .consumers(l)
            .iter()
            .all(|c| in_task(c) || g.contains(c))
    });
    reads_ok && writes_ok
}

/// Greedy left-to-right packing of groups into tasks that fit in memory.
/// Source groups always form their own task.
pub fn find_min_load_tasks(
    graph: &ModelGraph,
    groups: &[LayerGroup],
    device: &DeviceProfile,
) -> Result<Vec<Vec<String>>> {
    for g in groups {
        let needed = memory(graph, &g.layers, device)?;
        if needed > device.mem_size {
            return Err(Error::Unsatisfiable {
                group: g.layers.join("+"),
                needed,
                available: device.mem_size,
            });
        }
    }
    let mut tasks = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for g in groups {
        if is_source_group(graph, g) {
            if !current.is_empty() {
                tasks.push(std::mem::take(&mut current));
            }
            tasks.push(g.layers.clone());
            continue;
        }
        if !current.is_empty() && joinable(graph, &current, g) {
            let mut merged = current.clone();
            merged.extend(g.layers.iter().cloned());
            if fits(graph, &merged, device)? {
                current = merged;
                continue;
            }
        }
        if !current.is_empty() {
            tasks.push(std::mem::take(&mut current));
        }
        current = g.layers.clone();
    }
    if !current.is_empty() {
        tasks.push(current);
    }
    Ok(tasks)
}

/// Packs consecutive tasks into resident sets that each fit in memory.
fn resident_sets(graph: &ModelGraph, tasks: &[Vec<String>], device: &DeviceProfile) -> Result<Vec<Vec<String>>> {
    let mut sets: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for t in tasks {
        let mut merged = current.clone();
        merged.extend(t.iter().cloned());
        if current.is_empty() || fits(graph, &merged, device)? {
            current = merged;
        } else {
            sets.push(std::mem::replace(&mut current, t.clone()));
        }
    }
    if !current.is_empty() {
        sets.push(current);
    }
    Ok(sets)
}

fn bucket(graph: &ModelGraph, tasks: &[Vec<String>], device: &DeviceProfile) -> Result<Unit> {
    let layers: Vec<String> = tasks.iter().flatten().cloned().collect();
    let mut unit = Unit::new(layers.clone());
    if !fits(graph, &layers, device)? {
        unit.resident_sets = resident_sets(graph, tasks, device)?;
    }
    Ok(unit)
}

/// Reload seconds one bucket adds to each inference.
fn reload_seconds(graph: &ModelGraph, unit: &Unit, device: &DeviceProfile) -> Result<f64> {
    if unit.resident_sets.len() < 2 {
        return Ok(0.0);
    }
    unit.resident_sets
        .iter()
        .map(|s| Ok(load_of(&costs(graph, s)?, device)))
        .sum()
}

/// All ways to cut `len` items into `parts` non-empty contiguous runs, as
/// lists of run lengths.
fn compositions(len: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            acc.push(left);
            out.push(acc.clone());
            acc.pop();
            return;
        }
        for first in 1..=left - (parts - 1) {
            acc.push(first);
            rec(left - first, parts - 1, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    if parts >= 1 && parts <= len {
        rec(len, parts, &mut Vec::new(), &mut out);
    }
    out
}

fn buckets_for(graph: &ModelGraph, tasks: &[Vec<String>], runs: &[usize], device: &DeviceProfile) -> Result<Vec<Unit>> {
    let mut start = 0;
    runs.iter()
        .map(|&len| {
            let b = bucket(graph, &tasks[start..start + len], device);
            start += len;
            b
        })
        .collect()
}

/// Merges `tasks` into `n` contiguous buckets with the least reload time per
/// inference. Ties go to the higher predicted throughput, then to the first
/// composition found.
pub fn minimize_load_time(
    graph: &ModelGraph,
    tasks: &[Vec<String>],
    n: usize,
    config: &PlanConfig,
) -> Result<Vec<Unit>> {
    let device = &config.profile.device;
    if n == 0 {
        return Err(Error::Param("device count must be at least 1".into()));
    }
    if n >= tasks.len() {
        return tasks.iter().map(|t| bucket(graph, std::slice::from_ref(t), device)).collect();
    }
    let score = |units: &[Unit]| -> Result<(f64, f64)> {
        let reload: f64 = units
            .iter()
            .map(|u| reload_seconds(graph, u, device))
            .sum::<Result<f64>>()?;
        let ips = expand(graph, units, config)?.predicted.ips;
        Ok((reload, ips))
    };
    let better = |a: (f64, f64), b: (f64, f64)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);

    if tasks.len() <= EXHAUSTIVE_LIMIT {
        let mut best: Option<(Vec<Unit>, (f64, f64))> = None;
        for runs in compositions(tasks.len(), n) {
            let units = buckets_for(graph, tasks, &runs, device)?;
            let s = score(&units)?;
            if best.as_ref().is_none_or(|(_, b)| better(s, *b)) {
                best = Some((units, s));
            }
        }
        return Ok(best.unwrap().0);
    }

    // Greedy: merge the adjacent pair that adds the least reload.
    let mut runs = vec![1; tasks.len()];
    while runs.len() > n {
        let mut best: Option<(usize, (f64, f64))> = None;
        for i in 0..runs.len() - 1 {
            let mut trial = runs.clone();
            trial[i] += trial.remove(i + 1);
            let s = score(&buckets_for(graph, tasks, &trial, device)?)?;
            if best.is_none_or(|(_, b)| better(s, b)) {
                best = Some((i, s));
            }
        }
        let i = best.unwrap().0;
        runs[i] += runs.remove(i + 1);
    }
    buckets_for(graph, tasks, &runs, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{build_model_with, BuildOptions, ModelName};
    use crate::partition::model_to_layers;

    fn graph(name: ModelName) -> ModelGraph {
        build_model_with(name, &BuildOptions::default()).unwrap()
    }

    #[test]
    fn two_stream_has_five_tasks() {
        let g = graph(ModelName::TwoStream);
        let t = find_min_load_tasks(&g, &model_to_layers(&g), &DeviceProfile::default()).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[4], ["fc_2", "relu_fc_2", "fc_3", "softmax", "output"]);
        assert!(t[3].contains(&"fc_1".to_string()));
        assert!(!t[3].contains(&"fc_2".to_string()));
    }

    #[test]
    fn unlimited_memory_keeps_only_branch_boundaries() {
        let g = graph(ModelName::TwoStream);
        let d = DeviceProfile {
            mem_size: u64::MAX / 4,
            ..DeviceProfile::default()
        };
        let t = find_min_load_tasks(&g, &model_to_layers(&g), &d).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], ["frames", "flow"]);
        assert_eq!(t[3].last().unwrap(), "output");
        let alex = graph(ModelName::AlexNet);
        assert_eq!(find_min_load_tasks(&alex, &model_to_layers(&alex), &d).unwrap().len(), 2);
    }

    #[test]
    fn tight_memory_gives_one_task_per_group() {
        use crate::model_ir::{LayerSpec, TensorShape};
        let mut g = ModelGraph::new("chain", 1);
        g.push(LayerSpec::new(
            "x",
            LayerKind::Source {
                shape: TensorShape::new(vec![64]).unwrap(),
            },
            &[],
        ));
        let mut prev = "x".to_string();
        for i in 0..4 {
            let name = format!("fc{i}");
            g.push(LayerSpec::new(&name, LayerKind::FullyConnected { out_size: 64 }, &[&prev]));
            prev = name;
        }
        let g = g.validate().unwrap();
        let groups = model_to_layers(&g);
        let d = DeviceProfile {
            mem_size: memory(&g, &groups[1].layers, &DeviceProfile::default()).unwrap(),
            ..DeviceProfile::default()
        };
        let t = find_min_load_tasks(&g, &groups, &d).unwrap();
        assert_eq!(t.len(), groups.len());
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn oversized_group_is_unsatisfiable() {
        let g = graph(ModelName::TwoStream);
        let d = DeviceProfile {
            mem_size: 100_000_000,
            ..DeviceProfile::default()
        };
        match find_min_load_tasks(&g, &model_to_layers(&g), &d) {
            Err(Error::Unsatisfiable { group, .. }) => assert!(group.contains("fc_")),
            other => panic!("expected unsatisfiable, got {other:?}"),
        }
    }

    #[test]
    fn composition_counts() {
        assert_eq!(compositions(5, 1), vec![vec![5]]);
        assert_eq!(compositions(5, 5), vec![vec![1; 5]]);
        assert_eq!(compositions(5, 2).len(), 4);
        assert_eq!(compositions(12, 6).len(), 462);
    }

    #[test]
    fn one_device_reloads_and_equal_count_is_identity() {
        let g = graph(ModelName::TwoStream);
        let cfg = PlanConfig::default();
        let t = find_min_load_tasks(&g, &model_to_layers(&g), &cfg.profile.device).unwrap();
        let one = minimize_load_time(&g, &t, 1, &cfg).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].resident_sets.len() >= 2);
        let same = minimize_load_time(&g, &t, t.len(), &cfg).unwrap();
        let layers: Vec<Vec<String>> = same.iter().map(|u| u.layers.clone()).collect();
        assert_eq!(layers, t);
    }
}
