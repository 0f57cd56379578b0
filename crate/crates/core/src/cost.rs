//! Latency, memory, load-time, communication and energy models.
//!
//! Layer costs are analytic: operation counts from shapes, divided by a
//! device's effective throughput. A task whose raw footprint exceeds the
//! device's swap threshold runs `swap_penalty` times slower.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{forward_conv, forward_fc, LayerParams, Tensor};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::model_ir::{LayerKind, ModelGraph, Padding};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub idle_watts: f64,
    pub busy_watts: f64,
    /// Average draw while processing.
    pub observed_watts: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            idle_watts: 1.3,
            busy_watts: 6.5,
            observed_watts: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    pub mem_size: u64,
    pub flops_per_sec: f64,
    /// Bytes per second when loading weights.
    pub load_bandwidth: f64,
    /// Fixed cost of bringing up any task.
    pub load_setup_seconds: f64,
    pub swap_threshold: u64,
    pub swap_penalty: f64,
    /// Framework overhead multiplier applied to weight bytes.
    pub overhead_factor: f64,
    pub power: PowerProfile,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        let mem_size = 1_000_000_000;
        Self {
            mem_size,
            flops_per_sec: 1.8e8,
            load_bandwidth: 20e6,
            load_setup_seconds: 1.0,
            swap_threshold: mem_size / 5,
            swap_penalty: 4.0,
            overhead_factor: 2.0,
            power: PowerProfile::default(),
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.flops_per_sec,
            self.load_bandwidth,
            self.overhead_factor,
            self.power.idle_watts,
        ];
        if self.mem_size == 0 || self.swap_threshold == 0 || positive.iter().any(|v| !(*v > 0.0))
        {
            return Err(Error::Param("device profile values must be positive".into()));
        }
        if self.load_setup_seconds < 0.0 {
            return Err(Error::Param("load setup time must be >= 0".into()));
        }
        if !(self.swap_penalty >= 1.0) || self.overhead_factor < 1.0 {
            return Err(Error::Param(
                "swap penalty and overhead factor must be >= 1".into(),
            ));
        }
        let p = &self.power;
        if !(p.idle_watts <= p.observed_watts && p.observed_watts <= p.busy_watts) {
            return Err(Error::Param("power must satisfy idle <= observed <= busy".into()));
        }
        Ok(())
    }
}

/// Affine message latency: `base + per_kb * bytes / 1000`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub per_kb_seconds: f64,
    pub base_seconds: f64,
}

impl Default for CommModel {
    fn default() -> Self {
        Self {
            per_kb_seconds: 0.0002,
            base_seconds: 0.002,
        }
    }
}

pub fn comm_latency(bytes: u64, model: &CommModel) -> f64 {
    model.base_seconds + model.per_kb_seconds * (bytes as f64 / 1000.0)
}

/// Device and network constants, stored as a profile file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostProfile {
    pub device: DeviceProfile,
    pub comm: CommModel,
}

impl CostProfile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: CostProfile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.device.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub compute_seconds: f64,
    pub memory_bytes: u64,
    pub load_seconds: f64,
    pub comm_in_bytes: u64,
    pub comm_out_bytes: u64,
}

/// Shape-derived cost of one layer, or of a row slice of an fc layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub ops: f64,
    pub param_scalars: u64,
    /// Elements read plus elements written.
    pub activation_elems: u64,
    pub out_elems: u64,
}

/// A layer of a task, optionally restricted to `rows` of its output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskLayer<'a> {
    pub name: &'a str,
    pub rows: Option<usize>,
}

impl<'a> From<&'a str> for TaskLayer<'a> {
    fn from(name: &'a str) -> Self {
        Self { name, rows: None }
    }
}

impl<'a> From<&'a String> for TaskLayer<'a> {
    fn from(name: &'a String) -> Self {
        Self {
            name: name.as_str(),
            rows: None,
        }
    }
}

pub fn layer_cost(graph: &ModelGraph, layer: &TaskLayer<'_>) -> Result<LayerCost> {
    let spec = graph
        .layer(layer.name)
        .ok_or_else(|| Error::Graph(format!("unknown layer `{}`", layer.name)))?;
    let unvalidated = || Error::Graph(format!("layer `{}` has no inferred shape", layer.name));
    let out = graph.shape(layer.name).ok_or_else(unvalidated)?;
    let in_elems: u64 = spec
        .inputs
        .iter()
        .map(|i| graph.shape(i).map(|s| s.numel() as u64).ok_or_else(unvalidated))
        .sum::<Result<u64>>()?;
    let full_out = out.numel() as u64;
    let out_elems = layer.rows.map_or(full_out, |r| r as u64);
    let (ops, params) = match &spec.kind {
        LayerKind::FullyConnected { .. } => {
            (2.0 * in_elems as f64 * out_elems as f64, in_elems * out_elems + out_elems)
        }
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            ..
        } => {
            let c = *graph.shape(&spec.inputs[0]).ok_or_else(unvalidated)?.dims().last().unwrap();
            let taps = (kernel_h * kernel_w * c) as u64;
            let f = *filters as u64;
            let frac = out_elems as f64 / full_out as f64;
            (
                2.0 * full_out as f64 * taps as f64 * frac,
                ((f * taps + f) as f64 * frac).round() as u64,
            )
        }
        LayerKind::MaxPool { window, .. } => ((out_elems * (*window * *window) as u64) as f64, 0),
        LayerKind::BatchNorm => {
            let c = *out.dims().last().unwrap() as u64;
            (2.0 * out_elems as f64, 4 * c)
        }
        LayerKind::FlowStack { .. } => (2.0 * out_elems as f64, 0),
        LayerKind::Source { .. } => (0.0, 0),
        LayerKind::ReLU
        | LayerKind::Softmax
        | LayerKind::Sink
        | LayerKind::Concat
        | LayerKind::TemporalPyramid { .. } => (out_elems as f64, 0),
    };
    Ok(LayerCost {
        ops,
        param_scalars: params,
        activation_elems: in_elems + out_elems,
        out_elems,
    })
}

pub(crate) fn costs<'a, I, T>(graph: &ModelGraph, task: I) -> Result<Vec<LayerCost>>
where
    I: IntoIterator<Item = T>,
    T: Into<TaskLayer<'a>>,
{
    task.into_iter()
        .map(|l| layer_cost(graph, &l.into()))
        .collect()
}

pub fn weight_bytes(costs: &[LayerCost]) -> u64 {
    costs.iter().map(|c| c.param_scalars * 4).sum()
}

pub(crate) fn memory_of(costs: &[LayerCost], overhead_factor: f64) -> u64 {
    let peak = costs.iter().map(|c| c.activation_elems * 4).max().unwrap_or(0);
    (weight_bytes(costs) as f64 * overhead_factor).round() as u64 + peak
}

pub(crate) fn compute_of(costs: &[LayerCost], device: &DeviceProfile) -> f64 {
    let ops: f64 = costs.iter().map(|c| c.ops).sum();
    let base = ops / device.flops_per_sec;
    if memory_of(costs, 1.0) > device.swap_threshold {
        base * device.swap_penalty
    } else {
        base
    }
}

pub(crate) fn load_of(costs: &[LayerCost], device: &DeviceProfile) -> f64 {
    weight_bytes(costs) as f64 / device.load_bandwidth + device.load_setup_seconds
}

/// Parameter bytes times `overhead_factor` plus the peak activation bytes.
pub fn estimate_memory<'a, I, T>(graph: &ModelGraph, task: I, overhead_factor: f64) -> Result<u64>
where
    I: IntoIterator<Item = T>,
    T: Into<TaskLayer<'a>>,
{
    Ok(memory_of(&costs(graph, task)?, overhead_factor))
}

pub fn estimate_compute<'a, I, T>(graph: &ModelGraph, task: I, device: &DeviceProfile) -> Result<f64>
where
    I: IntoIterator<Item = T>,
    T: Into<TaskLayer<'a>>,
{
    Ok(compute_of(&costs(graph, task)?, device))
}

pub fn estimate_load_time<'a, I, T>(
    graph: &ModelGraph,
    task: I,
    device: &DeviceProfile,
) -> Result<f64>
where
    I: IntoIterator<Item = T>,
    T: Into<TaskLayer<'a>>,
{
    Ok(load_of(&costs(graph, task)?, device))
}

/// All estimates for one task. Communication counts the task's external
/// inputs and the outputs that leave it.
pub fn estimate_task(graph: &ModelGraph, task: &[TaskLayer<'_>], device: &DeviceProfile) -> Result<CostEstimate> {
    let c: Vec<LayerCost> = task.iter().map(|l| layer_cost(graph, l)).collect::<Result<_>>()?;
    let inside = |n: &str| task.iter().any(|l| l.name == n);
    let mut comm_in = 0;
    let mut comm_out = 0;
    for (l, lc) in task.iter().zip(&c) {
        let spec = graph.layer(l.name).unwrap();
        for i in &spec.inputs {
            if !inside(i) {
                comm_in += graph.shape(i).map_or(0, |s| s.numel() as u64) * 4;
            }
        }
        if graph.consumers(l.name).iter().any(|c| !inside(c)) {
            comm_out += lc.out_elems * 4;
        }
    }
    Ok(CostEstimate {
        compute_seconds: compute_of(&c, device),
        memory_bytes: memory_of(&c, device.overhead_factor),
        load_seconds: load_of(&c, device),
        comm_in_bytes: comm_in,
        comm_out_bytes: comm_out,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub static_joules: f64,
    pub dynamic_joules: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.static_joules + self.dynamic_joules
    }
}

/// Static energy is idle draw over the wall time on every device; dynamic
/// energy is the observed-minus-idle draw over each device's busy time.
pub fn energy(metrics: &RunMetrics, devices: &[DeviceProfile]) -> Result<Energy> {
    if metrics.per_device_busy_seconds.len() != devices.len() {
        return Err(Error::Param(format!(
            "{} busy times for {} devices",
            metrics.per_device_busy_seconds.len(),
            devices.len()
        )));
    }
    let wall = metrics.wall_seconds;
    let mut e = Energy::default();
    for (busy, d) in metrics.per_device_busy_seconds.iter().zip(devices) {
        if *busy > wall || *busy < 0.0 {
            return Err(Error::Param(format!(
                "busy time {busy} s outside wall time {wall} s"
            )));
        }
        e.static_joules += d.power.idle_watts * wall;
        e.dynamic_joules += (d.power.observed_watts - d.power.idle_watts) * busy;
    }
    Ok(e)
}

/// Times the fc and conv kernels on this host and returns a profile whose
/// throughput reflects the measurement. Other constants keep their defaults.
pub fn profile_host(iterations: usize) -> Result<DeviceProfile> {
    let iterations = iterations.max(1);
    let fc = LayerParams::Dense {
        weights: Tensor::from_dims(&[512, 1024], vec![0.01; 512 * 1024])?,
        bias: Tensor::from_dims(&[512], vec![0.0; 512])?,
    };
    let x = Tensor::from_dims(&[1024], vec![0.5; 1024])?;
    let conv = LayerParams::Dense {
        weights: Tensor::from_dims(&[32, 3, 3, 32], vec![0.01; 32 * 9 * 32])?,
        bias: Tensor::from_dims(&[32], vec![0.0; 32])?,
    };
    let img = Tensor::from_dims(&[16, 12, 32], vec![0.5; 16 * 12 * 32])?;
    let fc_ops = 2.0 * 512.0 * 1024.0;
    let conv_ops = 2.0 * (16 * 12 * 32 * 9 * 32) as f64;
    let start = Instant::now();
    for _ in 0..iterations {
        std::hint::black_box(forward_fc(std::hint::black_box(&x), &fc)?);
        std::hint::black_box(forward_conv(std::hint::black_box(&img), &conv, 1, Padding::Same)?);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(DeviceProfile {
        flops_per_sec: (fc_ops + conv_ops) * iterations as f64 / secs,
        ..DeviceProfile::default()
    })
}
