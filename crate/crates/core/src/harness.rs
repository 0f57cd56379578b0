//! Verification against the reference, benchmarking and plan reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{energy, CostProfile, Energy};
use crate::engine::{run_clip, run_clip_trace, ClipSpec, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::metrics::RunMetrics;
use crate::model_ir::{build_model_with, BuildOptions, LayerKind, ModelGraph, ModelName};
use crate::partition::{plan_dump, task_assign, Assignment, AssignmentSet, DeviceId, PlanConfig};
use crate::runtime::cluster::{Cluster, ClusterConfig, StreamRun, Transport};

/// Default desk scale for executed models.
pub const DESK_SCALE: f64 = 0.125;

/// Seeded uniform frames in `[0, 1)` for every source of `graph`.
pub fn input_frames(graph: &ModelGraph, count: usize, seed: u64) -> BTreeMap<String, Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f7a3e5);
    graph
        .inputs
        .iter()
        .map(|s| {
            let LayerKind::Source { shape } = &graph.layer(s).unwrap().kind else {
                unreachable!("graph inputs are sources")
            };
            let frames = (0..count)
                .map(|_| {
                    let data = (0..shape.numel()).map(|_| rng.gen::<f32>()).collect();
                    Tensor::new(shape.clone(), data).expect("sized to shape")
                })
                .collect();
            (s.clone(), frames)
        })
        .collect()
}

/// Frames needed for `inferences` results from `graph`.
pub fn frames_for(graph: &ModelGraph, clip: ClipSpec, inferences: usize) -> usize {
    if graph.is_sequence() {
        clip.clip_len + clip.stride * inferences.saturating_sub(1)
    } else {
        inferences
    }
}

/// Plans on full-size dimensions; execution uses the scaled graph, whose
/// layer names are the same.
pub fn plan(model: ModelName, n_max: usize, config: &PlanConfig) -> Result<AssignmentSet> {
    let full = build_model_with(model, &BuildOptions::default())?;
    task_assign(&full, n_max, config)
}

/// Human-readable plan table for `1..=n_max`.
pub fn dump_plans(model: ModelName, n_max: usize, config: &PlanConfig) -> Result<String> {
    Ok(plan_dump(&plan(model, n_max, config)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub tag: u64,
    pub layer: String,
    pub device: DeviceId,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyCase {
    pub n: usize,
    pub inferences: usize,
    pub max_abs_diff: f64,
    pub exact: bool,
    /// First differing value, in topological then tag order.
    pub mismatch: Option<Mismatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model: String,
    pub scale: f64,
    pub seed: u64,
    pub cases: Vec<VerifyCase>,
    /// Device counts the plan could not serve, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.exact)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub scale: f64,
    pub seed: u64,
    pub inferences: usize,
    pub transport: Transport,
    pub plan: PlanConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            scale: DESK_SCALE,
            seed: 1,
            inferences: 3,
            transport: Transport::InProcess,
            plan: PlanConfig::default(),
        }
    }
}

/// A fault to inject before running: `(planned device, layer)`.
pub type Fault = (DeviceId, String);

/// Runs `assignment` on `graph` and compares every output with the reference.
pub fn verify_assignment(
    graph: Arc<ModelGraph>,
    assignment: &Assignment,
    sources: &BTreeMap<String, Vec<Tensor>>,
    config: ClusterConfig,
    fault: Option<&Fault>,
) -> Result<VerifyCase> {
    let params = ModelParams::generate(&graph)?;
    let want = run_clip(&graph, &params, sources, config.clip)?;
    let mut cluster = Cluster::start(graph.clone(), assignment, config)?;
    if let Some((d, layer)) = fault {
        cluster.corrupt_weight(*d, layer)?;
    }
    let run = cluster.run_stream(sources)?;
    let mut diff: f64 = 0.0;
    let mut exact = run.outputs.len() == want.len();
    for (tag, outs) in &run.outputs {
        let Some(w) = want.get(*tag as usize) else {
            exact = false;
            continue;
        };
        for (name, v) in outs {
            diff = diff.max(v.max_abs_diff(&w[name]));
            exact &= v.bit_eq(&w[name]);
        }
    }
    let mismatch = if exact {
        None
    } else {
        cluster.set_trace(true);
        let traced = cluster.run_stream(sources)?;
        locate(&graph, &params, sources, config.clip, &traced)?
    };
    Ok(VerifyCase {
        n: assignment.device_count,
        inferences: run.outputs.len(),
        max_abs_diff: diff,
        exact,
        mismatch,
    })
}

fn locate(
    graph: &ModelGraph,
    params: &ModelParams,
    sources: &BTreeMap<String, Vec<Tensor>>,
    clip: ClipSpec,
    run: &StreamRun,
) -> Result<Option<Mismatch>> {
    let reference = run_clip_trace(graph, params, sources, clip)?;
    let mut worst: Option<(usize, Mismatch)> = None;
    for (device, entries) in &run.trace {
        for e in entries {
            let Some(want) = reference.get(&e.layer).and_then(|m| m.get(&e.tag)) else {
                continue;
            };
            if e.value.bit_eq(want) {
                continue;
            }
            let topo = graph.topo_index(&e.layer).unwrap_or(usize::MAX);
            let better = match &worst {
                None => true,
                Some((t, m)) => (topo, e.tag) < (*t, m.tag),
            };
            if better {
                worst = Some((
                    topo,
                    Mismatch {
                        tag: e.tag,
                        layer: e.layer.clone(),
                        device: *device,
                        max_abs_diff: e.value.max_abs_diff(want),
                    },
                ));
            }
        }
    }
    Ok(worst.map(|w| w.1))
}

/// Checks distributed execution of `model` against the reference for each
/// device count in `n_list`.
pub fn verify(model: ModelName, n_list: &[usize], opts: &VerifyOptions) -> Result<VerifyReport> {
    verify_with_fault(model, n_list, opts, None)
}

pub fn verify_with_fault(
    model: ModelName,
    n_list: &[usize],
    opts: &VerifyOptions,
    fault: Option<&Fault>,
) -> Result<VerifyReport> {
    let n_max = n_list.iter().copied().max().unwrap_or(1);
    let set = plan(model, n_max, &opts.plan)?;
    let graph = Arc::new(build_model_with(model, &BuildOptions::new(opts.scale, opts.seed))?);
    let frames = frames_for(&graph, opts.plan.clip, opts.inferences);
    let sources = input_frames(&graph, frames, opts.seed);
    let config = ClusterConfig {
        transport: opts.transport,
        ..ClusterConfig::for_plan(&opts.plan)
    };
    let mut report = VerifyReport {
        model: model.to_string(),
        scale: opts.scale,
        seed: opts.seed,
        cases: Vec::new(),
        skipped: Vec::new(),
    };
    for &n in n_list {
        let Some(a) = set.get(n) else {
            report.skipped.push((n, "no plan".into()));
            continue;
        };
        let case = verify_assignment(graph.clone(), a, &sources, config, fault)?;
        log::info!("{model} n={n}: max diff {}", case.max_abs_diff);
        report.cases.push(case);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub predicted_ips: f64,
    pub predicted_t_forward: f64,
    pub metrics: RunMetrics,
    pub energy: Energy,
    pub energy_per_inference: Energy,
    /// One line per device: parallelism and layer span.
    pub summary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub scale: f64,
    pub frames: usize,
    pub fps: f64,
    pub rows: Vec<BenchRow>,
    pub skipped: Vec<(usize, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub scale: f64,
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub plan: PlanConfig,
    pub transport: Transport,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            scale: DESK_SCALE,
            seed: 1,
            frames: 24,
            fps: 30.0,
            plan: PlanConfig::default(),
            transport: Transport::InProcess,
        }
    }
}

fn summarize(a: &Assignment) -> Vec<String> {
    a.tasks
        .iter()
        .map(|(d, t)| {
            let first = t.layers.first().map(String::as_str).unwrap_or("");
            let last = t.layers.last().map(String::as_str).unwrap_or("");
            format!("dev {d}: {} {first}..{last}", t.parallelism())
        })
        .collect()
}

/// Simulated-latency runs for each device count.
pub fn bench(model: ModelName, n_list: &[usize], opts: &BenchOptions) -> Result<BenchReport> {
    let mut report = BenchReport {
        model: model.to_string(),
        scale: opts.scale,
        frames: opts.frames,
        fps: opts.fps,
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    if opts.frames == 0 || n_list.is_empty() {
        return Ok(report);
    }
    let n_max = n_list.iter().copied().max().unwrap();
    let set = plan(model, n_max, &opts.plan)?;
    let graph = Arc::new(build_model_with(model, &BuildOptions::new(opts.scale, opts.seed))?);
    let sources = input_frames(&graph, opts.frames, opts.seed);
    let config = ClusterConfig {
        transport: opts.transport,
        simulate_latency: true,
        fps: opts.fps,
        ..ClusterConfig::for_plan(&opts.plan)
    };
    for &n in n_list {
        let Some(a) = set.get(n) else {
            report.skipped.push((n, "no plan".into()));
            continue;
        };
        let mut cluster = Cluster::start(graph.clone(), a, config)?;
        let run = cluster.run_stream(&sources)?;
        let devices = vec![opts.plan.profile.device; run.metrics.per_device_busy_seconds.len()];
        let e = energy(&run.metrics, &devices)?;
        let per = if run.metrics.inferences > 0 {
            let k = 1.0 / run.metrics.inferences as f64;
            Energy {
                static_joules: e.static_joules * k,
                dynamic_joules: e.dynamic_joules * k,
            }
        } else {
            Energy::default()
        };
        report.rows.push(BenchRow {
            n,
            predicted_ips: a.predicted.ips,
            predicted_t_forward: a.predicted.t_forward,
            metrics: run.metrics,
            energy: e,
            energy_per_inference: per,
            summary: summarize(a),
        });
    }
    Ok(report)
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} (scale {}, {} frames at {} fps)\n{:>3} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>6} {:>9} {:>10}\n",
            self.model,
            self.scale,
            self.frames,
            self.fps,
            "n",
            "pred ips",
            "sim ips",
            "t_fwd s",
            "compute",
            "comm",
            "reload",
            "drops",
            "setup s",
            "J/inf"
        );
        for r in &self.rows {
            let m = &r.metrics;
            s += &format!(
                "{:>3} {:>9.4} {:>9.4} {:>9.3} {:>8.3} {:>8.3} {:>8.3} {:>6} {:>9.2} {:>10.3}\n",
                r.n,
                r.predicted_ips,
                m.ips,
                m.t_forward_seconds,
                m.breakdown.compute,
                m.breakdown.comm,
                m.breakdown.reload,
                m.drops,
                m.setup_seconds,
                r.energy_per_inference.total()
            );
        }
        for (n, why) in &self.skipped {
            s += &format!("n={n} skipped: {why}\n");
        }
        s
    }

    /// Writes the report as `bench-<model>-<unix seconds>.json` in `dir`.
    pub fn save_timestamped(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_err(|e| Error::Runtime(e.to_string()))?
            .as_secs();
        std::fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(format!("bench-{}-{secs}.json", self.model));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Plan config with a profile file applied, if given.
pub fn plan_config(profile_file: Option<&Path>) -> Result<PlanConfig> {
    let profile = match profile_file {
        Some(p) => CostProfile::load(p)?,
        None => CostProfile::default(),
    };
    Ok(PlanConfig {
        profile,
        ..PlanConfig::default()
    })
}
