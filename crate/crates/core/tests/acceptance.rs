//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line, then
//! asserts.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swarm_infer::cost::{comm_latency, energy, CommModel, DeviceProfile, PowerProfile};
use swarm_infer::engine::{forward_fc, run_clip, temporal_pyramid, LayerParams, ModelParams, Tensor};
use swarm_infer::harness::{bench, frames_for, input_frames, plan, verify, BenchOptions, VerifyOptions};
use swarm_infer::metrics::RunMetrics;
use swarm_infer::model_ir::{build_model_with, BuildOptions, ModelName};
use swarm_infer::partition::{split_fc, Assignment, AssignmentSet, Parallelism, PlanConfig, Task};
use swarm_infer::runtime::chairs::Trigger;
use swarm_infer::runtime::cluster::{Cluster, ClusterConfig};

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("{} criterion {id:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn full_plan(model: ModelName, n_max: usize) -> AssignmentSet {
    plan(model, n_max, &PlanConfig::default()).unwrap()
}

fn tasks_with<'a>(a: &'a Assignment, layer: &str) -> Vec<&'a Task> {
    a.task_list().into_iter().filter(|t| t.computes(layer)).collect()
}

fn fc_rows(t: &Task, out: usize) -> usize {
    let s = t.split.as_ref().unwrap();
    swarm_infer::partition::split_rows(out, s.part_count, s.part_index).len()
}

#[test]
fn c01_oracle_equivalence() {
    let t0 = Instant::now();
    let n_list: Vec<usize> = (1..=12).collect();
    let mut cases = 0;
    let mut failures = Vec::new();
    for model in ModelName::ALL {
        for seed in [1, 2, 3] {
            let opts = VerifyOptions {
                seed,
                inferences: 4,
                ..VerifyOptions::default()
            };
            let r = verify(model, &n_list, &opts).unwrap();
            for c in &r.cases {
                cases += 1;
                if !c.exact || c.inferences != 4 {
                    failures.push(format!("{model} seed {seed} n={} diff {:e} at {:?}", c.n, c.max_abs_diff, c.mismatch));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = failures.is_empty() && cases == 3 * 3 * 12 && secs < 300.0;
    report(
        1,
        "oracle equivalence",
        ok,
        &format!("{cases} (model, seed, n) cases, {} mismatches, {secs:.1}s {failures:?}", failures.len()),
    );
}

#[test]
fn c02_two_stream_structure() {
    let set = full_plan(ModelName::TwoStream, 12);
    let g = build_model_with(ModelName::TwoStream, &BuildOptions::default()).unwrap();
    let out = |l: &str| g.shape(l).unwrap().numel();
    let mut notes = Vec::new();

    // n=5: fc_1 alone on one device, fc_2 and fc_3 together on another.
    let a5 = set.get(5).unwrap();
    let fc1 = tasks_with(a5, "fc_1");
    let fc2 = tasks_with(a5, "fc_2");
    let fc3 = tasks_with(a5, "fc_3");
    let n5 = fc1.len() == 1
        && fc2.len() == 1
        && fc3.len() == 1
        && fc2[0].id == fc3[0].id
        && fc1[0].id != fc2[0].id
        && !fc1[0].computes("fc_2")
        && out("fc_1") == 8192
        && out("fc_2") + out("fc_3") == 8192 + 51;
    notes.push(format!("n=5 {}", if n5 { "8k | 8k+51" } else { "wrong" }));

    // n=8: each 8k fc in two 4k parts.
    let a8 = set.get(8).unwrap();
    let n8 = ["fc_1", "fc_2"].iter().all(|l| {
        let ts = tasks_with(a8, l);
        ts.len() == 2
            && ts.iter().all(|t| {
                matches!(t.parallelism(), Parallelism::ModelSplit { part_count: 2, .. })
                    && t.split.as_ref().unwrap().layer == *l
                    && fc_rows(t, out(l)) == 4096
            })
    });
    notes.push(format!("n=8 {}", if n8 { "4k+4k per fc" } else { "wrong" }));

    // n=10 and n=12: both stream CNNs replicated 2 and 3 ways.
    let streams_replicated = |a: &Assignment, r: usize| {
        ["s", "t"].iter().all(|sfx| {
            let chain = ["conv1_", "conv2_", "conv3_", "fc_1"].map(|l| format!("{l}{sfx}"));
            let ts = tasks_with(a, &chain[0]);
            ts.len() == r
                && ts.iter().all(|t| {
                    t.parallelism()
                        == Parallelism::DataReplica {
                            replica_index: t.replica.index,
                            replica_count: r,
                        }
                        && chain.iter().all(|x| t.computes(x))
                })
        })
    };
    let n10 = streams_replicated(set.get(10).unwrap(), 2);
    let n12 = streams_replicated(set.get(12).unwrap(), 3);
    notes.push(format!("n=10 {}", if n10 { "streams x2" } else { "wrong" }));
    notes.push(format!("n=12 {}", if n12 { "streams x3" } else { "wrong" }));
    report(2, "two_stream plan structure", n5 && n8 && n10 && n12, &notes.join(", "));
}

#[test]
fn c03_alexnet_vgg_structure() {
    let alex = full_plan(ModelName::AlexNet, 4);
    let a4 = alex.get(4).unwrap();
    let alex_ok = tasks_with(a4, "fc_1").len() >= 2
        && tasks_with(a4, "fc_1")
            .iter()
            .all(|t| t.split.as_ref().is_some_and(|s| s.layer == "fc_1"));

    let vgg = full_plan(ModelName::Vgg16, 11);
    let v11 = vgg.get(11).unwrap();
    let g = build_model_with(ModelName::Vgg16, &BuildOptions::default()).unwrap();
    // No conv block is cut between tasks: whoever runs one layer of a block
    // runs all of it.
    let blocks_whole = (1..=5).all(|b| {
        let layers: Vec<&String> = g
            .topo_order()
            .iter()
            .filter(|l| l.starts_with(&format!("conv{b}_")) || l.starts_with(&format!("relu{b}_")) || **l == format!("pool{b}"))
            .collect();
        v11.task_list()
            .iter()
            .filter(|t| layers.iter().any(|l| t.computes(l)))
            .all(|t| layers.iter().all(|l| t.computes(l)))
    });
    let fc1 = tasks_with(v11, "fc_1");
    let fc1_split = fc1.len() >= 2
        && fc1.iter().all(|t| t.split.as_ref().is_some_and(|s| s.layer == "fc_1"));
    let fc2 = tasks_with(v11, "fc_2");
    let fc3 = tasks_with(v11, "fc_3");
    let tail = fc2.len() == 1 && fc3.len() == 1 && fc2[0].id == fc3[0].id;
    report(
        3,
        "alexnet/vgg16 plan structure",
        alex_ok && blocks_whole && fc1_split && tail,
        &format!(
            "alexnet n=4 fc_1 split: {alex_ok}; vgg16 n=11 blocks whole: {blocks_whole}, fc_1 split: {fc1_split}, fc_2+fc_3 together: {tail}"
        ),
    );
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9))
}

#[test]
fn c04_c05_monotone_throughput_and_reload() {
    let n_list = [1, 4, 5, 8, 10, 12];
    let r = bench(
        ModelName::TwoStream,
        &n_list,
        &BenchOptions {
            frames: 40,
            ..BenchOptions::default()
        },
    )
    .unwrap();
    let predicted: Vec<f64> = r.rows.iter().map(|x| x.predicted_ips).collect();
    let simulated: Vec<f64> = r.rows.iter().map(|x| x.metrics.ips).collect();
    let speedup = simulated[2] / simulated[0];
    let ok = r.rows.len() == n_list.len() && non_decreasing(&predicted) && non_decreasing(&simulated) && speedup > 10.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    report(
        4,
        "monotone throughput",
        ok,
        &format!(
            "n={n_list:?} predicted [{}] simulated [{}], n=5/n=1 = {speedup:.1}x",
            fmt(&predicted),
            fmt(&simulated)
        ),
    );

    let one = &r.rows[0].metrics;
    let share = one.breakdown.reload / one.t_forward_seconds;
    report(
        5,
        "reload dominance",
        share > 0.5,
        &format!(
            "one device: reload {:.2}s of t_forward {:.2}s ({:.0}%)",
            one.breakdown.reload,
            one.t_forward_seconds,
            share * 100.0
        ),
    );
}

#[test]
fn c06_fc_split_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = 0;
    for _ in 0..1000 {
        let out = rng.gen_range(4..=4096usize);
        // Log-uniform input width keeps the run short while covering 4..4096.
        let inp = (4.0f64 * 1024f64.powf(rng.gen::<f64>())).round() as usize;
        let k = rng.gen_range(2..=4usize);
        let w = Tensor::from_dims(&[out, inp], (0..out * inp).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::vector((0..out).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = LayerParams::Dense { weights: w, bias: b };
        let x = Tensor::vector((0..inp).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let whole = forward_fc(&x, &p).unwrap();
        let split = split_fc(&p, k).unwrap();
        let parts: Vec<Tensor> = split.parts.iter().map(|q| forward_fc(&x, q).unwrap()).collect();
        let mut concatenated = Vec::with_capacity(out);
        for part in &parts {
            concatenated.extend_from_slice(part.data());
        }
        let same = concatenated.len() == whole.len()
            && concatenated
                .iter()
                .zip(whole.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            bad += 1;
        }
    }
    report(6, "fc split exactness", bad == 0, &format!("1000 random layers, {bad} mismatches"));
}

#[test]
fn c07_comm_model() {
    let m = CommModel::default();
    let zero = comm_latency(0, &m);
    let mb = comm_latency(1_000_000, &m);
    let ok = (zero - 0.002).abs() <= 1e-12 && (mb - 0.202).abs() <= 1e-12;
    report(7, "comm model", ok, &format!("0 B -> {zero} s, 1 MB -> {mb} s"));
}

#[test]
fn c08_backpressure() {
    let cfg = PlanConfig::default();
    let set = full_plan(ModelName::TwoStream, 5);
    let a = set.get(5).unwrap();
    let graph = Arc::new(build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 1)).unwrap());
    let frames = 1000;
    let sources = input_frames(&graph, frames, 7);
    let config = ClusterConfig {
        simulate_latency: true,
        fps: 10.0 * a.predicted.ips,
        ..ClusterConfig::for_plan(&cfg)
    };
    let mut cluster = Cluster::start(graph.clone(), a, config).unwrap();
    let run = cluster.run_stream(&sources).unwrap();
    let bounded = run.max_occupancy.values().all(|&o| o <= config.inbox_capacity);
    let want = run_clip(&graph, &ModelParams::generate(&graph).unwrap(), &sources, cfg.clip).unwrap();
    let expected = cfg.clip.inferences(run.recorded_frames);
    let complete = run.recorded_frames == frames && run.outputs.len() == expected && want.len() == expected;
    let exact = run
        .outputs
        .iter()
        .all(|(k, o)| o.iter().all(|(n, v)| v.bit_eq(&want[*k as usize][n])));
    let pressured = run.metrics.drops > 0 && run.almost_full_signals > 0;
    report(
        8,
        "backpressure safety",
        bounded && complete && exact && pressured,
        &format!(
            "camera {:.2} fps vs {:.3} ips; max occupancy {:?} (cap {}); {} ticks dropped, {} almost-full; {}/{} inferences exact: {exact}",
            config.fps,
            a.predicted.ips,
            run.max_occupancy.values().max(),
            config.inbox_capacity,
            run.metrics.drops,
            run.almost_full_signals,
            run.outputs.len(),
            expected
        ),
    );
}

#[test]
fn c09_musical_chairs() {
    let cfg = PlanConfig::default();
    let set = full_plan(ModelName::TwoStream, 5);
    let graph = Arc::new(build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 2)).unwrap());
    let sources = input_frames(&graph, frames_for(&graph, cfg.clip, 4), 2);
    let want = run_clip(&graph, &ModelParams::generate(&graph).unwrap(), &sources, cfg.clip).unwrap();
    let mut cluster = Cluster::start(graph.clone(), set.get(5).unwrap(), ClusterConfig::for_plan(&cfg)).unwrap();
    let before: BTreeMap<u16, Option<usize>> = cluster.table().entries.iter().map(|(d, e)| (*d, e.task)).collect();
    let v0 = cluster.table().version;
    let writes0 = cluster.master_writes();
    let recorder0 = cluster.table().recorder();

    let out = cluster.musical_chairs(Trigger::MotionOn(3), &set).unwrap();
    let after: BTreeMap<u16, Option<usize>> = cluster.table().entries.iter().map(|(d, e)| (*d, e.task)).collect();
    let versions: Vec<u64> = cluster.tables().values().map(|t| t.version).collect();
    let increased = out.version > v0 && versions.iter().all(|v| *v == out.version);
    let one_write = cluster.master_writes() - writes0 == 1;
    let swapped = after[&1] == before[&3] && after[&3] == before[&1];
    let others_kept = (2..=5).filter(|d| *d != 3).all(|d| after[&d] == before[&d]);
    let two_reloads = out.reloaded == vec![1, 3];
    let run = cluster.run_stream(&sources).unwrap();
    let exact = run.outputs.len() == want.len()
        && run
            .outputs
            .iter()
            .all(|(k, o)| o.iter().all(|(n, v)| v.bit_eq(&want[*k as usize][n])));
    report(
        9,
        "musical chairs",
        recorder0 == Some(1) && cluster.table().recorder() == Some(3) && increased && one_write && swapped && others_kept && two_reloads && exact,
        &format!(
            "v{v0} -> v{}, master writes +{}, reloaded {:?}, 1<->3 swapped: {swapped}, others kept: {others_kept}, post-swap exact: {exact}",
            out.version,
            cluster.master_writes() - writes0,
            out.reloaded
        ),
    );
}

/// Range sizes built by dealing frames out one at a time, so earlier ranges
/// get the extra frame.
fn oracle_pyramid(frames: &[Vec<f32>], levels: u32) -> Vec<Vec<f32>> {
    let n = frames.len();
    let mut rows = Vec::new();
    for level in 0..levels {
        let parts = 1usize << level;
        let mut sizes = vec![0usize; parts];
        for t in 0..n {
            sizes[t % parts] += 1;
        }
        let mut start = 0;
        for size in sizes {
            let members: Vec<usize> = if size == 0 {
                vec![start.min(n - 1)]
            } else {
                (0..n).filter(|t| *t >= start && *t < start + size).collect()
            };
            let row = (0..frames[0].len())
                .map(|j| members.iter().map(|&t| frames[t][j]).fold(f32::NEG_INFINITY, f32::max))
                .collect();
            rows.push(row);
            start += size;
        }
    }
    rows
}

#[test]
fn c10_pyramid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    for _ in 0..500 {
        let len = rng.gen_range(1..=64usize);
        let d = rng.gen_range(1..=16usize);
        let frames: Vec<Vec<f32>> = (0..len).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let tensors: Vec<Tensor> = frames.iter().map(|f| Tensor::vector(f.clone()).unwrap()).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let got = temporal_pyramid(&refs, 4).unwrap();
        let want = oracle_pyramid(&frames, 4);
        let flat: Vec<f32> = want.concat();
        if got.dims() != [15, d] || want.len() != 15 || got.data() != flat.as_slice() {
            bad += 1;
        }
    }
    report(10, "pyramid oracle", bad == 0, &format!("500 random sequences, {bad} mismatches, 15 rows each"));
}

#[test]
fn c11_energy_accounting() {
    let metrics = RunMetrics {
        wall_seconds: 20.0,
        per_device_busy_seconds: vec![20.0, 12.5, 3.0, 0.0],
        ..RunMetrics::default()
    };
    let device = DeviceProfile {
        power: PowerProfile {
            idle_watts: 1.3,
            observed_watts: 3.0,
            ..PowerProfile::default()
        },
        ..DeviceProfile::default()
    };
    let e = energy(&metrics, &vec![device; 4]).unwrap();
    // Four devices idle for 20 s at 1.3 W; 35.5 busy seconds at 1.7 W above idle.
    let static_j = 4.0 * 1.3 * 20.0;
    let dynamic_j = (3.0 - 1.3) * (20.0 + 12.5 + 3.0);
    let ok = (e.static_joules - static_j).abs() <= 1e-9
        && (e.dynamic_joules - dynamic_j).abs() <= 1e-9
        && (e.total() - (static_j + dynamic_j)).abs() <= 1e-9;
    report(
        11,
        "energy accounting",
        ok,
        &format!("static {} J (want {static_j}), dynamic {} J (want {dynamic_j})", e.static_joules, e.dynamic_joules),
    );
}
