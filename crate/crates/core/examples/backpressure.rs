//! Drives a pipeline with a camera ten times faster than it can keep up
//! with. Inboxes stay bounded, almost-full signals halve the sampling rate,
//! and every recorded frame still comes out exactly right.
//!
//! cargo run --release --example backpressure -- [model] [n] [frames]

use std::sync::Arc;

use swarm_infer::engine::{run_clip, ModelParams};
use swarm_infer::harness::{input_frames, plan};
use swarm_infer::model_ir::{build_model_with, BuildOptions, ModelName};
use swarm_infer::partition::PlanConfig;
use swarm_infer::runtime::cluster::{Cluster, ClusterConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: ModelName = args.first().map_or("two_stream", String::as_str).parse()?;
    let n: usize = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let frames: usize = args.get(2).map_or(Ok(1000), |s| s.parse())?;

    let cfg = PlanConfig::default();
    let set = plan(model, n, &cfg)?;
    let a = set.get(n).unwrap();
    let graph = Arc::new(build_model_with(model, &BuildOptions::new(0.125, 1))?);
    let sources = input_frames(&graph, frames, 1);
    let config = ClusterConfig {
        simulate_latency: true,
        fps: 10.0 * a.predicted.ips,
        ..ClusterConfig::for_plan(&cfg)
    };
    let mut cluster = Cluster::start(graph.clone(), a, config)?;
    let run = cluster.run_stream(&sources)?;

    let want = run_clip(&graph, &ModelParams::generate(&graph)?, &sources, cfg.clip)?;
    let exact = run.outputs.len() == want.len()
        && run
            .outputs
            .iter()
            .all(|(k, o)| o.iter().all(|(name, v)| v.bit_eq(&want[*k as usize][name])));
    println!("camera {:.3} fps against predicted {:.3} ips", config.fps, a.predicted.ips);
    println!(
        "recorded {} frames, {} camera ticks dropped, {} almost-full signals",
        run.recorded_frames, run.metrics.drops, run.almost_full_signals
    );
    println!("max inbox occupancy per device: {:?} (capacity {})", run.max_occupancy, config.inbox_capacity);
    println!("{} inferences, simulated {:.3} ips, exact = {exact}", run.outputs.len(), run.metrics.ips);
    Ok(())
}
