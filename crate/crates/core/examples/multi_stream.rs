//! Two cameras share twelve devices: each stream gets six devices and runs
//! the six-device assignment, and each is checked against the reference.
//!
//! cargo run --release --example multi_stream

use std::collections::BTreeMap;
use std::sync::Arc;

use swarm_infer::engine::{run_clip, ModelParams};
use swarm_infer::harness::{frames_for, input_frames, plan};
use swarm_infer::model_ir::{build_model_with, BuildOptions, ModelName};
use swarm_infer::partition::PlanConfig;
use swarm_infer::runtime::cluster::ClusterConfig;
use swarm_infer::runtime::streams::{activate_streams, run_streams, start_streams, StreamRequest};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = PlanConfig::default();
    let set = plan(ModelName::TwoStream, 12, &cfg)?;
    let graph = Arc::new(build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 1))?);
    let devices: Vec<u16> = (1..=12).collect();
    let requests = [StreamRequest { id: 0, priority: 1 }, StreamRequest { id: 1, priority: 1 }];
    let split = activate_streams(&requests, &devices)?;
    for (id, devs) in &split.active {
        println!("stream {id}: devices {devs:?}");
    }

    let frames = frames_for(&graph, cfg.clip, 4);
    let inputs: BTreeMap<u16, _> = split
        .active
        .keys()
        .map(|id| (*id, input_frames(&graph, frames, 100 + *id as u64)))
        .collect();
    let mut clusters = start_streams(graph.clone(), &set, &split, ClusterConfig::for_plan(&cfg))?;
    let runs = run_streams(&mut clusters, &inputs)?;
    let params = ModelParams::generate(&graph)?;
    for (id, run) in &runs {
        let want = run_clip(&graph, &params, &inputs[id], cfg.clip)?;
        let exact = run.outputs.len() == want.len()
            && run.outputs.iter().all(|(k, o)| o.iter().all(|(n, v)| v.bit_eq(&want[*k as usize][n])));
        println!("stream {id}: {} inferences, exact = {exact}", run.outputs.len());
    }

    let short = activate_streams(&requests, &[1, 2, 3])?;
    println!("with 3 devices: active {:?}, deferred {:?}", short.active, short.deferred);
    Ok(())
}
