//! The object leaves device 1's view and enters device 3's: device 3 becomes
//! the recorder, devices 1 and 3 swap tasks, and everyone else keeps theirs.
//! Then a non-master tries to push its own table and a device drops out.
//!
//! cargo run --release --example musical_chairs

use std::sync::Arc;

use swarm_infer::engine::{run_clip, ModelParams};
use swarm_infer::harness::{frames_for, input_frames, plan};
use swarm_infer::model_ir::{build_model_with, BuildOptions, ModelName};
use swarm_infer::partition::PlanConfig;
use swarm_infer::runtime::chairs::Trigger;
use swarm_infer::runtime::cluster::{Cluster, ClusterConfig};

fn roles(c: &Cluster) -> String {
    c.table()
        .entries
        .iter()
        .map(|(d, e)| {
            let flags = format!("{}{}", if e.master { "M" } else { "" }, if e.recorder { "R" } else { "" });
            format!("{d}:{}{flags}", e.task.map_or("-".into(), |t| format!("t{t}")))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = PlanConfig::default();
    let set = plan(ModelName::TwoStream, 5, &cfg)?;
    let graph = Arc::new(build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 1))?);
    let sources = input_frames(&graph, frames_for(&graph, cfg.clip, 3), 1);
    let want = run_clip(&graph, &ModelParams::generate(&graph)?, &sources, cfg.clip)?;

    let mut cluster = Cluster::start(graph.clone(), set.get(5).unwrap(), ClusterConfig::for_plan(&cfg))?;
    println!("v{} {}", cluster.table().version, roles(&cluster));

    cluster.drop_first_update_to([4]);
    let out = cluster.musical_chairs(Trigger::MotionOn(3), &set)?;
    println!(
        "v{} {}  reloaded {:?} in {:.2}s, {} broadcast rounds",
        out.version,
        roles(&cluster),
        out.reloaded,
        out.setup_seconds,
        out.rounds
    );
    let run = cluster.run_stream(&sources)?;
    let exact = run.outputs.iter().all(|(k, o)| o.iter().all(|(n, v)| v.bit_eq(&want[*k as usize][n])));
    println!("after swap: {} inferences, exact = {exact}", run.outputs.len());

    let mut rogue = cluster.table().clone();
    rogue.version += 1;
    match cluster.propose_update(2, &rogue) {
        Ok(n) => println!("non-master update accepted by {n} devices"),
        Err(e) => println!("non-master update rejected: {e}; still v{}", cluster.table().version),
    }

    let same = cluster.musical_chairs(Trigger::MotionOn(3), &set)?;
    println!("same recorder again: v{}, reloaded {:?}", same.version, same.reloaded);

    let lost = cluster.musical_chairs(Trigger::DeviceLost(5), &set)?;
    println!("device 5 lost: v{} {}  reloaded {:?}", lost.version, roles(&cluster), lost.reloaded);
    let run = cluster.run_stream(&sources)?;
    let exact = run.outputs.iter().all(|(k, o)| o.iter().all(|(n, v)| v.bit_eq(&want[*k as usize][n])));
    println!("on 4 devices: {} inferences, exact = {exact}", run.outputs.len());
    Ok(())
}
