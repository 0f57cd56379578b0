//! Plans a zoo model for 1..=12 devices and prints the table.
//!
//! `cargo run --example plan -- [two_stream|alexnet|vgg16] [n_max]`

use swarm_infer::model_ir::{build_model, ModelName};
use swarm_infer::partition::{plan_dump, task_assign, PlanConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let model: ModelName = args.next().as_deref().unwrap_or("two_stream").parse()?;
    let n_max: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let graph = build_model(&model.to_string(), 1.0)?;
    let set = task_assign(&graph, n_max, &PlanConfig::default())?;
    print!("{}", plan_dump(&set));
    Ok(())
}
