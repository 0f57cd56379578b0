//! Simulated-latency benchmark across device counts, with energy per
//! inference. Writes a timestamped JSON report next to the table.
//!
//! cargo run --release --example bench -- [model] [frames] [n,n,...]

use swarm_infer::harness::{bench, BenchOptions};
use swarm_infer::model_ir::ModelName;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: ModelName = args.first().map_or("two_stream", String::as_str).parse()?;
    let frames: usize = args.get(1).map_or(Ok(40), |s| s.parse())?;
    let n_list: Vec<usize> = match args.get(2) {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![1, 4, 5, 8, 10, 12],
    };
    let opts = BenchOptions {
        frames,
        ..BenchOptions::default()
    };
    let report = bench(model, &n_list, &opts)?;
    print!("{}", report.to_table());
    let path = report.save_timestamped(std::env::temp_dir())?;
    println!("report: {}", path.display());
    Ok(())
}
