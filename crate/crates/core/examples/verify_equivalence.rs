//! Runs each device count of a plan on the cluster and compares every output
//! bit-for-bit with the single-process reference.
//!
//! cargo run --example verify_equivalence -- [model] [n_max] [seed]

use swarm_infer::harness::{verify, VerifyOptions};
use swarm_infer::model_ir::ModelName;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model: ModelName = args.first().map_or("two_stream", String::as_str).parse()?;
    let n_max: usize = args.get(1).map_or(Ok(12), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(1), |s| s.parse())?;
    let opts = VerifyOptions {
        seed,
        ..VerifyOptions::default()
    };
    let n_list: Vec<usize> = (1..=n_max).collect();
    let t0 = std::time::Instant::now();
    let report = verify(model, &n_list, &opts)?;
    for c in &report.cases {
        let verdict = if c.exact { "exact" } else { "MISMATCH" };
        println!("{model} n={:>2}: {} inferences, max |diff| {:e} {verdict}", c.n, c.inferences, c.max_abs_diff);
        if let Some(m) = &c.mismatch {
            println!("    first difference: layer {} tag {} on device {}", m.layer, m.tag, m.device);
        }
    }
    for (n, why) in &report.skipped {
        println!("{model} n={n:>2}: skipped ({why})");
    }
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
