use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use swarm_infer::cost::{profile_host, CostProfile};
use swarm_infer::harness::{self, input_frames, BenchOptions, VerifyOptions, DESK_SCALE};
use swarm_infer::model_ir::{build_model_with, BuildOptions, ModelName};
use swarm_infer::partition::{plan_dump, AssignmentSet};
use swarm_infer::runtime::cluster::{Cluster, ClusterConfig, Transport};
use swarm_infer::Error;

#[derive(Parser)]
#[command(name = "swarm-infer", version, about = "Plan, verify, run and benchmark partitioned inference")]
struct Cli {
    #[arg(long, global = true, default_value = "two_stream")]
    model: String,
    /// Width multiplier for executed models.
    #[arg(long, global = true, default_value_t = DESK_SCALE)]
    scale: f64,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Device and network constants (JSON).
    #[arg(long, global = true)]
    profile_file: Option<PathBuf>,
    /// Output file, or directory for bench reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Loopback,
}

impl From<TransportArg> for Transport {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::InProcess => Transport::InProcess,
            TransportArg::Loopback => Transport::Loopback,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the assignment for every device count up to n-max.
    Plan {
        #[arg(long, default_value_t = 12)]
        n_max: usize,
    },
    /// Compare distributed outputs with the single-process reference.
    Verify {
        #[arg(long, value_delimiter = ',', default_values_t = 1..=12)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        inferences: usize,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: TransportArg,
    },
    /// Stream frames through one assignment and report metrics.
    Run {
        /// Assignment set written by `plan --out`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: TransportArg,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long)]
        simulate_latency: bool,
    },
    /// Simulated-latency runs across device counts, with energy.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 5, 8, 10, 12])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Time this host's kernels and write a device profile.
    Profile {
        #[arg(long, default_value_t = 5)]
        iterations: usize,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Unsatisfiable { .. } | Error::Unsplittable(_) | Error::Infeasible(_)) => 2,
        _ => 3,
    }
}

fn write_out(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    if let Some(p) = out {
        std::fs::write(p, text)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let model: ModelName = cli.model.parse()?;
    let config = harness::plan_config(cli.profile_file.as_deref())?;
    match cli.command {
        Command::Plan { n_max } => {
            let set = harness::plan(model, n_max, &config)?;
            print!("{}", plan_dump(&set));
            write_out(&cli.out, &set.to_json()?)?;
        }
        Command::Verify {
            n,
            inferences,
            transport,
        } => {
            let opts = VerifyOptions {
                scale: cli.scale,
                seed: cli.seed,
                inferences,
                transport: transport.into(),
                plan: config,
            };
            let report = harness::verify(model, &n, &opts)?;
            for c in &report.cases {
                println!(
                    "n={:>2} inferences={} max_abs_diff={:e} {}",
                    c.n,
                    c.inferences,
                    c.max_abs_diff,
                    if c.exact { "exact" } else { "MISMATCH" }
                );
                if let Some(m) = &c.mismatch {
                    println!("  n={} tag={} layer={} device={}", c.n, m.tag, m.layer, m.device);
                }
            }
            for (n, why) in &report.skipped {
                println!("n={n:>2} skipped: {why}");
            }
            write_out(&cli.out, &serde_json::to_string_pretty(&report)?)?;
            if !report.passed() {
                return Ok(1);
            }
        }
        Command::Run {
            plan,
            n,
            transport,
            fps,
            frames,
            simulate_latency,
        } => {
            let set = match plan {
                Some(p) => AssignmentSet::load(p)?,
                None => harness::plan(model, n.unwrap_or(5), &config)?,
            };
            let n = n.unwrap_or(set.n_max);
            let a = set
                .get(n)
                .ok_or_else(|| Error::Infeasible(format!("plan has no entry for {n} devices")))?;
            let name: ModelName = set.model.parse()?;
            let graph = Arc::new(build_model_with(name, &BuildOptions::new(cli.scale, cli.seed))?);
            let cfg = ClusterConfig {
                transport: transport.into(),
                simulate_latency,
                fps,
                ..ClusterConfig::for_plan(&set.config)
            };
            let mut cluster = Cluster::start(graph.clone(), a, cfg)?;
            let run = cluster.run_stream(&input_frames(&graph, frames, cli.seed))?;
            let m = &run.metrics;
            println!(
                "{} on {n} devices: {} inferences, {:.4} ips, t_forward {:.3}s (compute {:.3}, comm {:.3}, reload {:.3}), {} drops, setup {:.2}s",
                set.model,
                m.inferences,
                m.ips,
                m.t_forward_seconds,
                m.breakdown.compute,
                m.breakdown.comm,
                m.breakdown.reload,
                m.drops,
                m.setup_seconds
            );
            write_out(&cli.out, &serde_json::to_string_pretty(m)?)?;
        }
        Command::Bench { n, frames, fps } => {
            let opts = BenchOptions {
                scale: cli.scale,
                seed: cli.seed,
                frames,
                fps,
                plan: config,
                ..BenchOptions::default()
            };
            let report = harness::bench(model, &n, &opts)?;
            print!("{}", report.to_table());
            let dir = cli.out.unwrap_or_else(|| PathBuf::from("."));
            let path = report.save_timestamped(dir)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Profile { iterations } => {
            let profile = CostProfile {
                device: profile_host(iterations)?,
                ..config.profile
            };
            let text = serde_json::to_string_pretty(&profile)?;
            println!("{text}");
            write_out(&cli.out, &text)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
