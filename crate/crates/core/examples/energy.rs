//! Static and dynamic energy for a run with known busy times, plus the
//! communication latency line.

use swarm_infer::cost::{comm_latency, energy, CommModel, DeviceProfile};
use swarm_infer::metrics::RunMetrics;

fn main() -> anyhow::Result<()> {
    let metrics = RunMetrics {
        wall_seconds: 10.0,
        per_device_busy_seconds: vec![10.0, 4.0, 0.5],
        ..RunMetrics::default()
    };
    let devices = vec![DeviceProfile::default(); 3];
    let e = energy(&metrics, &devices)?;
    println!(
        "static {:.2} J, dynamic {:.2} J, total {:.2} J",
        e.static_joules,
        e.dynamic_joules,
        e.total()
    );
    let comm = CommModel::default();
    for bytes in [0u64, 1_000, 1_000_000] {
        println!("{bytes:>9} bytes: {:.6} s", comm_latency(bytes, &comm));
    }
    Ok(())
}
