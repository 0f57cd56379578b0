//! Times this host's fc and conv kernels and prints the resulting device
//! profile next to the default one.

use swarm_infer::cost::{profile_host, DeviceProfile};

fn main() -> anyhow::Result<()> {
    let measured = profile_host(5)?;
    let default = DeviceProfile::default();
    println!("default flops/s:  {:.3e}", default.flops_per_sec);
    println!("this host flops/s: {:.3e}", measured.flops_per_sec);
    println!("{}", serde_json::to_string_pretty(&measured)?);
    Ok(())
}
