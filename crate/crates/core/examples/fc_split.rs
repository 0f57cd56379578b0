//! Splits an fc layer's rows across k devices and checks that the
//! concatenated part outputs equal the unsplit output exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarm_infer::engine::{forward_fc, LayerParams, Tensor};
use swarm_infer::partition::split_fc;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (inp, out) = (512, 1030);
    let w = Tensor::from_dims(&[out, inp], (0..out * inp).map(|_| rng.gen_range(-0.1..0.1)).collect())?;
    let b = Tensor::vector((0..out).map(|_| rng.gen_range(-0.1..0.1)).collect())?;
    let params = LayerParams::Dense { weights: w, bias: b };
    let x = Tensor::vector((0..inp).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let whole = forward_fc(&x, &params)?;
    for k in 2..=4 {
        let split = split_fc(&params, k)?;
        let parts: Vec<Tensor> = split.parts.iter().map(|p| forward_fc(&x, p)).collect::<Result<_, _>>()?;
        let merged = split.merge(&parts)?;
        println!("k={k}: rows {:?} exact = {}", split.rows, merged.bit_eq(&whole));
    }
    Ok(())
}
