//! Pools a sequence of per-frame feature vectors into a fixed 15-row
//! temporal pyramid (levels of 1, 2, 4 and 8 segments).

use swarm_infer::engine::{temporal_pyramid, Tensor};

fn main() -> anyhow::Result<()> {
    for len in [1, 5, 16] {
        let frames: Vec<Tensor> = (0..len)
            .map(|t| Tensor::vector(vec![t as f32, (len - t) as f32]))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor> = frames.iter().collect();
        let p = temporal_pyramid(&refs, 4)?;
        let rows: Vec<Vec<f32>> = p.data().chunks(2).map(<[f32]>::to_vec).collect();
        println!("{len:>2} frames -> {:?}, first rows {:?}", p.dims(), &rows[..4]);
    }
    Ok(())
}
