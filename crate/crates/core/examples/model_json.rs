//! Declares a small model in JSON, validates it, prints inferred shapes and
//! runs it once. Also round-trips a bundled model through its JSON form.

use std::collections::BTreeMap;

use swarm_infer::engine::{run_reference, Tensor};
use swarm_infer::model_ir::{build_model, ModelGraph};

const MODEL: &str = r#"{
  "name": "tiny",
  "seed": 7,
  "layers": [
    {"name": "image", "kind": {"type": "source", "shape": [8, 8, 1]}},
    {"name": "conv", "kind": {"type": "conv2_d", "filters": 4, "kernel_h": 3, "kernel_w": 3, "padding": "same"}, "inputs": ["image"]},
    {"name": "act", "kind": {"type": "relu"}, "inputs": ["conv"]},
    {"name": "pool", "kind": {"type": "max_pool", "window": 2, "stride": 2}, "inputs": ["act"]},
    {"name": "fc", "kind": {"type": "fully_connected", "out_size": 3}, "inputs": ["pool"]},
    {"name": "probs", "kind": {"type": "softmax"}, "inputs": ["fc"]},
    {"name": "out", "kind": {"type": "sink"}, "inputs": ["probs"]}
  ]
}"#;

fn main() -> anyhow::Result<()> {
    let g = ModelGraph::from_json(MODEL)?;
    for name in g.topo_order() {
        println!("{name:>6}: {}", g.shape(name).unwrap());
    }
    let x = Tensor::from_dims(&[8, 8, 1], (0..64).map(|i| i as f32 / 64.0).collect())?;
    let out = run_reference(&g, &BTreeMap::from([("image".to_string(), x)]))?;
    println!("probabilities: {:?}", out["out"].data());

    let alexnet = build_model("alexnet", 0.125)?;
    let text = alexnet.to_json()?;
    let back = ModelGraph::from_json(&text)?;
    println!("alexnet JSON: {} bytes, round-trip equal: {}", text.len(), back == alexnet);
    Ok(())
}
