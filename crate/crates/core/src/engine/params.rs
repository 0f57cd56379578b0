use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::model_ir::{LayerKind, ModelGraph};

/// Bound of the uniform weight distribution.
pub const WEIGHT_RANGE: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerParams {
    /// fc weights are `out x in`; conv weights are `filters x kh x kw x in_ch`.
    Dense { weights: Tensor, bias: Tensor },
    BatchNorm(BatchNormStats),
}

impl LayerParams {
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Dense { weights, .. } => Some(weights),
            LayerParams::BatchNorm(_) => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            LayerParams::Dense { bias, .. } => Some(bias),
            LayerParams::BatchNorm(_) => None,
        }
    }

    pub fn batchnorm(&self) -> Option<&BatchNormStats> {
        match self {
            LayerParams::BatchNorm(s) => Some(s),
            LayerParams::Dense { .. } => None,
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            LayerParams::Dense { weights, bias } => weights.len() + bias.len(),
            LayerParams::BatchNorm(s) => 4 * s.mean.len(),
        }
    }

    /// Rows `rows` of an fc layer: the weights and bias of those outputs.
    pub fn slice_rows(&self, rows: Range<usize>) -> Result<LayerParams> {
        let (weights, bias) = match self {
            LayerParams::Dense { weights, bias } if weights.dims().len() == 2 => (weights, bias),
            _ => return Err(Error::Param("row slicing needs fc parameters".into())),
        };
        let (out, inp) = (weights.dims()[0], weights.dims()[1]);
        if rows.start >= rows.end || rows.end > out {
            return Err(Error::Param(format!(
                "row range {rows:?} outside 0..{out}"
            )));
        }
        let n = rows.len();
        let w = weights.data()[rows.start * inp..rows.end * inp].to_vec();
        let b = bias.data()[rows.clone()].to_vec();
        Ok(LayerParams::Dense {
            weights: Tensor::from_dims(&[n, inp], w)?,
            bias: Tensor::from_dims(&[n], b)?,
        })
    }
}

fn layer_rng(graph_seed: u64, weights_seed: u64) -> ChaCha8Rng {
    let mixed = graph_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ weights_seed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Deterministic parameters for one layer, or `None` for weightless kinds.
pub fn generate_layer_params(graph: &ModelGraph, name: &str) -> Result<Option<LayerParams>> {
    let layer = graph
        .layer(name)
        .ok_or_else(|| Error::Graph(format!("unknown layer `{name}`")))?;
    let in_shape = |i: usize| -> Result<&[usize]> {
        let input = &layer.inputs[i];
        graph
            .shape(input)
            .map(|s| s.dims())
            .ok_or_else(|| Error::Graph("graph must be validated first".into()))
    };
    let mut rng = layer_rng(graph.seed, layer.weights_seed);
    let r = WEIGHT_RANGE;
    let params = match &layer.kind {
        LayerKind::FullyConnected { out_size } => {
            let inp: usize = in_shape(0)?.iter().product();
            let w = uniform(&mut rng, out_size * inp, -r, r);
            let b = uniform(&mut rng, *out_size, -r, r);
            LayerParams::Dense {
                weights: Tensor::from_dims(&[*out_size, inp], w)?,
                bias: Tensor::from_dims(&[*out_size], b)?,
            }
        }
        LayerKind::Conv2D {
            filters,
            kernel_h,
            kernel_w,
            ..
        } => {
            let c = *in_shape(0)?.last().unwrap();
            let w = uniform(&mut rng, filters * kernel_h * kernel_w * c, -r, r);
            let b = uniform(&mut rng, *filters, -r, r);
            LayerParams::Dense {
                weights: Tensor::from_dims(&[*filters, *kernel_h, *kernel_w, c], w)?,
                bias: Tensor::from_dims(&[*filters], b)?,
            }
        }
        LayerKind::BatchNorm => {
            let c = *in_shape(0)?.last().unwrap();
            LayerParams::BatchNorm(BatchNormStats {
                mean: uniform(&mut rng, c, -r, r),
                var: uniform(&mut rng, c, 0.5, 1.5),
                gamma: uniform(&mut rng, c, 0.9, 1.1),
                beta: uniform(&mut rng, c, -r, r),
            })
        }
        _ => return Ok(None),
    };
    Ok(Some(params))
}

/// Parameters keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: BTreeMap<String, LayerParams>,
}

impl ModelParams {
    pub fn generate(graph: &ModelGraph) -> Result<Self> {
        let names: Vec<&str> = graph.layers.iter().map(|l| l.name.as_str()).collect();
        Self::generate_for(graph, &names)
    }

    pub fn generate_for(graph: &ModelGraph, names: &[&str]) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for n in names {
            if let Some(p) = generate_layer_params(graph, n)? {
                layers.insert(n.to_string(), p);
            }
        }
        Ok(Self { layers })
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.layers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, p: LayerParams) {
        self.layers.insert(name.into(), p);
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(LayerParams::scalar_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{build_model_with, BuildOptions, ModelName};

    #[test]
    fn deterministic_and_in_range() {
        let g = build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 4)).unwrap();
        let a = ModelParams::generate(&g).unwrap();
        let b = ModelParams::generate(&g).unwrap();
        assert_eq!(a, b);
        let w = a.get("fc_1").unwrap().weights().unwrap();
        assert_eq!(w.dims(), &[1024, 960]);
        assert!(w.data().iter().all(|v| v.abs() <= WEIGHT_RANGE));
        let g2 = build_model_with(ModelName::TwoStream, &BuildOptions::new(0.125, 5)).unwrap();
        assert_ne!(a, ModelParams::generate(&g2).unwrap());
    }

    #[test]
    fn row_slices_partition_weights() {
        let g = build_model_with(ModelName::AlexNet, &BuildOptions::new(0.125, 1)).unwrap();
        let p = generate_layer_params(&g, "fc_3").unwrap().unwrap();
        let top = p.slice_rows(0..500).unwrap();
        let bottom = p.slice_rows(500..1000).unwrap();
        let mut joined = top.weights().unwrap().data().to_vec();
        joined.extend_from_slice(bottom.weights().unwrap().data());
        assert_eq!(joined, p.weights().unwrap().data());
        assert!(p.slice_rows(900..1001).is_err());
    }
}
