//! fc row splits and round-robin replication.

use std::ops::Range;

use crate::engine::{LayerParams, Tensor};
use crate::error::{Error, Result};

use super::{Replica, Task};

/// Output rows owned by part `i` of `k`. Sizes differ by at most one and the
/// earlier parts take the remainder.
pub fn split_rows(out: usize, k: usize, i: usize) -> Range<usize> {
    let base = out / k;
    let extra = out % k;
    let start = i * base + i.min(extra);
    let len = base + usize::from(i < extra);
    start..start + len
}

/// The parts of a split fc layer and how to put them back together.
#[derive(Clone, Debug, PartialEq)]
pub struct FcSplit {
    pub parts: Vec<LayerParams>,
    pub rows: Vec<Range<usize>>,
}

impl FcSplit {
    /// Concatenates part outputs in index order.
    pub fn merge(&self, outputs: &[Tensor]) -> Result<Tensor> {
        if outputs.len() != self.parts.len() {
            return Err(Error::Dimension(format!(
                "expected {} part outputs, got {}",
                self.parts.len(),
                outputs.len()
            )));
        }
        for (o, r) in outputs.iter().zip(&self.rows) {
            if o.len() != r.len() {
                return Err(Error::Dimension(format!(
                    "part output has {} values, rows {r:?}",
                    o.len()
                )));
            }
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        Tensor::concat(&refs)
    }
}

pub fn split_fc(params: &LayerParams, k: usize) -> Result<FcSplit> {
    let out = params
        .weights()
        .filter(|w| w.dims().len() == 2)
        .ok_or_else(|| Error::Param("split_fc needs fc parameters".into()))?
        .dims()[0];
    if k == 0 || k > out {
        return Err(Error::Param(format!(
            "cannot split {out} outputs into {k} parts"
        )));
    }
    let rows: Vec<Range<usize>> = (0..k).map(|i| split_rows(out, k, i)).collect();
    let parts = rows
        .iter()
        .map(|r| params.slice_rows(r.clone()))
        .collect::<Result<_>>()?;
    Ok(FcSplit { parts, rows })
}

/// Replica that handles `tag` in a group of `k`.
pub fn dispatch_replica(tag: u64, k: usize) -> usize {
    (tag % k as u64) as usize
}

/// Copies `task` into `k` round-robin replicas. Task ids are left for the
/// caller to renumber.
pub fn replicate_task(task: &Task, k: usize) -> Result<Vec<Task>> {
    if k == 0 {
        return Err(Error::Param("replica count must be positive".into()));
    }
    if task.replica.count != 1 {
        return Err(Error::Unsplittable(format!(
            "task {} is already replicated",
            task.id
        )));
    }
    if let Some(w) = task.window_specs.iter().find(|w| w.length > 1) {
        return Err(Error::Unsplittable(format!(
            "task {} keeps a {}-item window over `{}`",
            task.id, w.length, w.input
        )));
    }
    Ok((0..k)
        .map(|index| Task {
            replica: Replica { index, count: k },
            ..task.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::forward_fc;

    #[test]
    fn rows_cover_outputs() {
        for out in 1..40 {
            for k in 1..=out.min(6) {
                let mut next = 0;
                for i in 0..k {
                    let r = split_rows(out, k, i);
                    assert_eq!(r.start, next);
                    assert!(!r.is_empty());
                    next = r.end;
                }
                assert_eq!(next, out);
            }
        }
        assert_eq!(split_rows(8192, 2, 1), 4096..8192);
        assert_eq!(split_rows(5, 2, 0), 0..3);
    }

    fn fc(out: usize, inp: usize) -> LayerParams {
        let w = (0..out * inp).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.01).collect();
        let b = (0..out).map(|i| i as f32 * 0.1).collect();
        LayerParams::Dense {
            weights: Tensor::from_dims(&[out, inp], w).unwrap(),
            bias: Tensor::from_dims(&[out], b).unwrap(),
        }
    }

    #[test]
    fn four_outputs_two_parts() {
        let p = fc(4, 3);
        let s = split_fc(&p, 2).unwrap();
        assert_eq!(s.rows, vec![0..2, 2..4]);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let parts: Vec<Tensor> = s.parts.iter().map(|q| forward_fc(&x, q).unwrap()).collect();
        let merged = s.merge(&parts).unwrap();
        assert!(merged.bit_eq(&forward_fc(&x, &p).unwrap()));
    }

    #[test]
    fn k_one_is_identity_and_k_too_large_fails() {
        let p = fc(3, 2);
        assert_eq!(split_fc(&p, 1).unwrap().parts[0], p);
        assert!(split_fc(&p, 4).is_err());
    }

    #[test]
    fn round_robin() {
        let got: Vec<u64> = (0..6).filter(|t| dispatch_replica(*t, 2) == 0).collect();
        assert_eq!(got, vec![0, 2, 4]);
        assert_eq!(dispatch_replica(5, 1), 0);
    }
}
