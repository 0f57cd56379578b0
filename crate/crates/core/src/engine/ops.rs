//! Layer kernels. Every reduction runs in a fixed order so that split and
//! replicated executions reproduce the single-process result bit for bit.

use super::params::{BatchNormStats, LayerParams};
use super::Tensor;
use crate::error::{Error, Result};
use crate::model_ir::{same_pad, LayerKind, Padding};

pub const BATCHNORM_EPS: f32 = 1e-5;

fn dense(params: &LayerParams) -> Result<(&Tensor, &Tensor)> {
    match (params.weights(), params.bias()) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::Param("expected weights and bias".into())),
    }
}

/// `out[i] = (sum_j w[i][j] * x[j]) + b[i]`, summed in ascending `j`.
pub fn forward_fc(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (w, b) = dense(params)?;
    let [out, inp] = w.dims() else {
        return Err(Error::Param(format!("fc weights must be rank 2, got {}", w.shape())));
    };
    let (out, inp) = (*out, *inp);
    if input.len() != inp || b.len() != out {
        return Err(Error::Dimension(format!(
            "fc expects {inp} inputs and {out} biases, got {} and {}",
            input.len(),
            b.len()
        )));
    }
    let x = input.data();
    let y = w
        .data()
        .chunks_exact(inp)
        .zip(b.data())
        .map(|(row, bias)| {
            let mut acc = 0.0f32;
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            acc + bias
        })
        .collect();
    Tensor::from_dims(&[out], y)
}

/// 2-D cross-correlation over `[H, W, C]` with zero fill outside the input.
/// Taps accumulate in `(ky, kx, c)` order, then the bias is added.
pub fn forward_conv(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (w, b) = dense(params)?;
    let (&[h, wd, c], &[f, kh, kw, wc]) = (input.dims(), w.dims()) else {
        return Err(Error::Dimension(format!(
            "conv needs rank-3 input and rank-4 weights, got {} and {}",
            input.shape(),
            w.shape()
        )));
    };
    if c != wc || b.len() != f || stride == 0 {
        return Err(Error::Dimension(format!(
            "conv input has {c} channels, filters expect {wc}"
        )));
    }
    let (oh, ow, pt, pl) = match padding {
        Padding::Same => {
            let (oh, pt) = same_pad(h, kh, stride);
            let (ow, pl) = same_pad(wd, kw, stride);
            (oh, ow, pt, pl)
        }
        Padding::Valid => {
            if kh > h || kw > wd {
                return Err(Error::Dimension(format!(
                    "kernel {kh}x{kw} larger than input {h}x{wd}"
                )));
            }
            ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
        }
    };
    let x = input.data();
    let wt = w.data();
    let mut out = vec![0.0f32; oh * ow * f];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * f;
            for fi in 0..f {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xo = (iy as usize * wd + ix as usize) * c;
                        let wo = ((fi * kh + ky) * kw + kx) * c;
                        for (wv, xv) in wt[wo..wo + c].iter().zip(&x[xo..xo + c]) {
                            acc += wv * xv;
                        }
                    }
                }
                out[base + fi] = acc + b.data()[fi];
            }
        }
    }
    Tensor::from_dims(&[oh, ow, f], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(input.shape().clone(), data).expect("relu preserves shape")
}

/// Per-channel normalization over the last axis.
pub fn batchnorm(input: &Tensor, stats: &BatchNormStats) -> Result<Tensor> {
    let c = *input.dims().last().unwrap();
    let n = stats.mean.len();
    if n != c || stats.var.len() != c || stats.gamma.len() != c || stats.beta.len() != c {
        return Err(Error::Dimension(format!(
            "batchnorm has {n} channels, input has {c}"
        )));
    }
    if let Some(i) = stats.var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Param(format!("variance at channel {i} is not positive")));
    }
    let scale: Vec<f32> = stats
        .var
        .iter()
        .zip(&stats.gamma)
        .map(|(v, g)| g / (v + BATCHNORM_EPS).sqrt())
        .collect();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let ch = i % c;
            (x - stats.mean[ch]) * scale[ch] + stats.beta[ch]
        })
        .collect();
    Tensor::new(input.shape().clone(), data)
}

/// Max-subtracted softmax over all elements.
pub fn softmax(input: &Tensor) -> Tensor {
    let x = input.data();
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = x.iter().map(|v| (v - m).exp()).collect();
    let mut sum = 0.0f32;
    for v in &e {
        sum += v;
    }
    let data = e.iter().map(|v| v / sum).collect();
    Tensor::new(input.shape().clone(), data).expect("softmax outputs are finite")
}

pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let &[h, w, c] = input.dims() else {
        return Err(Error::Dimension(format!(
            "maxpool needs rank-3 input, got {}",
            input.shape()
        )));
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Dimension(format!(
            "pool window {window} exceeds input {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let v = x[((oy * stride + ky) * w + ox * stride + kx) * c + ch];
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::from_dims(&[oh, ow, c], out)
}

/// Frame range `[start, end)` of range `i` out of `parts` over `n` frames.
/// Earlier ranges take the extra frame; an empty range collapses to the
/// single frame at its start (clamped to the last frame).
pub fn pyramid_range(n: usize, parts: usize, i: usize) -> (usize, usize) {
    let (base, rem) = (n / parts, n % parts);
    let start = i * base + i.min(rem);
    let len = base + usize::from(i < rem);
    if len == 0 {
        let s = start.min(n - 1);
        (s, s + 1)
    } else {
        (start, start + len)
    }
}

/// Multi-resolution max pooling: level `k` emits `2^k` range maxima, rows
/// ordered level-major then range-major.
pub fn temporal_pyramid(frames: &[&Tensor], levels: u32) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dimension("temporal pyramid over zero frames".into()))?;
    if levels == 0 || levels > 16 {
        return Err(Error::Dimension(format!("pyramid levels {levels} out of range")));
    }
    let d = first.len();
    if frames.iter().any(|f| f.len() != d) {
        return Err(Error::Dimension("pyramid frames differ in length".into()));
    }
    let n = frames.len();
    let rows = (1usize << levels) - 1;
    let mut out = Vec::with_capacity(rows * d);
    for k in 0..levels {
        let parts = 1usize << k;
        for i in 0..parts {
            let (s, e) = pyramid_range(n, parts, i);
            let mut row = frames[s].data().to_vec();
            for f in &frames[s + 1..e] {
                for (r, v) in row.iter_mut().zip(f.data()) {
                    *r = r.max(*v);
                }
            }
            out.extend(row);
        }
    }
    Tensor::from_dims(&[rows, d], out)
}

/// Two-channel displacement field between consecutive frames.
pub trait FlowFn: Send + Sync {
    /// Returns a `[H, W, 2]` tensor of `(dx, dy)` per pixel.
    fn flow(&self, prev: &Tensor, next: &Tensor) -> Result<Tensor>;
}

/// Signed per-pixel intensity difference, duplicated into both channels.
/// Intensity is the channel mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameDifference;

fn intensity(frame: &Tensor) -> Vec<f32> {
    let c = *frame.dims().last().unwrap();
    frame
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut s = 0.0f32;
            for v in px {
                s += v;
            }
            s / c as f32
        })
        .collect()
}

impl FlowFn for FrameDifference {
    fn flow(&self, prev: &Tensor, next: &Tensor) -> Result<Tensor> {
        let &[h, w, _] = prev.dims() else {
            return Err(Error::Dimension("flow frames must be rank 3".into()));
        };
        if prev.shape() != next.shape() {
            return Err(Error::Dimension(format!(
                "flow frames differ: {} vs {}",
                prev.shape(),
                next.shape()
            )));
        }
        let (a, b) = (intensity(prev), intensity(next));
        let mut out = Vec::with_capacity(h * w * 2);
        for (p, q) in a.iter().zip(&b) {
            let d = q - p;
            out.push(d);
            out.push(d);
        }
        Tensor::from_dims(&[h, w, 2], out)
    }
}

/// Stacks the flow of each consecutive pair into `2 * window_len` channels.
pub fn flow_stack(frames: &[&Tensor], window_len: usize, flow: &dyn FlowFn) -> Result<Tensor> {
    if frames.len() != window_len + 1 || window_len == 0 {
        return Err(Error::Dimension(format!(
            "flow stack over {window_len} pairs needs {} frames, got {}",
            window_len + 1,
            frames.len()
        )));
    }
    let fields = frames
        .windows(2)
        .map(|p| flow.flow(p[0], p[1]))
        .collect::<Result<Vec<_>>>()?;
    let &[h, w, _] = fields[0].dims() else {
        unreachable!()
    };
    let ch = 2 * window_len;
    let mut out = vec![0.0f32; h * w * ch];
    for (i, f) in fields.iter().enumerate() {
        for (px, v) in f.data().chunks_exact(2).enumerate() {
            out[px * ch + 2 * i] = v[0];
            out[px * ch + 2 * i + 1] = v[1];
        }
    }
    Tensor::from_dims(&[h, w, ch], out)
}

/// Evaluates a single-item layer. Windowed kinds (pyramid, flow stack) go
/// through [`eval_window`].
pub fn eval_layer<'a>(
    kind: &LayerKind,
    inputs: &[&Tensor],
    params: Option<&'a LayerParams>,
) -> Result<Tensor> {
    let need = |p: Option<&'a LayerParams>| -> Result<&'a LayerParams> {
        p.ok_or_else(|| Error::Param(format!("{} layer has no parameters", kind.short_name())))
    };
    let one = || -> Result<&Tensor> {
        match inputs {
            [x] => Ok(*x),
            _ => Err(Error::Dimension(format!(
                "{} expects one input, got {}",
                kind.short_name(),
                inputs.len()
            ))),
        }
    };
    match kind {
        LayerKind::FullyConnected { .. } => forward_fc(one()?, need(params)?),
        LayerKind::Conv2D {
            stride, padding, ..
        } => forward_conv(one()?, need(params)?, *stride, *padding),
        LayerKind::MaxPool { window, stride } => maxpool(one()?, *window, *stride),
        LayerKind::BatchNorm => {
            let stats = need(params)?
                .batchnorm()
                .ok_or_else(|| Error::Param("batchnorm needs statistics".into()))?;
            batchnorm(one()?, stats)
        }
        LayerKind::ReLU => Ok(relu(one()?)),
        LayerKind::Softmax => Ok(softmax(one()?)),
        LayerKind::Sink => Ok(one()?.clone()),
        LayerKind::Concat => Tensor::concat(inputs),
        LayerKind::Source { .. } | LayerKind::TemporalPyramid { .. } | LayerKind::FlowStack { .. } => {
            Err(Error::Dimension(format!(
                "{} is not a single-item layer",
                kind.short_name()
            )))
        }
    }
}

/// Evaluates a layer that consumes a window of items from one input.
pub fn eval_window(kind: &LayerKind, items: &[&Tensor]) -> Result<Tensor> {
    match kind {
        LayerKind::TemporalPyramid { levels } => temporal_pyramid(items, *levels),
        LayerKind::FlowStack { window_len } => flow_stack(items, *window_len, &FrameDifference),
        _ => Err(Error::Dimension(format!(
            "{} is not a windowed layer",
            kind.short_name()
        ))),
    }
}

/// Whether `kind` consumes a window of items rather than one item.
pub fn is_windowed(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::TemporalPyramid { .. } | LayerKind::FlowStack { .. }
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_dims(dims, data).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        t(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn dense_params(w: Tensor, b: Tensor) -> LayerParams {
        LayerParams::Dense { weights: w, bias: b }
    }

    #[test]
    fn fc_identity_and_bias() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 4] = 1.0;
        }
        let p = dense_params(t(&[3, 3], w), t(&[3], vec![0.0; 3]));
        let y = forward_fc(&t(&[3], vec![1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        let p = dense_params(t(&[2, 3], vec![0.5; 6]), t(&[2], vec![0.25, -1.0]));
        let y = forward_fc(&t(&[3], vec![0.0; 3]), &p).unwrap();
        assert_eq!(y.data(), &[0.25, -1.0]);
        assert!(forward_fc(&t(&[4], vec![0.0; 4]), &p).is_err());
    }

    #[test]
    fn fc_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_t(&mut rng, &[8, 4]);
        let b = rand_t(&mut rng, &[8]);
        let x = rand_t(&mut rng, &[4]);
        let mut expect = Vec::new();
        for i in 0..8 {
            let mut acc = 0.0f32;
            for j in 0..4 {
                acc += w.data()[i * 4 + j] * x.data()[j];
            }
            expect.push(acc + b.data()[i]);
        }
        let y = forward_fc(&x, &dense_params(w, b)).unwrap();
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn conv_one_by_one_identity_and_zero_input() {
        let x = t(&[2, 3, 1], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let p = dense_params(t(&[1, 1, 1, 1], vec![1.0]), t(&[1], vec![0.0]));
        let y = forward_conv(&x, &p, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), x.data());
        let p = dense_params(t(&[2, 3, 3, 1], vec![0.3; 18]), t(&[2], vec![0.5, -0.5]));
        let y = forward_conv(&t(&[2, 3, 1], vec![0.0; 6]), &p, 1, Padding::Same).unwrap();
        assert!(y.data().chunks(2).all(|c| c == [0.5, -0.5]));
    }

    /// Independent six-loop convolution with explicit zero padding.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f32> {
        let (h, wd, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (f, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = vec![0.0f32; h * wd * f];
        for y in 0..h {
            for xx in 0..wd {
                for fi in 0..f {
                    let mut acc = 0.0f32;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..c {
                                let iy = y as isize + ky as isize - ph as isize;
                                let ix = xx as isize + kx as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[(iy as usize * wd + ix as usize) * c + ci];
                                let wv = w.data()[((fi * kh + ky) * kw + kx) * c + ci];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[(y * wd + xx) * f + fi] = acc + b.data()[fi];
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[16, 12, 3]);
        let w = rand_t(&mut rng, &[4, 5, 5, 3]);
        let b = rand_t(&mut rng, &[4]);
        let expect = naive_conv(&x, &w, &b);
        let y = forward_conv(&x, &dense_params(w, b), 1, Padding::Same).unwrap();
        assert_eq!(y.dims(), &[16, 12, 4]);
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn pointwise_kernels() {
        let x = t(&[2, 2], vec![-1.0, 0.5, 2.0, -3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.5, 2.0, 0.0]);
        let ident = BatchNormStats {
            mean: vec![0.0; 2],
            var: vec![1.0; 2],
            gamma: vec![1.0; 2],
            beta: vec![0.0; 2],
        };
        let y = batchnorm(&x, &ident).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(((a - b) / b).abs() < 1e-5);
        }
        let bad = BatchNormStats {
            var: vec![1.0, 0.0],
            ..ident
        };
        assert!(batchnorm(&x, &bad).is_err());
        let s = softmax(&t(&[51], vec![0.7; 51]));
        assert!(s.data().iter().all(|v| (v - 1.0 / 51.0).abs() < 1e-7));
        let p = maxpool(&t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert!(maxpool(&t(&[1, 1, 1], vec![1.0]), 2, 2).is_err());
    }

    #[test]
    fn pyramid_constant_and_single_frame() {
        let f = t(&[3], vec![1.0, -2.0, 5.0]);
        let frames = vec![&f; 7];
        let p = temporal_pyramid(&frames, 4).unwrap();
        assert_eq!(p.dims(), &[15, 3]);
        assert!(p.data().chunks(3).all(|r| r == f.data()));
        let p = temporal_pyramid(&[&f], 4).unwrap();
        assert!(p.data().chunks(3).all(|r| r == f.data()));
        assert!(temporal_pyramid(&[], 4).is_err());
    }

    #[test]
    fn pyramid_uneven_split_favors_early_ranges() {
        assert_eq!(pyramid_range(5, 2, 0), (0, 3));
        assert_eq!(pyramid_range(5, 2, 1), (3, 5));
        assert_eq!(pyramid_range(3, 4, 3), (2, 3));
    }

    #[test]
    fn flow_of_still_frames_is_zero() {
        let f = t(&[16, 12, 3], vec![0.4; 576]);
        let frames = vec![&f; 11];
        let s = flow_stack(&frames, 10, &FrameDifference).unwrap();
        assert_eq!(s.dims(), &[16, 12, 20]);
        assert!(s.data().iter().all(|v| *v == 0.0));
        assert!(flow_stack(&frames[..10], 10, &FrameDifference).is_err());
    }

    #[test]
    fn flow_of_shifted_frame_is_difference() {
        let a = t(&[1, 3, 1], vec![0.0, 1.0, 0.0]);
        let b = t(&[1, 3, 1], vec![0.0, 0.0, 1.0]);
        let s = flow_stack(&[&a, &b], 1, &FrameDifference).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, -1.0, -1.0, 1.0, 1.0]);
    }
}
