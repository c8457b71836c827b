//! 2-D convolution (cross-correlation semantics) with stride, zero padding
//! and channel groups. Depthwise is `groups == C`, pointwise is a 1x1 kernel.

use super::{BackwardFn, GradStore, Tape, Tensor};
use crate::error::{Error, Result};

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize, // input channels per group
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn check_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be NCHW, got {ishape:?}")));
    }
    if wshape.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be OIHW, got {wshape:?}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (o, cg, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if groups == 0 || c % groups != 0 || o % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("channels {c} / out {o} not divisible by groups {groups}"),
        ));
    }
    if cg != c / groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight expects {cg} in-channels per group, input provides {}", c / groups),
        ));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { n, c, h, w, o, cg, kh, kw, oh, ow, stride, pad, groups })
}

/// Valid output range `[lo, hi)` along one spatial axis for kernel offset
/// `k`: positions whose sampled input index lies inside `[0, extent)`.
fn valid_range(out_len: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let in_bounds = extent as isize + pad as isize - k as isize;
    let hi_excl = if in_bounds <= 0 { 0 } else { (in_bounds as usize).div_ceil(stride) };
    (lo.min(out_len), hi_excl.min(out_len))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(d: &ConvDims, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let og = d.o / d.groups;
    let mut out = vec![0.0; d.n * d.o * d.oh * d.ow];
    for n in 0..d.n {
        for o in 0..d.o {
            let g = o / og;
            let out_base = (n * d.o + o) * d.oh * d.ow;
            if let Some(b) = bias {
                out[out_base..out_base + d.oh * d.ow].fill(b[o]);
            }
            for ic in 0..d.cg {
                let c = g * d.cg + ic;
                let in_base = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(d.oh, d.h, d.stride, d.pad, ky);
                    for kx in 0..d.kw {
                        let wv = weight[((o * d.cg + ic) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(d.ow, d.w, d.stride, d.pad, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.pad;
                            let in_row = in_base + iy * d.w;
                            let out_row = out_base + oy * d.ow;
                            if d.stride == 1 {
                                let ishift = kx as isize - d.pad as isize;
                                let src = &input[(in_row as isize + ishift + ox_lo as isize) as usize..];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_hi];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += wv * sv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * d.stride + kx - d.pad;
                                    out[out_row + ox] += wv * input[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Tape {
    /// `input` NCHW x `weight` OIHW -> N x O x H' x W', where
    /// `H' = (H + 2 pad - K) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let d = check_dims(input, weight, bias, stride, pad, groups)?;
        let data = conv_forward(&d, input.data(), weight.data(), bias.map(|b| b.data()));
        let out_shape = vec![d.n, d.o, d.oh, d.ow];

        let mut tracked: Vec<&Tensor> = vec![input, weight];
        if let Some(b) = bias {
            tracked.push(b);
        }
        let rec: Option<BackwardFn> = self.wants_grad(&tracked).then(|| {
            let in_node = input.node();
            let w_node = weight.node();
            let b_node = bias.and_then(|b| b.node());
            let in_data = input.data_arc();
            let w_data = weight.data_arc();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let og = d.o / d.groups;
                let mut d_in = in_node.map(|_| vec![0.0; d.n * d.c * d.h * d.w]);
                let mut d_w = w_node.map(|_| vec![0.0; d.o * d.cg * d.kh * d.kw]);
                let mut d_b = b_node.map(|_| vec![0.0; d.o]);
                for n in 0..d.n {
                    for o in 0..d.o {
                        let grp = o / og;
                        let out_base = (n * d.o + o) * d.oh * d.ow;
                        if let Some(db) = d_b.as_mut() {
                            db[o] += g[out_base..out_base + d.oh * d.ow].iter().sum::<f64>();
                        }
                        if d_in.is_none() && d_w.is_none() {
                            continue;
                        }
                        for ic in 0..d.cg {
                            let c = grp * d.cg + ic;
                            let in_base = (n * d.c + c) * d.h * d.w;
                            for ky in 0..d.kh {
                                let (oy_lo, oy_hi) = valid_range(d.oh, d.h, d.stride, d.pad, ky);
                                for kx in 0..d.kw {
                                    let widx = ((o * d.cg + ic) * d.kh + ky) * d.kw + kx;
                                    let wv = w_data[widx];
                                    let (ox_lo, ox_hi) = valid_range(d.ow, d.w, d.stride, d.pad, kx);
                                    let mut w_acc = 0.0;
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * d.stride + ky - d.pad;
                                        let in_row = in_base + iy * d.w;
                                        let out_row = out_base + oy * d.ow;
                                        if d.stride == 1 {
                                            let ishift = kx as isize - d.pad as isize;
                                            let start = (in_row as isize + ishift + ox_lo as isize) as usize;
                                            let grow = &g[out_row + ox_lo..out_row + ox_hi];
                                            if d_w.is_some() {
                                                let irow = &in_data[start..start + grow.len()];
                                                let mut acc = 0.0;
                                                for (gv, iv) in grow.iter().zip(irow) {
                                                    acc += gv * iv;
                                                }
                                                w_acc += acc;
                                            }
                                            if let Some(di) = d_in.as_mut() {
                                                let drow = &mut di[start..start + grow.len()];
                                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                                    *dv += wv * gv;
                                                }
                                            }
                                        } else {
                                            for ox in ox_lo..ox_hi {
                                                let ix = ox * d.stride + kx - d.pad;
                                                let gv = g[out_row + ox];
                                                if d_w.is_some() {
                                                    w_acc += gv * in_data[in_row + ix];
                                                }
                                                if let Some(di) = d_in.as_mut() {
                                                    di[in_row + ix] += wv * gv;
                                                }
                                            }
                                        }
                                    }
                                    if let Some(dw) = d_w.as_mut() {
                                        dw[widx] += w_acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let (Some(node), Some(di)) = (in_node, d_in) {
                    store.give(node, di);
                }
                if let (Some(node), Some(dw)) = (w_node, d_w) {
                    store.give(node, dw);
                }
                if let (Some(node), Some(db)) = (b_node, d_b) {
                    store.give(node, db);
                }
            }) as BackwardFn
        });
        Ok(self.emit("conv2d", out_shape, data, rec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::rng::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        // 1x1 kernel holding the channel identity matrix.
        let mut tape = Tape::new();
        let input = Tensor::from_vec(vec![1, 3, 2, 2], (0..12).map(|v| v as f64 * 0.5).collect());
        let mut wv = vec![0.0; 9];
        for c in 0..3 {
            wv[c * 3 + c] = 1.0;
        }
        let weight = Tensor::from_vec(vec![3, 3, 1, 1], wv);
        let out = tape.conv2d(&input, &weight, None, 1, 0, 1).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn ones_kernel_sums_receptive_field() {
        // All-ones 3x3 kernel, pad 1, on an all-ones 1x1x4x4 input: every
        // output equals the count of in-bounds neighbours.
        let mut tape = Tape::new();
        let input = Tensor::full(&[1, 1, 4, 4], 1.0);
        let weight = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = tape.conv2d(&input, &weight, None, 1, 1, 1).unwrap();
        // Independent direct-summation oracle over the receptive field.
        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut expect = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            expect += 1.0;
                        }
                    }
                }
                assert_eq!(out.at(&[0, 0, oy, ox]), expect);
            }
        }
        assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn output_shape_arithmetic() {
        let mut tape = Tape::new();
        let input = Tensor::zeros(&[1, 3, 8, 8]);
        let weight = Tensor::zeros(&[6, 3, 3, 3]);
        let out = tape.conv2d(&input, &weight, None, 1, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 6, 8, 8]);

        let strided = tape.conv2d(&input, &weight, None, 2, 1, 1).unwrap();
        assert_eq!(strided.shape(), &[1, 6, 4, 4]);
    }

    #[test]
    fn depthwise_equals_per_channel_convs() {
        let mut rng = Rng::new(11);
        let input = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let weight = rand_tensor(&[3, 1, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let grouped = tape.conv2d(&input, &weight, None, 1, 1, 3).unwrap();
        // Brute-force per-channel equivalence.
        for c in 0..3 {
            let single_in = Tensor::from_vec(
                vec![1, 1, 4, 4],
                input.data()[c * 16..(c + 1) * 16].to_vec(),
            );
            let single_w = Tensor::from_vec(vec![1, 1, 3, 3], weight.data()[c * 9..(c + 1) * 9].to_vec());
            let single = tape.conv2d(&single_in, &single_w, None, 1, 1, 1).unwrap();
            for i in 0..16 {
                let got = grouped.data()[c * 16 + i];
                let want = single.data()[i];
                assert!((got - want).abs() < 1e-12, "channel {c} elem {i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut tape = Tape::new();
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        let weight = Tensor::zeros(&[4, 2, 3, 3]); // expects 2 in-channels per group
        assert!(tape.conv2d(&input, &weight, None, 1, 1, 1).is_err());
        let weight = Tensor::zeros(&[4, 3, 3, 3]);
        assert!(tape.conv2d(&input, &weight, None, 1, 1, 2).is_err()); // 3 % 2 != 0
        let big = Tensor::zeros(&[4, 3, 9, 9]);
        assert!(tape.conv2d(&input, &big, None, 1, 1, 1).is_err()); // kernel larger than padded input
    }

    #[test]
    fn gradcheck_full_conv() {
        let mut rng = Rng::new(5);
        let input = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let weight = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1, 1)?;
                let sq = tape.mul(&y, &y)?;
                tape.mean_all(&sq)
            },
            &[input, weight, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn gradcheck_strided_grouped() {
        let mut rng = Rng::new(9);
        let input = rand_tensor(&[2, 4, 6, 6], &mut rng);
        let weight = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], None, 2, 1, 2)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[input, weight],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }
}
