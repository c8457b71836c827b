//! Normalization, softmax, batched matmul and resampling primitives.

use super::{BackwardFn, GradStore, Tape, Tensor};
use crate::error::{Error, Result};

impl Tape {
    /// Normalize along one axis to zero mean / unit variance, then apply the
    /// per-position affine `gamma * xhat + beta` (both of length
    /// `shape[axis]`).
    pub fn layer_norm(
        &mut self,
        input: &Tensor,
        axis: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let shape = input.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("layer_norm", format!("axis {axis} for rank {}", shape.len())));
        }
        let d = shape[axis];
        if d == 0 {
            return Err(Error::invalid("layer_norm", "normalized extent has size 0"));
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?}, expected [{d}]", gamma.shape(), beta.shape()),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = input.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; src.len()];
        let mut inv_stds = vec![0.0; outer * inner];
        let mut means = vec![0.0; outer * inner];
        let inv_d = 1.0 / d as f64;
        for o in 0..outer {
            for i in 0..inner {
                let mut mean = 0.0;
                for k in 0..d {
                    mean += src[(o * d + k) * inner + i];
                }
                mean *= inv_d;
                let mut var = 0.0;
                for k in 0..d {
                    let c = src[(o * d + k) * inner + i] - mean;
                    var += c * c;
                }
                var *= inv_d;
                let inv_std = 1.0 / (var + eps).sqrt();
                means[o * inner + i] = mean;
                inv_stds[o * inner + i] = inv_std;
                for k in 0..d {
                    let idx = (o * d + k) * inner + i;
                    data[idx] = (src[idx] - mean) * inv_std * gm[k] + bt[k];
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[input, gamma, beta]).then(|| {
            let in_node = input.node();
            let g_node = gamma.node();
            let b_node = beta.node();
            let src = input.data_arc();
            let gm = gamma.data_arc();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut d_in = in_node.map(|_| vec![0.0; src.len()]);
                let mut d_gamma = g_node.map(|_| vec![0.0; d]);
                let mut d_beta = b_node.map(|_| vec![0.0; d]);
                let inv_d = 1.0 / d as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = means[o * inner + i];
                        let inv_std = inv_stds[o * inner + i];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for k in 0..d {
                            let idx = (o * d + k) * inner + i;
                            let xhat = (src[idx] - mean) * inv_std;
                            let gv = g[idx];
                            if let Some(dg) = d_gamma.as_mut() {
                                dg[k] += gv * xhat;
                            }
                            if let Some(db) = d_beta.as_mut() {
                                db[k] += gv;
                            }
                            let dxhat = gv * gm[k];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        if let Some(di) = d_in.as_mut() {
                            for k in 0..d {
                                let idx = (o * d + k) * inner + i;
                                let xhat = (src[idx] - mean) * inv_std;
                                let dxhat = g[idx] * gm[k];
                                di[idx] = inv_std
                                    * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                if let (Some(node), Some(di)) = (in_node, d_in) {
                    store.give(node, di);
                }
                if let (Some(node), Some(dg)) = (g_node, d_gamma) {
                    store.give(node, dg);
                }
                if let (Some(node), Some(db)) = (b_node, d_beta) {
                    store.give(node, db);
                }
            }) as BackwardFn
        });
        Ok(self.emit("layer_norm", shape.to_vec(), data, rec))
    }

    /// Numerically stabilized softmax along one axis.
    pub fn softmax(&mut self, input: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = input.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let d = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = input.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut max_v = f64::NEG_INFINITY;
                for k in 0..d {
                    max_v = max_v.max(src[(o * d + k) * inner + i]);
                }
                let mut sum = 0.0;
                for k in 0..d {
                    let idx = (o * d + k) * inner + i;
                    let e = (src[idx] - max_v).exp();
                    data[idx] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for k in 0..d {
                    data[(o * d + k) * inner + i] *= inv;
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[input]).then(|| {
            let node = input.node().unwrap();
            let out = data.clone();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut d_in = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for k in 0..d {
                            let idx = (o * d + k) * inner + i;
                            dot += g[idx] * out[idx];
                        }
                        for k in 0..d {
                            let idx = (o * d + k) * inner + i;
                            d_in[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                }
                store.give(node, d_in);
            }) as BackwardFn
        });
        Ok(self.emit("softmax", shape.to_vec(), data, rec))
    }

    /// Batched matrix product `...xMxK @ ...xKxN -> ...xMxN`; leading batch
    /// dimensions broadcast (equal or 1 after left-padding the shorter rank).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ashape = a.shape();
        let bshape = b.shape();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::shape("matmul", format!("{ashape:?} x {bshape:?}: rank must be >= 2")));
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {ashape:?} x {bshape:?}"),
            ));
        }
        let k = ka;
        let rank = ashape.len().max(bshape.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut out = vec![1usize; rank - s.len()];
            out.extend_from_slice(s);
            out
        };
        let a_lead = pad(&ashape[..ashape.len() - 2]);
        let b_lead = pad(&bshape[..bshape.len() - 2]);
        // a_lead/b_lead are padded to rank - 2 entries each
        let lead_rank = rank - 2;
        let a_lead = &a_lead[a_lead.len() - lead_rank..];
        let b_lead = &b_lead[b_lead.len() - lead_rank..];
        let mut lead = Vec::with_capacity(lead_rank);
        for d in 0..lead_rank {
            let (da, db) = (a_lead[d], b_lead[d]);
            if da != db && da != 1 && db != 1 {
                return Err(Error::shape(
                    "matmul",
                    format!("batch dimensions do not broadcast: {ashape:?} x {bshape:?}"),
                ));
            }
            lead.push(da.max(db));
        }
        let batch: usize = lead.iter().product();
        // Flat batch index -> flat batch index into a/b (respecting broadcast).
        let batch_map = |lead: &[usize], src: &[usize]| -> Vec<usize> {
            let n_batches: usize = lead.iter().product();
            let mut strides = vec![0usize; src.len()];
            let mut acc = 1;
            for i in (0..src.len()).rev() {
                strides[i] = if src[i] == 1 { 0 } else { acc };
                acc *= src[i];
            }
            let mut map = Vec::with_capacity(n_batches);
            let mut idx = vec![0usize; lead.len()];
            for _ in 0..n_batches {
                let mut f = 0;
                for d in 0..lead.len() {
                    f += idx[d] * strides[d];
                }
                map.push(f);
                for d in (0..lead.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < lead[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            map
        };
        let a_map = batch_map(&lead, a_lead);
        let b_map = batch_map(&lead, b_lead);
        let ad = a.data();
        let bd = b.data();
        let mut data = vec![0.0; batch * m * n];
        for (bi, out_block) in data.chunks_exact_mut(m * n).enumerate() {
            let ab = &ad[a_map[bi] * m * k..a_map[bi] * m * k + m * k];
            let bb = &bd[b_map[bi] * k * n..b_map[bi] * k * n + k * n];
            for i in 0..m {
                let arow = &ab[i * k..(i + 1) * k];
                let crow = &mut out_block[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bb[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let rec: Option<BackwardFn> = self.wants_grad(&[a, b]).then(|| {
            let (an, bn) = (a.node(), b.node());
            let ad = a.data_arc();
            let bd = b.data_arc();
            let a_numel = a.numel();
            let b_numel = b.numel();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut d_a = an.map(|_| vec![0.0; a_numel]);
                let mut d_b = bn.map(|_| vec![0.0; b_numel]);
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &ad[a_map[bi] * m * k..a_map[bi] * m * k + m * k];
                    let bb = &bd[b_map[bi] * k * n..b_map[bi] * k * n + k * n];
                    if let Some(da) = d_a.as_mut() {
                        let dab = &mut da[a_map[bi] * m * k..a_map[bi] * m * k + m * k];
                        // dA[i,p] += g[i,:] . B[p,:]
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bb[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                dab[i * k + p] += acc;
                            }
                        }
                    }
                    if let Some(db) = d_b.as_mut() {
                        let dbb = &mut db[b_map[bi] * k * n..b_map[bi] * k * n + k * n];
                        // dB[p,:] += sum_i A[i,p] * g[i,:]
                        for i in 0..m {
                            let grow = &gb[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ab[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut dbb[p * n..(p + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                }
                if let (Some(node), Some(da)) = (an, d_a) {
                    store.give(node, da);
                }
                if let (Some(node), Some(db)) = (bn, d_b) {
                    store.give(node, db);
                }
            }) as BackwardFn
        });
        Ok(self.emit("matmul", out_shape, data, rec))
    }

    /// Bilinear resize on CHW or NCHW, align-corners-false convention:
    /// output sample centers map to `(i + 0.5) * in / out - 0.5`, clamped
    /// to the border. Rank is preserved.
    pub fn bilinear_resize(&mut self, input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let shape = input.shape();
        let (n, c, h, w) = match *shape {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("bilinear_resize", format!("expected CHW or NCHW, got {shape:?}"))),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be >= 1"));
        }
        let axis_table = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|o| {
                    let pos = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                        .clamp(0.0, (in_len - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(in_len - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = axis_table(out_h, h);
        let xs = axis_table(out_w, w);
        let src = input.data();
        let mut data = vec![0.0; n * c * out_h * out_w];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * out_h * out_w;
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = in_base + y0 * w;
                let r1 = in_base + y1 * w;
                let orow = out_base + oy * out_w;
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[r0 + x0] * (1.0 - fx) + src[r0 + x1] * fx;
                    let bot = src[r1 + x0] * (1.0 - fx) + src[r1 + x1] * fx;
                    data[orow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[input]).then(|| {
            let node = input.node().unwrap();
            let numel = input.numel();
            let (ys, xs) = (ys.clone(), xs.clone());
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut d_in = vec![0.0; numel];
                for nc in 0..n * c {
                    let in_base = nc * h * w;
                    let out_base = nc * out_h * out_w;
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        let r0 = in_base + y0 * w;
                        let r1 = in_base + y1 * w;
                        let orow = out_base + oy * out_w;
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g[orow + ox];
                            d_in[r0 + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            d_in[r0 + x1] += gv * (1.0 - fy) * fx;
                            d_in[r1 + x0] += gv * fy * (1.0 - fx);
                            d_in[r1 + x1] += gv * fy * fx;
                        }
                    }
                }
                store.give(node, d_in);
            }) as BackwardFn
        });
        let out_shape = if shape.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![n, c, out_h, out_w]
        };
        Ok(self.emit("bilinear_resize", out_shape, data, rec))
    }

    /// Non-overlapping area average over `factor x factor` blocks, on CHW
    /// or NCHW (rank preserved).
    pub fn avg_pool2d(&mut self, input: &Tensor, factor: usize) -> Result<Tensor> {
        let shape = input.shape();
        let (n, c, h, w) = match *shape {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("avg_pool2d", format!("expected CHW or NCHW, got {shape:?}"))),
        };
        if factor == 0 {
            return Err(Error::invalid("avg_pool2d", "factor must be >= 1"));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("{h}x{w} not divisible by factor {factor}"),
            ));
        }
        if factor == 1 {
            return self.reshape(input, shape.to_vec());
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let src = input.data();
        let mut data = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = in_base + (oy * factor + dy) * w + ox * factor;
                        for dx in 0..factor {
                            acc += src[row + dx];
                        }
                    }
                    data[out_base + oy * ow + ox] = acc * inv;
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[input]).then(|| {
            let node = input.node().unwrap();
            let numel = input.numel();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut d_in = vec![0.0; numel];
                for nc in 0..n * c {
                    let in_base = nc * h * w;
                    let out_base = nc * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[out_base + oy * ow + ox] * inv;
                            for dy in 0..factor {
                                let row = in_base + (oy * factor + dy) * w + ox * factor;
                                for dx in 0..factor {
                                    d_in[row + dx] += gv;
                                }
                            }
                        }
                    }
                }
                store.give(node, d_in);
            }) as BackwardFn
        });
        let out_shape = if shape.len() == 3 { vec![c, oh, ow] } else { vec![n, c, oh, ow] };
        Ok(self.emit("avg_pool2d", out_shape, data, rec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::grad_check;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[2, 4], 3.7);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = tape.layer_norm(&x, 1, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(2);
        let x = rand_tensor(&[3, 8], &mut rng);
        let gamma = Tensor::full(&[8], 1.0);
        let beta = Tensor::zeros(&[8]);
        let y = tape.layer_norm(&x, 1, &gamma, &beta, 1e-5).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_empty_extent() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2, 0]);
        let gamma = Tensor::zeros(&[0]);
        let beta = Tensor::zeros(&[0]);
        assert!(tape.layer_norm(&x, 1, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = Rng::new(3);
        let x = rand_tensor(&[2, 4], &mut rng);
        let gamma = rand_tensor(&[4], &mut rng);
        let beta = rand_tensor(&[4], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.layer_norm(&xs[0], 1, &xs[1], &xs[2], 1e-5)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[4]);
        let y = tape.softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // softmax(0, ln 3) = (1/4, 3/4)
        let x = Tensor::from_vec(vec![2], vec![0.0, 3.0_f64.ln()]);
        let y = tape.softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(17);
        let x = Tensor::from_vec(vec![3, 5], (0..15).map(|_| rng.uniform(-40.0, 40.0)).collect());
        let y = tape.softmax(&x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "sum {s}");
            for &v in &y.data()[r * 5..(r + 1) * 5] {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn softmax_gradcheck() {
        let mut rng = Rng::new(23);
        let x = rand_tensor(&[2, 5], &mut rng);
        let w = rand_tensor(&[2, 5], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.softmax(&xs[0], 1)?;
                let weighted = tape.mul(&y, &xs[1])?;
                tape.sum_all(&weighted)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(&a, &eye).unwrap();
        assert_eq!(out.data(), a.data());

        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_batched_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3, 4]);
        let b = Tensor::zeros(&[2, 4, 5]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        assert!(tape.matmul(&a, &Tensor::zeros(&[2, 3, 5])).is_err());
    }

    #[test]
    fn matmul_broadcasts_batch_dim() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(4);
        let a = rand_tensor(&[3, 2, 4], &mut rng);
        let b = rand_tensor(&[1, 4, 2], &mut rng);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        // batch 2 of a times the shared b equals the unbatched product
        let a2 = Tensor::from_vec(vec![2, 4], a.data()[2 * 8..3 * 8].to_vec());
        let b0 = Tensor::from_vec(vec![4, 2], b.data().to_vec());
        let c2 = tape.matmul(&a2, &b0).unwrap();
        assert_eq!(&c.data()[2 * 4..3 * 4], c2.data());
    }

    #[test]
    fn matmul_gradcheck_with_broadcast() {
        let mut rng = Rng::new(6);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[1, 4, 2], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let c = tape.matmul(&xs[0], &xs[1])?;
                let sq = tape.mul(&c, &c)?;
                tape.sum_all(&sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn resize_identity_and_constants() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(8);
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let same = tape.bilinear_resize(&x, 3, 3).unwrap();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::full(&[1, 1, 2, 2], 0.37);
        let up = tape.bilinear_resize(&c, 5, 7).unwrap();
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_matches_scalar_loop_oracle() {
        // 2x2 -> 4x4 against an independently coded per-pixel evaluation.
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let up = tape.bilinear_resize(&x, 4, 4).unwrap();
        let src = [[0.0, 1.0], [2.0, 3.0]];
        for oy in 0..4usize {
            for ox in 0..4usize {
                let sy = ((oy as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
                let sx = ((ox as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(1);
                let x1 = (x0 + 1).min(1);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let want = src[y0][x0] * (1.0 - fy) * (1.0 - fx)
                    + src[y0][x1] * (1.0 - fy) * fx
                    + src[y1][x0] * fy * (1.0 - fx)
                    + src[y1][x1] * fy * fx;
                assert!((up.at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_gradcheck() {
        let mut rng = Rng::new(10);
        let x = rand_tensor(&[1, 2, 3, 4], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.bilinear_resize(&xs[0], 6, 5)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn avg_pool_area_average() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        let y = tape.avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.5, 6.5]);
        assert!(tape.avg_pool2d(&x, 3).is_err());
    }

    #[test]
    fn avg_pool_gradcheck() {
        let mut rng = Rng::new(14);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.avg_pool2d(&xs[0], 2)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn composite_conv_ln_softmax_gradcheck() {
        // conv2d -> layer_norm -> softmax -> weighted sum, against central
        // differences at 64-bit.
        let mut rng = Rng::new(21);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let gamma = rand_tensor(&[4], &mut rng);
        let beta = rand_tensor(&[4], &mut rng);
        let probe = rand_tensor(&[1, 4, 4, 4], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1, 1)?;
                let y = tape.layer_norm(&y, 1, &xs[3], &xs[4], 1e-5)?;
                let y = tape.softmax(&y, 1)?;
                let y = tape.mul(&y, &xs[5])?;
                tape.sum_all(&y)
            },
            &[x, w, b, gamma, beta, probe],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "composite gradcheck err = {err}");
    }
}
