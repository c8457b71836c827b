//! Elementwise, reduction and shape primitives.

use super::{BackwardFn, GradStore, Tape, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Row-major strides, with stride 0 on axes of size 1 so the tensor
/// broadcasts along them.
fn bcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_out_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(Error::shape(op, format!("{a:?} vs {b:?}")))
            }
        })
        .collect()
}

impl Tape {
    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        backward: impl FnOnce(&Tensor, &Tensor) -> BackwardFn,
    ) -> Result<Tensor> {
        same_shape(op, a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rec = self.wants_grad(&[a, b]).then(|| backward(a, b));
        Ok(self.emit(op, a.shape().to_vec(), data, rec))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (an, bn) = (a.node(), b.node());
        self.binary_elementwise("add", a, b, |x, y| x + y, move |_, _| {
            Box::new(move |g, store| {
                if let Some(n) = an {
                    store.accum(n, g);
                }
                if let Some(n) = bn {
                    store.accum(n, g);
                }
            })
        })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (an, bn) = (a.node(), b.node());
        self.binary_elementwise("sub", a, b, |x, y| x - y, move |_, _| {
            Box::new(move |g, store| {
                if let Some(n) = an {
                    store.accum(n, g);
                }
                if let Some(n) = bn {
                    store.give(n, g.iter().map(|v| -v).collect());
                }
            })
        })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (an, bn) = (a.node(), b.node());
        self.binary_elementwise("mul", a, b, |x, y| x * y, move |a, b| {
            let (ad, bd) = (a.data_arc(), b.data_arc());
            Box::new(move |g, store| {
                if let Some(n) = an {
                    store.give(n, g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect());
                }
                if let Some(n) = bn {
                    store.give(n, g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect());
                }
            })
        })
    }

    /// Elementwise multiply with numpy-style broadcasting on equal-rank
    /// shapes (axes of size one stretch). Used for confidence masks and
    /// per-channel weights.
    pub fn broadcast_mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_out_shape("broadcast_mul", a.shape(), b.shape())?;
        if out_shape == a.shape() && out_shape == b.shape() {
            return self.mul(a, b);
        }
        let numel: usize = out_shape.iter().product();
        let (sa, sb) = (bcast_strides(a.shape()), bcast_strides(b.shape()));
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let n = out_shape.len();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; n];
        let mut flat_pairs = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut fa = 0;
            let mut fb = 0;
            for d in 0..n {
                fa += idx[d] * sa[d];
                fb += idx[d] * sb[d];
            }
            flat_pairs.push((fa as u32, fb as u32));
            data.push(ad[fa] * bd[fb]);
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[a, b]).then(|| {
            let (an, bn) = (a.node(), b.node());
            let (a_numel, b_numel) = (a.numel(), b.numel());
            Box::new(move |g: &[f64], store: &mut GradStore| {
                if let Some(node) = an {
                    let mut da = vec![0.0; a_numel];
                    for (i, &(fa, fb)) in flat_pairs.iter().enumerate() {
                        da[fa as usize] += g[i] * bd[fb as usize];
                    }
                    store.give(node, da);
                }
                if let Some(node) = bn {
                    let mut db = vec![0.0; b_numel];
                    for (i, &(fa, fb)) in flat_pairs.iter().enumerate() {
                        db[fb as usize] += g[i] * ad[fa as usize];
                    }
                    store.give(node, db);
                }
            }) as BackwardFn
        });
        Ok(self.emit("broadcast_mul", out_shape, data, rec))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        // df(input value, output value) -> local derivative
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            let input = a.data_arc();
            let output = data.clone();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(input.iter().zip(&output))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                store.give(an, contrib);
            }) as BackwardFn
        });
        self.emit(op, a.shape().to_vec(), data, rec)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary("scale", a, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        self.unary("add_scalar", a, |x| x + c, |_, _| 1.0)
    }

    /// |x|; subgradient 0 at the origin.
    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary("abs", a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    /// x^p for non-negative x (p may be fractional).
    pub fn powf(&mut self, a: &Tensor, p: f64) -> Tensor {
        self.unary("powf", a, |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Tensor {
        self.unary(
            "leaky_relu",
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Multiply every element by a one-element tensor (e.g. a learnable
    /// scalar); gradient flows to both operands.
    pub fn mul_scalar_tensor(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_scalar_tensor", format!("scalar has shape {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data: Vec<f64> = a.data().iter().map(|&x| x * sv).collect();
        let rec: Option<BackwardFn> = self.wants_grad(&[a, s]).then(|| {
            let (an, sn) = (a.node(), s.node());
            let ad = a.data_arc();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                if let Some(n) = an {
                    store.give(n, g.iter().map(|g| g * sv).collect());
                }
                if let Some(n) = sn {
                    let dot: f64 = g.iter().zip(ad.iter()).map(|(g, x)| g * x).sum();
                    store.give(n, vec![dot]);
                }
            }) as BackwardFn
        });
        Ok(self.emit("mul_scalar_tensor", a.shape().to_vec(), data, rec))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            let numel = a.numel();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                store.give(an, vec![g[0]; numel]);
            }) as BackwardFn
        });
        Ok(self.emit("sum_all", vec![1], vec![s], rec))
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let sum = self.sum_all(a)?;
        Ok(self.scale(&sum, 1.0 / a.numel() as f64))
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.shape().len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for rank {}", a.shape().len())));
        }
        let shape = a.shape();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        let src = a.data();
        for o in 0..outer {
            for k in 0..axis_len {
                let base = (o * axis_len + k) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut da = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    for k in 0..axis_len {
                        let base = (o * axis_len + k) * inner;
                        let gslice = &g[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            da[base + i] = gslice[i];
                        }
                    }
                }
                store.give(an, da);
            }) as BackwardFn
        });
        Ok(self.emit("sum_axis", out_shape, data, rec))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape())));
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                store.accum(an, g);
            }) as BackwardFn
        });
        Ok(self.emit("reshape", shape, a.data().to_vec(), rec))
    }

    /// Concatenate along an axis; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat", "rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?} on axis {d}", p.shape(), parts[0].shape()),
                    ));
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let len = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            spans.push((p.node(), offset, len));
            offset += len;
        }
        let rec: Option<BackwardFn> = self.wants_grad(parts).then(|| {
            Box::new(move |g: &[f64], store: &mut GradStore| {
                for &(node, off, len) in &spans {
                    let Some(node) = node else { continue };
                    let mut part = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + off) * inner;
                        let dst_base = o * len * inner;
                        part[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g[src_base..src_base + len * inner]);
                    }
                    store.give(node, part);
                }
            }) as BackwardFn
        });
        Ok(self.emit("concat", out_shape, data, rec))
    }

    /// Contiguous slice `[start, start+len)` along an axis.
    pub fn narrow(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis}, range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let src = a.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * full + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut da = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst_base = (o * full + start) * inner;
                    let src_base = o * len * inner;
                    da[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                store.give(an, da);
            }) as BackwardFn
        });
        Ok(self.emit("narrow", out_shape, data, rec))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("transpose_last2", format!("rank {} < 2", shape.len())));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let src = a.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    data[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let rec: Option<BackwardFn> = self.wants_grad(&[a]).then(|| {
            let an = a.node().unwrap();
            Box::new(move |g: &[f64], store: &mut GradStore| {
                let mut da = vec![0.0; g.len()];
                for b in 0..batch {
                    let base = b * rows * cols;
                    for c in 0..cols {
                        for r in 0..rows {
                            da[base + r * cols + c] = g[base + c * rows + r];
                        }
                    }
                }
                store.give(an, da);
            }) as BackwardFn
        });
        Ok(self.emit("transpose_last2", out_shape, data, rec))
    }
}
