//! Differentiable geometric and loss operators shared by both networks:
//! backward warping, flow rescaling, confidence blending, local correlation
//! with cost-volume normalization, and the robust photometric/smoothness
//! losses used in stage-one training.
//!
//! The tensor-level operators accept rank-3 `C x H x W` tensors or rank-4
//! `N x C x H x W` tensors (rank is preserved). Flow tensors carry 2
//! channels: 0 = horizontal displacement in pixels, 1 = vertical.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const CHARBONNIER_ALPHA: f64 = 0.5;
pub const SMOOTHNESS_EDGE_WEIGHT: f64 = 10.0;

/// Image with values in `[0, 1]`, stored `C x H x W` with 1 or 3 channels.
#[derive(Clone, Debug)]
pub struct Frame {
    pub data: Tensor,
}

impl Frame {
    pub fn new(data: Tensor) -> Result<Frame> {
        let shape = data.shape();
        if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
            return Err(Error::shape("frame", format!("expected (1|3)xHxW, got {shape:?}")));
        }
        Ok(Frame { data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Frame {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Frame { data: Tensor::from_vec(vec![channels, height, width], data) }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Mean over channels at one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let c = self.channels();
        let hw = self.height() * self.width();
        let base = y * self.width() + x;
        let d = self.data.data();
        (0..c).map(|ch| d[ch * hw + base]).sum::<f64>() / c as f64
    }

    /// Clamp values into `[0, 1]` (applied at IO boundaries).
    pub fn clamped(&self) -> Frame {
        let data: Vec<f64> = self.data.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Frame { data: Tensor::from_vec(self.data.shape().to_vec(), data) }
    }

    /// View as a 1 x C x H x W network input.
    pub fn as_input(&self) -> Tensor {
        self.data.view(vec![1, self.channels(), self.height(), self.width()])
    }
}

/// Displacement field in pixels, stored `2 x H x W`.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<FlowField> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::shape("flow_field", format!("expected 2xHxW, got {shape:?}")));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite { op: "flow_field" });
        }
        Ok(FlowField { data })
    }

    pub fn zeros(height: usize, width: usize) -> FlowField {
        FlowField { data: Tensor::zeros(&[2, height, width]) }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> FlowField {
        let mut data = vec![u; height * width];
        data.extend(std::iter::repeat(v).take(height * width));
        FlowField { data: Tensor::from_vec(vec![2, height, width], data) }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self, y: usize, x: usize) -> f64 {
        self.data.at(&[0, y, x])
    }

    pub fn v(&self, y: usize, x: usize) -> f64 {
        self.data.at(&[1, y, x])
    }

    pub fn as_input(&self) -> Tensor {
        self.data.view(vec![1, 2, self.height(), self.width()])
    }

    /// Mean endpoint error against another field, in pixels.
    pub fn endpoint_error(&self, other: &FlowField) -> f64 {
        assert_eq!(self.data.shape(), other.data.shape());
        let (h, w) = (self.height(), self.width());
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let du = self.u(y, x) - other.u(y, x);
                let dv = self.v(y, x) - other.v(y, x);
                acc += (du * du + dv * dv).sqrt();
            }
        }
        acc / (h * w) as f64
    }
}

/// Per-pixel blending weight in `[0, 1]`, stored `1 x H x W`.
#[derive(Clone, Debug)]
pub struct ConfidenceMask {
    pub data: Tensor,
}

impl ConfidenceMask {
    pub fn new(data: Tensor) -> Result<ConfidenceMask> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape("confidence_mask", format!("expected 1xHxW, got {shape:?}")));
        }
        if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("confidence_mask", "values outside [0, 1]"));
        }
        Ok(ConfidenceMask { data })
    }
}

/// (n, c, h, w) of a rank-3 or rank-4 tensor.
fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected CxHxW or NxCxHxW, got {:?}", t.shape()))),
    }
}

fn check_flow(op: &'static str, flow: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims(op, flow)?;
    if c != 2 {
        return Err(Error::shape(op, format!("flow must have 2 channels, got {:?}", flow.shape())));
    }
    Ok((n, h, w))
}

/// Bilinear backward warp: `warped(x, y) = source(x + u(x,y), y + v(x,y))`
/// with zero fill outside the image. Returns the warped tensor and a
/// validity map (1 where the sample position has full bilinear support,
/// 0 otherwise); the validity map is not differentiable.
pub fn backward_warp(tape: &mut Tape, source: &Tensor, flow: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims("backward_warp", source)?;
    let (fn_, fh, fw) = check_flow("backward_warp", flow)?;
    if (fn_, fh, fw) != (n, h, w) {
        return Err(Error::shape(
            "backward_warp",
            format!("source {:?} vs flow {:?}", source.shape(), flow.shape()),
        ));
    }
    let hw = h * w;
    let src = source.data();
    let fd = flow.data();
    let mut data = vec![0.0; n * c * hw];
    let mut validity = vec![0.0; n * hw];
    for b in 0..n {
        let ubase = b * 2 * hw;
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let sx = x as f64 + fd[ubase + pix];
                let sy = y as f64 + fd[ubase + hw + pix];
                if sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64 {
                    validity[b * hw + pix] = 1.0;
                }
                let x0 = sx.floor() as isize;
                let y0 = sy.floor() as isize;
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1, (1.0 - fy) * fx),
                    (y0 + 1, x0, fy * (1.0 - fx)),
                    (y0 + 1, x0 + 1, fy * fx),
                ];
                for ch in 0..c {
                    let sbase = (b * c + ch) * hw;
                    let mut acc = 0.0;
                    for &(cy, cx, cw) in &corners {
                        if cw != 0.0 && cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
                            acc += cw * src[sbase + cy as usize * w + cx as usize];
                        }
                    }
                    data[sbase + pix] = acc;
                }
            }
        }
    }
    let out_shape = source.shape().to_vec();
    let mut val_shape = out_shape.clone();
    val_shape[out_shape.len() - 3] = 1;
    let rec = tape.wants_grad(&[source, flow]).then(|| {
        let s_node = source.node();
        let f_node = flow.node();
        let src = source.data_arc();
        let fd = flow.data_arc();
        Box::new(move |g: &[f64], store: &mut crate::tensor::GradStore| {
            let mut d_src = s_node.map(|_| vec![0.0; src.len()]);
            let mut d_flow = f_node.map(|_| vec![0.0; fd.len()]);
            let inside =
                |cy: isize, cx: isize| cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize;
            for b in 0..n {
                let ubase = b * 2 * hw;
                for y in 0..h {
                    for x in 0..w {
                        let pix = y * w + x;
                        let sx = x as f64 + fd[ubase + pix];
                        let sy = y as f64 + fd[ubase + hw + pix];
                        let x0 = sx.floor() as isize;
                        let y0 = sy.floor() as isize;
                        let fx = sx - x0 as f64;
                        let fy = sy - y0 as f64;
                        let at = |cy: isize, cx: isize, sbase: usize| -> f64 {
                            if inside(cy, cx) {
                                src[sbase + cy as usize * w + cx as usize]
                            } else {
                                0.0
                            }
                        };
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ch in 0..c {
                            let sbase = (b * c + ch) * hw;
                            let gv = g[sbase + pix];
                            if gv == 0.0 {
                                continue;
                            }
                            let s00 = at(y0, x0, sbase);
                            let s01 = at(y0, x0 + 1, sbase);
                            let s10 = at(y0 + 1, x0, sbase);
                            let s11 = at(y0 + 1, x0 + 1, sbase);
                            if let Some(ds) = d_src.as_mut() {
                                let corners = [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x0 + 1, (1.0 - fy) * fx),
                                    (y0 + 1, x0, fy * (1.0 - fx)),
                                    (y0 + 1, x0 + 1, fy * fx),
                                ];
                                for &(cy, cx, cw) in &corners {
                                    if cw != 0.0 && inside(cy, cx) {
                                        ds[sbase + cy as usize * w + cx as usize] += gv * cw;
                                    }
                                }
                            }
                            du += gv * ((1.0 - fy) * (s01 - s00) + fy * (s11 - s10));
                            dv += gv * ((1.0 - fx) * (s10 - s00) + fx * (s11 - s01));
                        }
                        if let Some(df) = d_flow.as_mut() {
                            df[ubase + pix] += du;
                            df[ubase + hw + pix] += dv;
                        }
                    }
                }
            }
            if let (Some(node), Some(ds)) = (s_node, d_src) {
                store.give(node, ds);
            }
            if let (Some(node), Some(df)) = (f_node, d_flow) {
                store.give(node, df);
            }
        }) as Box<dyn FnOnce(&[f64], &mut crate::tensor::GradStore)>
    });
    let warped = tape.emit("backward_warp", out_shape, data, rec);
    let valid = Tensor::from_vec(val_shape, validity);
    Ok((warped, valid))
}

/// Resize a flow field by `factor` in each spatial dimension and scale the
/// displacement values by the same factor.
pub fn rescale_flow(tape: &mut Tape, flow: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return Err(Error::invalid("rescale_flow", format!("factor {factor} must be > 0")));
    }
    let (_, h, w) = check_flow("rescale_flow", flow)?;
    if factor == 1.0 {
        return Ok(flow.clone());
    }
    let out_h = ((h as f64 * factor).round() as usize).max(1);
    let out_w = ((w as f64 * factor).round() as usize).max(1);
    let resized = tape.bilinear_resize(flow, out_h, out_w)?;
    Ok(tape.scale(&resized, factor))
}

/// Confidence blend of two motion fields: `mask * v_img + (1 - mask) * v_evt`,
/// exact at the endpoints.
pub fn blend_flows(tape: &mut Tape, v_img: &Tensor, v_evt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let a = check_flow("blend_flows", v_img)?;
    let b = check_flow("blend_flows", v_evt)?;
    if a != b {
        return Err(Error::shape(
            "blend_flows",
            format!("{:?} vs {:?}", v_img.shape(), v_evt.shape()),
        ));
    }
    let (mn, mc, mh, mw) = dims("blend_flows", mask)?;
    if mc != 1 || (mn, mh, mw) != a {
        return Err(Error::shape(
            "blend_flows",
            format!("mask {:?} does not match flows {:?}", mask.shape(), v_img.shape()),
        ));
    }
    let img_part = tape.broadcast_mul(v_img, mask)?;
    let inv = tape.neg(mask);
    let inv = tape.add_scalar(&inv, 1.0);
    let evt_part = tape.broadcast_mul(v_evt, &inv)?;
    tape.add(&img_part, &evt_part)
}

/// L2-normalize along the channel axis: `x / (||x||_2 + eps)` per spatial
/// position.
pub fn channel_normalize(tape: &mut Tape, x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = dims("channel_normalize", x)?;
    let hw = h * w;
    let src = x.data();
    let mut norms = vec![0.0; n * hw]; // s = sqrt(sum of squares), before eps
    let mut data = vec![0.0; src.len()];
    for b in 0..n {
        for pix in 0..hw {
            let mut q = 0.0;
            for ch in 0..c {
                let v = src[(b * c + ch) * hw + pix];
                q += v * v;
            }
            let s = q.sqrt();
            norms[b * hw + pix] = s;
            let inv_r = 1.0 / (s + eps);
            for ch in 0..c {
                let idx = (b * c + ch) * hw + pix;
                data[idx] = src[idx] * inv_r;
            }
        }
    }
    let rec = tape.wants_grad(&[x]).then(|| {
        let node = x.node().unwrap();
        let src = x.data_arc();
        Box::new(move |g: &[f64], store: &mut crate::tensor::GradStore| {
            let mut dx = vec![0.0; src.len()];
            for b in 0..n {
                for pix in 0..hw {
                    let s = norms[b * hw + pix];
                    let r = s + eps;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let idx = (b * c + ch) * hw + pix;
                        dot += g[idx] * src[idx];
                    }
                    let correction = if s > 0.0 { dot / (r * r * s) } else { 0.0 };
                    for ch in 0..c {
                        let idx = (b * c + ch) * hw + pix;
                        dx[idx] = g[idx] / r - correction * src[idx];
                    }
                }
            }
            store.give(node, dx);
        }) as Box<dyn FnOnce(&[f64], &mut crate::tensor::GradStore)>
    });
    Ok(tape.emit("channel_normalize", x.shape().to_vec(), data, rec))
}

/// Local cost volume: channel `d` holds the dot product between `feat_a` at
/// `(x, y)` and `feat_b` at the displaced position for each of the
/// `(2r+1)^2` displacements (zero outside borders). With `normalize`, both
/// features are L2-normalized along channels first (cosine similarity).
pub fn local_correlation(
    tape: &mut Tape,
    feat_a: &Tensor,
    feat_b: &Tensor,
    radius: usize,
    normalize: bool,
) -> Result<Tensor> {
    if feat_a.shape() != feat_b.shape() {
        return Err(Error::shape(
            "local_correlation",
            format!("{:?} vs {:?}", feat_a.shape(), feat_b.shape()),
        ));
    }
    let (a, b) = if normalize {
        (
            channel_normalize(tape, feat_a, 1e-6)?,
            channel_normalize(tape, feat_b, 1e-6)?,
        )
    } else {
        (feat_a.clone(), feat_b.clone())
    };
    let (n, c, h, w) = dims("local_correlation", &a)?;
    let side = 2 * radius + 1;
    let out_c = side * side;
    let hw = h * w;
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; n * out_c * hw];
    let r = radius as isize;
    for bi in 0..n {
        for (d, (dy, dx)) in (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).enumerate() {
            let obase = (bi * out_c + d) * hw;
            for y in 0..h as isize {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let pa = (y * w as isize + x) as usize;
                    let pb = (sy * w as isize + sx) as usize;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += ad[(bi * c + ch) * hw + pa] * bd[(bi * c + ch) * hw + pb];
                    }
                    data[obase + pa] = acc;
                }
            }
        }
    }
    let mut out_shape = a.shape().to_vec();
    let ci = out_shape.len() - 3;
    out_shape[ci] = out_c;
    let rec = tape.wants_grad(&[&a, &b]).then(|| {
        let a_node = a.node();
        let b_node = b.node();
        let ad = a.data_arc();
        let bd = b.data_arc();
        Box::new(move |g: &[f64], store: &mut crate::tensor::GradStore| {
            let mut da = a_node.map(|_| vec![0.0; ad.len()]);
            let mut db = b_node.map(|_| vec![0.0; bd.len()]);
            for bi in 0..n {
                for (d, (dy, dx)) in
                    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).enumerate()
                {
                    let obase = (bi * out_c + d) * hw;
                    for y in 0..h as isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let sx = x + dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let pa = (y * w as isize + x) as usize;
                            let pb = (sy * w as isize + sx) as usize;
                            let gv = g[obase + pa];
                            if gv == 0.0 {
                                continue;
                            }
                            for ch in 0..c {
                                let ia = (bi * c + ch) * hw + pa;
                                let ib = (bi * c + ch) * hw + pb;
                                if let Some(da) = da.as_mut() {
                                    da[ia] += gv * bd[ib];
                                }
                                if let Some(db) = db.as_mut() {
                                    db[ib] += gv * ad[ia];
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(node), Some(da)) = (a_node, da) {
                store.give(node, da);
            }
            if let (Some(node), Some(db)) = (b_node, db) {
                store.give(node, db);
            }
        }) as Box<dyn FnOnce(&[f64], &mut crate::tensor::GradStore)>
    });
    Ok(tape.emit("local_correlation", out_shape, data, rec))
}

/// Robust penalty `mean((x^2 + eps^2)^alpha)`.
pub fn charbonnier(tape: &mut Tape, residual: &Tensor, eps: f64, alpha: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid("charbonnier", "eps must be > 0"));
    }
    let sq = tape.mul(residual, residual)?;
    let shifted = tape.add_scalar(&sq, eps * eps);
    let powered = tape.powf(&shifted, alpha);
    tape.mean_all(&powered)
}

/// First-order edge-aware smoothness: mean of `|d flow| * exp(-beta *
/// mean_c |d image|)` over forward differences, x and y terms averaged
/// separately and summed. `beta` = [`SMOOTHNESS_EDGE_WEIGHT`].
pub fn edge_aware_smoothness(tape: &mut Tape, flow: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (fnn, fh, fw) = check_flow("edge_aware_smoothness", flow)?;
    let (inn, ic, ih, iw) = dims("edge_aware_smoothness", image)?;
    if (fnn, fh, fw) != (inn, ih, iw) {
        return Err(Error::shape(
            "edge_aware_smoothness",
            format!("flow {:?} vs image {:?}", flow.shape(), image.shape()),
        ));
    }
    let rank = flow.shape().len();
    let (h_axis, w_axis) = (rank - 2, rank - 1);
    let c_axis = rank - 3;
    let beta = SMOOTHNESS_EDGE_WEIGHT;
    let mut total: Option<Tensor> = None;
    for (axis, len) in [(w_axis, fw), (h_axis, fh)] {
        if len < 2 {
            continue;
        }
        let hi_f = tape.narrow(flow, axis, 1, len - 1)?;
        let lo_f = tape.narrow(flow, axis, 0, len - 1)?;
        let dflow = tape.sub(&hi_f, &lo_f)?;
        let dflow = tape.abs(&dflow);
        let hi_i = tape.narrow(image, axis, 1, len - 1)?;
        let lo_i = tape.narrow(image, axis, 0, len - 1)?;
        let dimg = tape.sub(&hi_i, &lo_i)?;
        let dimg = tape.abs(&dimg);
        let mean_c = tape.sum_axis(&dimg, c_axis)?;
        let mean_c = tape.scale(&mean_c, 1.0 / ic as f64);
        let weight = tape.scale(&mean_c, -beta);
        let weight = tape.exp(&weight);
        let weighted = tape.broadcast_mul(&dflow, &weight)?;
        let term = tape.mean_all(&weighted)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("edge_aware_smoothness", "field too small for differences"))
}

/// Stage-one objective: Charbonnier photometric terms between the ground
/// truth frame and both warped key frames, plus edge-aware smoothness on
/// both fields. Defaults `lambda1 = 1`, `lambda2 = 10`.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss(
    tape: &mut Tape,
    gt: &Tensor,
    frame0: &Tensor,
    frame1: &Tensor,
    v_t0: &Tensor,
    v_t1: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor> {
    let (warp0, _) = backward_warp(tape, frame0, v_t0)?;
    let (warp1, _) = backward_warp(tape, frame1, v_t1)?;
    let r0 = tape.sub(gt, &warp0)?;
    let r1 = tape.sub(gt, &warp1)?;
    let p0 = charbonnier(tape, &r0, CHARBONNIER_EPS, CHARBONNIER_ALPHA)?;
    let p1 = charbonnier(tape, &r1, CHARBONNIER_EPS, CHARBONNIER_ALPHA)?;
    let s0 = edge_aware_smoothness(tape, v_t0, gt)?;
    let s1 = edge_aware_smoothness(tape, v_t1, gt)?;
    let photo = tape.add(&p0, &p1)?;
    let photo = tape.scale(&photo, lambda1);
    let smooth = tape.add(&s0, &s1)?;
    let smooth = tape.scale(&smooth, lambda2);
    tape.add(&photo, &smooth)
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

    fn ramp_frame(h: usize, w: usize) -> Tensor {
        Frame::from_fn(1, h, w, |_, y, x| (y * w + x) as f64 / (h * w) as f64).data
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut tape = Tape::no_grad();
        let src = ramp_frame(5, 6);
        let flow = Tensor::zeros(&[2, 5, 6]);
        let (warped, valid) = backward_warp(&mut tape, &src, &flow).unwrap();
        assert_eq!(warped.data(), src.data());
        assert!(valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn warp_unit_shift_samples_next_column() {
        let mut tape = Tape::no_grad();
        let src = ramp_frame(4, 5);
        let flow = FlowField::constant(4, 5, 1.0, 0.0).data;
        let (warped, valid) = backward_warp(&mut tape, &src, &flow).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!((warped.at(&[0, y, x]) - src.at(&[0, y, x + 1])).abs() < 1e-12);
                assert_eq!(valid.at(&[0, y, x]), 1.0);
            }
            // last column samples outside: invalid
            assert_eq!(valid.at(&[0, y, 4]), 0.0);
        }
    }

    #[test]
    fn warp_gradcheck_interior_flow() {
        let mut rng = Rng::new(31);
        let src = rand_tensor(&[2, 6, 6], &mut rng);
        // keep samples >= 1 px from the border so validity does not switch
        let numel = 2 * 6 * 6;
        let flow = Tensor::from_vec(
            vec![2, 6, 6],
            (0..numel).map(|_| rng.uniform(-0.9, 0.9)).collect(),
        );
        let probe = rand_tensor(&[2, 6, 6], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let (warped, _) = backward_warp(tape, &xs[0], &xs[1])?;
                let weighted = tape.mul(&warped, &xs[2])?;
                tape.sum_all(&weighted)
            },
            &[src, flow, probe],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn warp_is_linear_in_source() {
        let mut rng = Rng::new(5);
        let s1 = rand_tensor(&[1, 5, 5], &mut rng);
        let s2 = rand_tensor(&[1, 5, 5], &mut rng);
        let flow = Tensor::from_vec(vec![2, 5, 5], (0..50).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let mut tape = Tape::no_grad();
        let (a, b) = (2.5, -1.25);
        let combo = Tensor::from_vec(
            vec![1, 5, 5],
            s1.data().iter().zip(s2.data()).map(|(x, y)| a * x + b * y).collect(),
        );
        let (w_combo, _) = backward_warp(&mut tape, &combo, &flow).unwrap();
        let (w1, _) = backward_warp(&mut tape, &s1, &flow).unwrap();
        let (w2, _) = backward_warp(&mut tape, &s2, &flow).unwrap();
        for i in 0..25 {
            let want = a * w1.data()[i] + b * w2.data()[i];
            assert!((w_combo.data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rescale_constants() {
        let mut tape = Tape::no_grad();
        let f = FlowField::constant(8, 8, 1.0, 0.0).data;
        let same = rescale_flow(&mut tape, &f, 1.0).unwrap();
        assert_eq!(same.data(), f.data());
        let up = rescale_flow(&mut tape, &f, 2.0).unwrap();
        assert_eq!(up.shape(), &[2, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                assert!((up.at(&[0, y, x]) - 2.0).abs() < 1e-12);
                assert!(up.at(&[1, y, x]).abs() < 1e-12);
            }
        }
        let down = rescale_flow(&mut tape, &up, 0.5).unwrap();
        assert_eq!(down.shape(), f.shape());
        for (a, b) in down.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rescale_flow(&mut tape, &f, 0.0).is_err());
    }

    #[test]
    fn blend_endpoints_exact() {
        let mut tape = Tape::no_grad();
        let mut rng = Rng::new(77);
        let v_img = rand_tensor(&[2, 4, 4], &mut rng);
        let v_evt = rand_tensor(&[2, 4, 4], &mut rng);
        let ones = Tensor::full(&[1, 4, 4], 1.0);
        let zeros = Tensor::zeros(&[1, 4, 4]);
        let out = blend_flows(&mut tape, &v_img, &v_evt, &ones).unwrap();
        assert_eq!(out.data(), v_img.data());
        let out = blend_flows(&mut tape, &v_img, &v_evt, &zeros).unwrap();
        assert_eq!(out.data(), v_evt.data());
    }

    #[test]
    fn blend_midpoint_and_interval_property() {
        let mut tape = Tape::no_grad();
        let v_img = FlowField::constant(3, 3, 2.0, 0.0).data;
        let v_evt = FlowField::constant(3, 3, 0.0, 2.0).data;
        let half = Tensor::full(&[1, 3, 3], 0.5);
        let out = blend_flows(&mut tape, &v_img, &v_evt, &half).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert!((out.at(&[0, y, x]) - 1.0).abs() < 1e-12);
                assert!((out.at(&[1, y, x]) - 1.0).abs() < 1e-12);
            }
        }
        // arbitrary masks stay inside the componentwise interval
        let mut rng = Rng::new(2);
        let v_img = rand_tensor(&[2, 4, 4], &mut rng);
        let v_evt = rand_tensor(&[2, 4, 4], &mut rng);
        let mask = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|_| rng.unit()).collect());
        let out = blend_flows(&mut tape, &v_img, &v_evt, &mask).unwrap();
        for c in 0..2 {
            for i in 0..16 {
                let (a, b) = (v_img.data()[c * 16 + i], v_evt.data()[c * 16 + i]);
                let v = out.data()[c * 16 + i];
                assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            }
        }
    }

    #[test]
    fn correlation_cosine_self_similarity() {
        let mut tape = Tape::no_grad();
        let mut rng = Rng::new(8);
        let feat = rand_tensor(&[4, 3, 3], &mut rng);
        let out = local_correlation(&mut tape, &feat, &feat, 0, true).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-3, "cosine self-similarity {v}");
        }
    }

    #[test]
    fn correlation_channel_count() {
        let mut tape = Tape::no_grad();
        let feat = Tensor::zeros(&[2, 8, 8]);
        let out = local_correlation(&mut tape, &feat, &feat, 3, false).unwrap();
        assert_eq!(out.shape(), &[49, 8, 8]);
    }

    #[test]
    fn correlation_matches_triple_loop_oracle() {
        let mut tape = Tape::no_grad();
        let mut rng = Rng::new(12);
        let a = rand_tensor(&[3, 4, 4], &mut rng);
        let b = rand_tensor(&[3, 4, 4], &mut rng);
        let out = local_correlation(&mut tape, &a, &b, 1, false).unwrap();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let d = ((dy + 1) * 3 + (dx + 1)) as usize;
                for y in 0..4i64 {
                    for x in 0..4i64 {
                        let (sy, sx) = (y + dy, x + dx);
                        let mut want = 0.0;
                        if (0..4).contains(&sy) && (0..4).contains(&sx) {
                            for c in 0..3usize {
                                want += a.at(&[c, y as usize, x as usize])
                                    * b.at(&[c, sy as usize, sx as usize]);
                            }
                        }
                        let got = out.at(&[d, y as usize, x as usize]);
                        assert!((got - want).abs() < 1e-9, "d={d} y={y} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_normalized_range_and_gradcheck() {
        let mut rng = Rng::new(4);
        let a = rand_tensor(&[3, 4, 4], &mut rng);
        let b = rand_tensor(&[3, 4, 4], &mut rng);
        let mut tape = Tape::no_grad();
        let out = local_correlation(&mut tape, &a, &b, 2, true).unwrap();
        for &v in out.data() {
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
        }
        let probe = rand_tensor(&[9, 4, 4], &mut rng);
        let err = grad_check(
            |tape, xs| {
                let c = local_correlation(tape, &xs[0], &xs[1], 1, true)?;
                let p = tape.mul(&c, &xs[2])?;
                tape.sum_all(&p)
            },
            &[a, b, probe],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn charbonnier_values() {
        let mut tape = Tape::no_grad();
        let zero = Tensor::zeros(&[4]);
        let v = charbonnier(&mut tape, &zero, 1e-3, 0.5).unwrap().item();
        assert!((v - 1e-3).abs() < 1e-15);
        let three = Tensor::full(&[2], 3.0);
        let v = charbonnier(&mut tape, &three, 1e-3, 0.5).unwrap().item();
        assert!((v - (9.0f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_is_even_and_smooth_at_origin() {
        let mut tape = Tape::no_grad();
        let mut rng = Rng::new(3);
        let x = rand_tensor(&[8], &mut rng);
        let neg = Tensor::from_vec(vec![8], x.data().iter().map(|v| -v).collect());
        let a = charbonnier(&mut tape, &x, 1e-3, 0.5).unwrap().item();
        let b = charbonnier(&mut tape, &neg, 1e-3, 0.5).unwrap().item();
        assert_eq!(a, b);

        // gradient at zero residual is zero
        let mut tape = Tape::new();
        let zero = tape.leaf(&Tensor::zeros(&[4]));
        let loss = charbonnier(&mut tape, &zero, 1e-3, 0.5).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for &g in grads.get(&zero).unwrap() {
            assert_eq!(g, 0.0);
        }
        let z = Tensor::zeros(&[4]);
        let err = grad_check(|tape, xs| charbonnier(tape, &xs[0], 1e-3, 0.5), &[z], 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn smoothness_constant_flow_is_zero() {
        let mut tape = Tape::no_grad();
        let flow = FlowField::constant(6, 6, 3.0, -2.0).data;
        let image = ramp_frame(6, 6);
        let v = edge_aware_smoothness(&mut tape, &flow, &image).unwrap().item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn smoothness_matches_scalar_oracle() {
        let (h, w) = (5, 7);
        let mut rng = Rng::new(19);
        let flow = rand_tensor(&[2, h, w], &mut rng);
        let img_t = Tensor::from_vec(vec![1, h, w], (0..h * w).map(|_| rng.unit()).collect());
        let mut tape = Tape::no_grad();
        let got = edge_aware_smoothness(&mut tape, &flow, &img_t).unwrap().item();

        // independent scalar-loop evaluation
        let beta = 10.0;
        let fd = flow.data();
        let id = img_t.data();
        let mut term_x = 0.0;
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w - 1 {
                    let dj = (id[y * w + x + 1] - id[y * w + x]).abs();
                    let dv = (fd[c * h * w + y * w + x + 1] - fd[c * h * w + y * w + x]).abs();
                    term_x += dv * (-beta * dj).exp();
                }
            }
        }
        term_x /= (2 * h * (w - 1)) as f64;
        let mut term_y = 0.0;
        for c in 0..2 {
            for y in 0..h - 1 {
                for x in 0..w {
                    let dj = (id[(y + 1) * w + x] - id[y * w + x]).abs();
                    let dv = (fd[c * h * w + (y + 1) * w + x] - fd[c * h * w + y * w + x]).abs();
                    term_y += dv * (-beta * dj).exp();
                }
            }
        }
        term_y /= (2 * (h - 1) * w) as f64;
        assert!((got - (term_x + term_y)).abs() < 1e-12, "{got} vs {}", term_x + term_y);
    }

    #[test]
    fn smoothness_discounted_on_edges() {
        // a flow discontinuity aligned with a strong image edge costs less
        let (h, w) = (6, 6);
        let step_flow = Tensor::from_vec(
            vec![2, h, w],
            (0..2 * h * w)
                .map(|i| {
                    let x = i % w;
                    if x >= 3 {
                        2.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        let flat = Tensor::full(&[1, h, w], 0.5);
        let edged = Tensor::from_vec(
            vec![1, h, w],
            (0..h * w).map(|i| if i % w >= 3 { 1.0 } else { 0.0 }).collect(),
        );
        let mut tape = Tape::no_grad();
        let on_flat = edge_aware_smoothness(&mut tape, &step_flow, &flat).unwrap().item();
        let on_edge = edge_aware_smoothness(&mut tape, &step_flow, &edged).unwrap().item();
        assert!(on_edge < on_flat, "{on_edge} !< {on_flat}");
    }

    #[test]
    fn smoothness_gradcheck() {
        let mut rng = Rng::new(40);
        let flow = rand_tensor(&[2, 4, 4], &mut rng);
        let img = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|_| rng.unit()).collect());
        let err = grad_check(
            |tape, xs| edge_aware_smoothness(tape, &xs[0], &xs[1]),
            &[flow, img],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn flow_loss_static_scene_floor() {
        // identical frames and zero flows: photometric residuals are zero,
        // so the loss is exactly 2 * lambda1 * charbonnier_eps.
        let mut tape = Tape::no_grad();
        let frame = ramp_frame(8, 8);
        let zero = Tensor::zeros(&[2, 8, 8]);
        let v = flow_loss(&mut tape, &frame, &frame, &frame, &zero, &zero, 1.0, 10.0)
            .unwrap()
            .item();
        assert!((v - 2.0 * CHARBONNIER_EPS).abs() < 1e-12, "loss {v}");
    }

    #[test]
    fn flow_loss_prefers_true_flow_on_translation() {
        // 16x16 texture translating by one pixel: supplying the true flows
        // beats zero flows on the photometric term.
        let (h, w) = (16, 16);
        let mut rng = Rng::new(50);
        let canvas: Vec<f64> = (0..(h * (w + 2))).map(|_| rng.unit()).collect();
        let frame_at = |shift: usize| -> Tensor {
            Tensor::from_vec(
                vec![1, h, w],
                (0..h).flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| canvas[y * (w + 2) + x + shift])
                    .collect(),
            )
        };
        let i0 = frame_at(0);
        let gt = frame_at(1);
        let i1 = frame_at(2);
        // the scene moves right by 1 px per step; the backward flow from t
        // to frame 0 points left in the sampling sense: gt(x) = i0(x + ? )
        // gt pixel x holds canvas[x+1] = i0 pixel x+1 -> u = +1 for t->0,
        // and i1 pixel x-1 -> u = -1 for t->1.
        let v_t0 = FlowField::constant(h, w, 1.0, 0.0).data;
        let v_t1 = FlowField::constant(h, w, -1.0, 0.0).data;
        let zero = Tensor::zeros(&[2, h, w]);
        let mut tape = Tape::no_grad();
        let with_true = flow_loss(&mut tape, &gt, &i0, &i1, &v_t0, &v_t1, 1.0, 0.0).unwrap().item();
        let with_zero = flow_loss(&mut tape, &gt, &i0, &i1, &zero, &zero, 1.0, 0.0).unwrap().item();
        assert!(with_true < with_zero, "{with_true} !< {with_zero}");
    }

    #[test]
    fn flow_loss_gradcheck_on_flows() {
        let mut rng = Rng::new(60);
        let base: Vec<f64> = (0..36).map(|_| rng.unit()).collect();
        let gt = Tensor::from_vec(vec![1, 6, 6], base.clone());
        let i0 = rand_tensor(&[1, 6, 6], &mut rng);
        let i1 = rand_tensor(&[1, 6, 6], &mut rng);
        let v_t0 = Tensor::from_vec(vec![2, 6, 6], (0..72).map(|_| rng.uniform(-0.8, 0.8)).collect());
        let v_t1 = Tensor::from_vec(vec![2, 6, 6], (0..72).map(|_| rng.uniform(-0.8, 0.8)).collect());
        let err = grad_check(
            |tape, xs| flow_loss(tape, &gt, &i0, &i1, &xs[0], &xs[1], 1.0, 10.0),
            &[v_t0, v_t1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
