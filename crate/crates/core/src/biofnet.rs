//! Cascaded cross-modal bidirectional flow estimator.
//!
//! A 3-level scale pyramid (s = 0 coarsest) runs four stages per scale:
//! anchor feature synthesis (a learned stand-in for features of the unseen
//! intermediate frame), event-only residual flow estimation at twice the
//! image-flow resolution, confidence-mask fusion of the upsampled
//! image-level flow with the event-level flow, and correlation-based
//! residual refinement against the anchor features. Residual and mask
//! heads are zero-initialized so the untrained cascade is exactly the
//! identity on flows.

use crate::error::{Error, Result};
use crate::flow::{backward_warp, blend_flows, local_correlation, rescale_flow};
use crate::params::{init_conv, ParamStore, ParamTensors};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Geometry of the scale pyramid. Scale `s` estimates image-level flows at
/// `1 / image_downsample(s)` of the input resolution and event-level flows
/// at twice that.
#[derive(Clone, Copy, Debug)]
pub struct PyramidConfig {
    pub scales: usize,
    /// Frame-feature channels at the finest scale; doubled per coarser level.
    pub base_channels: usize,
    /// Event-flow feature channels at the finest event scale; doubled per
    /// coarser level.
    pub event_channels: usize,
    pub correlation_radius: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { scales: 3, base_channels: 16, event_channels: 8, correlation_radius: 3 }
    }
}

impl PyramidConfig {
    /// Small instance for finite-difference checks.
    pub fn micro() -> Self {
        PyramidConfig { scales: 3, base_channels: 4, event_channels: 4, correlation_radius: 1 }
    }

    pub fn image_downsample(&self, s: usize) -> usize {
        1 << (self.scales - s)
    }

    pub fn event_downsample(&self, s: usize) -> usize {
        self.image_downsample(s) / 2
    }

    pub fn max_downsample(&self) -> usize {
        self.image_downsample(0)
    }

    pub fn frame_channels(&self, s: usize) -> usize {
        self.base_channels << (self.scales - 1 - s)
    }

    pub fn event_feat_channels(&self, s: usize) -> usize {
        self.event_channels << (self.scales - 1 - s)
    }

    fn check_geometry(&self, h: usize, w: usize) -> Result<()> {
        let d = self.max_downsample();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "eif_biofnet",
                format!("input {h}x{w} not divisible by pyramid downsample {d}"),
            ));
        }
        Ok(())
    }
}

/// Full-resolution inputs: two key frames plus the three event voxel grids
/// (left events, reversed left events, right events), all rank-4 with
/// batch 1.
pub struct BiOFInput<'a> {
    pub i0: &'a Tensor,
    pub i1: &'a Tensor,
    pub g_0t: &'a Tensor,
    pub g_t0: &'a Tensor,
    pub g_t1: &'a Tensor,
}

/// Which cascade stages run. `EventOnly` is the ablation that stops after
/// the event-level flows (fusion and correlation refinement disabled).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CascadeMode {
    Full,
    EventOnly,
}

/// Forward-pass options; `force_mask` overrides the confidence mask with a
/// constant (test hook for the blending endpoints).
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: CascadeMode,
    pub force_mask: Option<f64>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { mode: CascadeMode::Full, force_mask: None }
    }
}

/// Per-scale bidirectional flows (t->0, t->1) at the image-flow resolution
/// of each scale, with the intermediate cascade stages kept as diagnostics.
pub struct FlowPyramids {
    /// Final per-scale flows (the correlation-refined outputs).
    pub flows: Vec<(Tensor, Tensor)>,
    /// Event-level flows delivered at image-flow resolution.
    pub event_flows: Vec<(Tensor, Tensor)>,
    /// Fused flows out of the confidence blending.
    pub fused_flows: Vec<(Tensor, Tensor)>,
    /// Confidence masks per direction; `None` at the coarsest scale where
    /// the event flow connects directly.
    pub masks: Vec<Option<(Tensor, Tensor)>>,
}

impl FlowPyramids {
    pub fn finest(&self) -> &(Tensor, Tensor) {
        self.flows.last().expect("pyramid has at least one scale")
    }
}

/// Register all parameters for the flow estimator.
pub fn init_biof_params(cfg: &PyramidConfig, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let voxel_bins = 16; // encoder input channels; fixed by the voxel grid
    for s in 0..cfg.scales {
        let ch = cfg.frame_channels(s);
        let ech = cfg.event_feat_channels(s);
        let finest = s == cfg.scales - 1;
        // encoders consume the previous (finer) level's features
        let frame_in = if finest { 3 } else { cfg.frame_channels(s + 1) };
        let evsyn_in = if finest { voxel_bins } else { cfg.frame_channels(s + 1) };
        let evflow_in = if finest { voxel_bins } else { cfg.event_feat_channels(s + 1) };
        init_conv(&mut store, rng, &format!("frame_enc.s{s}.down"), ch, frame_in, 3, false);
        init_conv(&mut store, rng, &format!("frame_enc.s{s}.ref"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("evsyn_enc.s{s}.down"), ch, evsyn_in, 3, false);
        init_conv(&mut store, rng, &format!("evsyn_enc.s{s}.ref"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("evflow_enc.s{s}.down"), ech, evflow_in, 3, false);
        init_conv(&mut store, rng, &format!("evflow_enc.s{s}.ref"), ech, ech, 3, false);

        // anchor synthesis: residual block over the concatenation of the
        // frame features, both synthesis event features and the upsampled
        // previous anchor (zeros at s=0)
        let anchor_in = 4 * ch + if s == 0 { ch } else { 2 * ch };
        init_conv(&mut store, rng, &format!("anchor.s{s}.c1"), ch, anchor_in, 3, false);
        init_conv(&mut store, rng, &format!("anchor.s{s}.c2"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("anchor.s{s}.c3"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("anchor.s{s}.sc"), ch, anchor_in, 1, false);

        // event-level flow decoder, shared across directions; each call
        // sees only its own direction's features (the reversed stream
        // already encodes backward motion, so one mapping serves both)
        init_conv(&mut store, rng, &format!("ebiof.s{s}.c1"), ech, ech + 2, 3, false);
        init_conv(&mut store, rng, &format!("ebiof.s{s}.c2"), ech, ech, 3, false);
        init_conv(&mut store, rng, &format!("ebiof.s{s}.head"), 2, ech, 3, true);

        if s > 0 {
            // fusion: feature refiners and the confidence-mask head
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_k.c1"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_k.c2"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_k.c3"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_t.c1"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_t.c2"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.ref_t.c3"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.mask.c1"), ch, 3 * ch + 4, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.mask.c2"), ch, ch, 3, false);
            init_conv(&mut store, rng, &format!("fbiof.s{s}.mask.head"), 1, ch, 3, true);
        }

        // correlation-refinement decoder, shared across directions
        let side = 2 * cfg.correlation_radius + 1;
        let corr_c = side * side;
        init_conv(&mut store, rng, &format!("ibiof.s{s}.c1"), ch, corr_c + ch + 2, 3, false);
        init_conv(&mut store, rng, &format!("ibiof.s{s}.c2"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("ibiof.s{s}.head"), 2, ch, 3, true);
    }
    store
}

/// Tape + bound parameters, with conv helpers shared by the network code.
pub(crate) struct NetCtx<'a, 'p> {
    pub tape: &'a mut Tape,
    pub params: &'p ParamTensors,
}

impl NetCtx<'_, '_> {
    pub fn conv(&mut self, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let w = self.params.try_get(&format!("{name}.w"))?;
        let b = self.params.try_get(&format!("{name}.b"))?;
        self.tape.conv2d(x, w, Some(b), stride, pad, 1)
    }

    pub fn conv_act(&mut self, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let y = self.conv(name, x, stride, pad)?;
        Ok(self.tape.leaky_relu(&y, LEAKY_SLOPE))
    }

    /// Two activated convs followed by a linear head.
    pub fn decoder3(&mut self, prefix: &str, head: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_act(&format!("{prefix}.c1"), x, 1, 1)?;
        let h = self.conv_act(&format!("{prefix}.c2"), &h, 1, 1)?;
        self.conv(&format!("{prefix}.{head}"), &h, 1, 1)
    }

    /// Three activated convs (feature refiner).
    pub fn block3(&mut self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_act(&format!("{prefix}.c1"), x, 1, 1)?;
        let h = self.conv_act(&format!("{prefix}.c2"), &h, 1, 1)?;
        self.conv_act(&format!("{prefix}.c3"), &h, 1, 1)
    }
}

/// Strided-conv feature pyramid, finest scale first in computation order;
/// returns features indexed by scale (0 = coarsest).
fn encode_pyramid(
    net: &mut NetCtx,
    prefix: &str,
    input: &Tensor,
    scales: usize,
    finest_stride: usize,
) -> Result<Vec<Tensor>> {
    let mut feats: Vec<Option<Tensor>> = vec![None; scales];
    let mut x = input.clone();
    for s in (0..scales).rev() {
        let stride = if s == scales - 1 { finest_stride } else { 2 };
        x = net.conv_act(&format!("{prefix}.s{s}.down"), &x, stride, 1)?;
        x = net.conv_act(&format!("{prefix}.s{s}.ref"), &x, 1, 1)?;
        feats[s] = Some(x.clone());
    }
    Ok(feats.into_iter().map(|f| f.unwrap()).collect())
}

/// Encoder features for both networks' flow stage.
pub(crate) struct BiOFFeatures {
    pub c0: Vec<Tensor>,
    pub c1: Vec<Tensor>,
    pub fe_t0: Vec<Tensor>,
    pub fe_t1: Vec<Tensor>,
    pub fs_left: Vec<Tensor>,
    pub fs_right: Vec<Tensor>,
}

pub(crate) fn extract_features(
    net: &mut NetCtx,
    cfg: &PyramidConfig,
    input: &BiOFInput,
) -> Result<BiOFFeatures> {
    Ok(BiOFFeatures {
        c0: encode_pyramid(net, "frame_enc", input.i0, cfg.scales, 2)?,
        c1: encode_pyramid(net, "frame_enc", input.i1, cfg.scales, 2)?,
        fe_t0: encode_pyramid(net, "evflow_enc", input.g_t0, cfg.scales, 1)?,
        fe_t1: encode_pyramid(net, "evflow_enc", input.g_t1, cfg.scales, 1)?,
        fs_left: encode_pyramid(net, "evsyn_enc", input.g_0t, cfg.scales, 2)?,
        fs_right: encode_pyramid(net, "evsyn_enc", input.g_t1, cfg.scales, 2)?,
    })
}

/// Synthesize the anchor feature for one scale from the frame features,
/// both synthesis event features and the upsampled previous anchor.
fn synthesize_anchor(
    net: &mut NetCtx,
    s: usize,
    c0: &Tensor,
    c1: &Tensor,
    fs_left: &Tensor,
    fs_right: &Tensor,
    prev: Option<&Tensor>,
) -> Result<Tensor> {
    let (h, w) = {
        let sh = c0.shape();
        (sh[2], sh[3])
    };
    let prev_up = match prev {
        Some(p) => net.tape.bilinear_resize(p, h, w)?,
        None => Tensor::zeros(&[1, c0.shape()[1], h, w]),
    };
    let cat = net.tape.concat(&[c0, c1, fs_left, fs_right, &prev_up], 1)?;
    let body = net.decoder3(&format!("anchor.s{s}"), "c3", &cat)?;
    let shortcut = net.conv(&format!("anchor.s{s}.sc"), &cat, 1, 0)?;
    net.tape.add(&body, &shortcut)
}

/// Event-only residual flow for one direction at the event-native scale.
fn ebiof_direction(net: &mut NetCtx, s: usize, feat_dir: &Tensor, base: &Tensor) -> Result<Tensor> {
    let cat = net.tape.concat(&[feat_dir, base], 1)?;
    let residual = net.decoder3(&format!("ebiof.s{s}"), "head", &cat)?;
    net.tape.add(base, &residual)
}

/// Confidence-mask fusion for one direction (Eq. blending): refine
/// features, warp by both candidate flows, estimate the mask, blend.
#[allow(clippy::too_many_arguments)]
fn fbiof_direction(
    net: &mut NetCtx,
    s: usize,
    v_img_prev: &Tensor,
    v_evt: &Tensor,
    ck_refined: &Tensor,
    ct_refined: &Tensor,
    force_mask: Option<f64>,
) -> Result<(Tensor, Tensor)> {
    let (warped_evt, _) = backward_warp(net.tape, ck_refined, v_evt)?;
    let (warped_img, _) = backward_warp(net.tape, ck_refined, v_img_prev)?;
    let mask = match force_mask {
        Some(v) => {
            let sh = v_evt.shape();
            Tensor::full(&[1, 1, sh[2], sh[3]], v)
        }
        None => {
            let cat = net
                .tape
                .concat(&[ct_refined, &warped_evt, &warped_img, v_img_prev, v_evt], 1)?;
            let logits = net.decoder3(&format!("fbiof.s{s}.mask"), "head", &cat)?;
            net.tape.sigmoid(&logits)
        }
    };
    let fused = blend_flows(net.tape, v_img_prev, v_evt, &mask)?;
    Ok((fused, mask))
}

/// Correlation-based residual refinement for one direction.
fn ibiof_direction(
    net: &mut NetCtx,
    cfg: &PyramidConfig,
    s: usize,
    v_f: &Tensor,
    c_k: &Tensor,
    c_t: &Tensor,
) -> Result<Tensor> {
    let (warped, _) = backward_warp(net.tape, c_k, v_f)?;
    let corr = local_correlation(net.tape, c_t, &warped, cfg.correlation_radius, true)?;
    let cat = net.tape.concat(&[&corr, c_t, v_f], 1)?;
    let residual = net.decoder3(&format!("ibiof.s{s}"), "head", &cat)?;
    net.tape.add(v_f, &residual)
}

/// Run the full cascade over all scales.
pub fn eif_biofnet_forward(
    tape: &mut Tape,
    cfg: &PyramidConfig,
    params: &ParamTensors,
    input: &BiOFInput,
    opts: ForwardOptions,
) -> Result<FlowPyramids> {
    let shape = input.i0.shape();
    if shape.len() != 4 {
        return Err(Error::shape("eif_biofnet", format!("expected NCHW input, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    for (name, t) in [
        ("i1", input.i1),
        ("g_0t", input.g_0t),
        ("g_t0", input.g_t0),
        ("g_t1", input.g_t1),
    ] {
        let s = t.shape();
        if s.len() != 4 || s[2] != h || s[3] != w {
            return Err(Error::shape(
                "eif_biofnet",
                format!("{name} has shape {s:?}, expected spatial {h}x{w}"),
            ));
        }
    }
    cfg.check_geometry(h, w)?;
    let mut net = NetCtx { tape, params };
    let feats = extract_features(&mut net, cfg, input)?;

    let mut flows: Vec<(Tensor, Tensor)> = Vec::with_capacity(cfg.scales);
    let mut event_flows = Vec::with_capacity(cfg.scales);
    let mut fused_flows = Vec::with_capacity(cfg.scales);
    let mut masks = Vec::with_capacity(cfg.scales);
    let mut anchor_prev: Option<Tensor> = None;
    let mut evt_native_prev: Option<(Tensor, Tensor)> = None;

    for s in 0..cfg.scales {
        // (a) anchor frame feature synthesis
        let anchor = synthesize_anchor(
            &mut net,
            s,
            &feats.c0[s],
            &feats.c1[s],
            &feats.fs_left[s],
            &feats.fs_right[s],
            anchor_prev.as_ref(),
        )?;

        // (b) event-level flows at the event-native resolution
        let (base_t0, base_t1) = match &evt_native_prev {
            Some((p0, p1)) => (rescale_flow(net.tape, p0, 2.0)?, rescale_flow(net.tape, p1, 2.0)?),
            None => {
                let eh = h / cfg.event_downsample(s);
                let ew = w / cfg.event_downsample(s);
                (Tensor::zeros(&[1, 2, eh, ew]), Tensor::zeros(&[1, 2, eh, ew]))
            }
        };
        let ve_t0_native = ebiof_direction(&mut net, s, &feats.fe_t0[s], &base_t0)?;
        let ve_t1_native = ebiof_direction(&mut net, s, &feats.fe_t1[s], &base_t1)?;
        let ve_t0 = rescale_flow(net.tape, &ve_t0_native, 0.5)?;
        let ve_t1 = rescale_flow(net.tape, &ve_t1_native, 0.5)?;

        // (c) confidence fusion with the upsampled previous image-level
        // flow; at the coarsest scale the event flow connects directly
        let fusion_inputs = if s == 0 || opts.mode == CascadeMode::EventOnly {
            None
        } else {
            let prev = &flows[s - 1];
            Some((rescale_flow(net.tape, &prev.0, 2.0)?, rescale_flow(net.tape, &prev.1, 2.0)?))
        };
        let (vf_t0, vf_t1, mask_pair) = match fusion_inputs {
            Some((vi_t0, vi_t1)) => {
                let ck0 = net.block3(&format!("fbiof.s{s}.ref_k"), &feats.c0[s])?;
                let ck1 = net.block3(&format!("fbiof.s{s}.ref_k"), &feats.c1[s])?;
                let ct = net.block3(&format!("fbiof.s{s}.ref_t"), &anchor)?;
                let (f0, m0) = fbiof_direction(&mut net, s, &vi_t0, &ve_t0, &ck0, &ct, opts.force_mask)?;
                let (f1, m1) = fbiof_direction(&mut net, s, &vi_t1, &ve_t1, &ck1, &ct, opts.force_mask)?;
                (f0, f1, Some((m0, m1)))
            }
            None => (ve_t0.clone(), ve_t1.clone(), None),
        };

        // (d) correlation refinement against the anchor features
        let (v_t0, v_t1) = if opts.mode == CascadeMode::EventOnly {
            (vf_t0.clone(), vf_t1.clone())
        } else {
            (
                ibiof_direction(&mut net, cfg, s, &vf_t0, &feats.c0[s], &anchor)?,
                ibiof_direction(&mut net, cfg, s, &vf_t1, &feats.c1[s], &anchor)?,
            )
        };

        event_flows.push((ve_t0, ve_t1));
        fused_flows.push((vf_t0, vf_t1));
        masks.push(mask_pair);
        flows.push((v_t0, v_t1));
        anchor_prev = Some(anchor);
        evt_native_prev = Some((ve_t0_native, ve_t1_native));
    }

    Ok(FlowPyramids { flows, event_flows, fused_flows, masks })
}
