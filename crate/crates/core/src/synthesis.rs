//! Interactive-attention frame synthesis.
//!
//! A coarse-to-fine decoder queries two feature families per scale through
//! channel-wise multi-head cross-attention: warp features (built from
//! backward-warped frames and features, good under large motion) and
//! synthesis features (built from unwarped frame and event features, good
//! under occlusion). The cross-covariance attention operates over the
//! channel axis, so memory stays linear in resolution; learnable scalars
//! balance the two branches, and self-attention layers refine each scale's
//! output before a sigmoid head emits the intermediate frame.

use crate::biofnet::{FlowPyramids, NetCtx};
use crate::error::{Error, Result};
use crate::flow::{backward_warp, rescale_flow};
use crate::params::{init_conv, init_norm, init_scalar, ParamStore, ParamTensors};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Synthesis-network geometry: scale `s` works at `1/downsample(s)` of the
/// input resolution (finest scale is full resolution).
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub heads: usize,
    pub alpha_init: f64,
    /// Depthwise kernel size in the q/k/v projections (3 normally; 1 makes
    /// the attention purely per-position for the equivariance tests).
    pub dw_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { scales: 3, base_channels: 16, heads: 2, alpha_init: 1.0, dw_kernel: 3 }
    }
}

impl AttentionConfig {
    pub fn micro() -> Self {
        AttentionConfig { scales: 3, base_channels: 4, heads: 1, alpha_init: 1.0, dw_kernel: 3 }
    }

    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << (self.scales - 1 - s)
    }

    pub fn downsample(&self, s: usize) -> usize {
        1 << (self.scales - 1 - s)
    }

    pub fn max_downsample(&self) -> usize {
        self.downsample(0)
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.scales {
            if self.channels(s) % self.heads != 0 {
                return Err(Error::invalid(
                    "attention_config",
                    format!("channels {} at scale {s} not divisible by heads {}", self.channels(s), self.heads),
                ));
            }
        }
        if self.dw_kernel % 2 == 0 {
            return Err(Error::invalid("attention_config", "depthwise kernel must be odd"));
        }
        Ok(())
    }
}

const PROJECTIONS: [&str; 6] = ["qs", "qw", "ks", "vs", "kw", "vw"];

/// Register all synthesis-network parameters.
pub fn init_synth_params(cfg: &AttentionConfig, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let voxel_bins = 16;
    for s in 0..cfg.scales {
        let ch = cfg.channels(s);
        let finest = s == cfg.scales - 1;
        let frame_in = if finest { 3 } else { cfg.channels(s + 1) };
        let event_in = if finest { voxel_bins } else { cfg.channels(s + 1) };
        init_conv(&mut store, rng, &format!("phi_enc.s{s}.down"), ch, frame_in, 3, false);
        init_conv(&mut store, rng, &format!("phi_enc.s{s}.ref"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("ev_enc.s{s}.down"), ch, event_in, 3, false);
        init_conv(&mut store, rng, &format!("ev_enc.s{s}.ref"), ch, ch, 3, false);

        // feature builders: warp (warped frames + warped features + events),
        // synthesis (unwarped features only), and the query input
        init_conv(&mut store, rng, &format!("warp_enc.s{s}.c1"), ch, 4 * ch + 6, 3, false);
        init_conv(&mut store, rng, &format!("warp_enc.s{s}.c2"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("syn_enc.s{s}.c1"), ch, 4 * ch, 3, false);
        init_conv(&mut store, rng, &format!("syn_enc.s{s}.c2"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("qin.s{s}.c1"), ch, 4 * ch + 6, 3, false);
        init_conv(&mut store, rng, &format!("qin.s{s}.c2"), ch, ch, 3, false);
        if s > 0 {
            // fuses the query input with the upsampled decoder state
            init_conv(&mut store, rng, &format!("query_fuse.s{s}"), ch, ch + cfg.channels(s - 1), 1, false);
        }

        for proj in PROJECTIONS {
            init_projection(&mut store, rng, &format!("attn.s{s}.{proj}"), ch, cfg.dw_kernel);
        }
        init_scalar(&mut store, &format!("attn.s{s}.log_alpha_s"), cfg.alpha_init.ln());
        init_scalar(&mut store, &format!("attn.s{s}.log_alpha_w"), cfg.alpha_init.ln());
        init_conv(&mut store, rng, &format!("attn.s{s}.fuse"), ch, 2 * ch, 1, false);

        for proj in ["q", "k", "v"] {
            init_projection(&mut store, rng, &format!("tsa.s{s}.{proj}"), ch, cfg.dw_kernel);
        }
        init_scalar(&mut store, &format!("tsa.s{s}.log_alpha"), cfg.alpha_init.ln());
        init_conv(&mut store, rng, &format!("tsa.s{s}.proj"), ch, ch, 1, false);

        init_conv(&mut store, rng, &format!("head.s{s}.c1"), ch, ch, 3, false);
        init_conv(&mut store, rng, &format!("head.s{s}.c2"), 3, ch, 3, false);
    }
    store
}

/// Layer norm + depthwise separable conv, the projection applied to every
/// attention input.
fn init_projection(store: &mut ParamStore, rng: &mut Rng, name: &str, ch: usize, dw_kernel: usize) {
    init_norm(store, &format!("{name}.ln"), ch);
    // depthwise: one k x k filter per channel
    let fan_in = (dw_kernel * dw_kernel) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let numel = ch * dw_kernel * dw_kernel;
    let mut rlocal = rng.fork();
    let w: Vec<f64> = (0..numel).map(|_| rlocal.uniform(-bound, bound)).collect();
    store.insert(format!("{name}.dw.w"), vec![ch, 1, dw_kernel, dw_kernel], w);
    store.insert(format!("{name}.dw.b"), vec![ch], vec![0.0; ch]);
    init_conv(store, rng, &format!("{name}.pw"), ch, ch, 1, false);
}

fn apply_projection(net: &mut NetCtx, name: &str, x: &Tensor, dw_kernel: usize) -> Result<Tensor> {
    let gamma = net.params.try_get(&format!("{name}.ln.g"))?;
    let beta = net.params.try_get(&format!("{name}.ln.b"))?;
    let normed = net.tape.layer_norm(x, 1, gamma, beta, 1e-5)?;
    let dw_w = net.params.try_get(&format!("{name}.dw.w"))?;
    let dw_b = net.params.try_get(&format!("{name}.dw.b"))?;
    let ch = x.shape()[1];
    let dw = net.tape.conv2d(&normed, dw_w, Some(dw_b), 1, dw_kernel / 2, ch)?;
    net.conv(&format!("{name}.pw"), &dw, 1, 0)
}

/// Channel-axis multi-head attention: reshape to `heads x C/heads x HW`,
/// form the cross-covariance matrix `Q K^T / alpha`, softmax over its last
/// axis, and apply to `V`.
fn channel_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    log_alpha: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let shape = q.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let ch = c / heads;
    let to_heads = |tape: &mut Tape, t: &Tensor| tape.reshape(t, vec![heads, ch, h * w]);
    let qh = to_heads(tape, q)?;
    let kh = to_heads(tape, k)?;
    let vh = to_heads(tape, v)?;
    let kt = tape.transpose_last2(&kh)?;
    let logits = tape.matmul(&qh, &kt)?;
    let inv_alpha = {
        let neg = tape.neg(log_alpha);
        tape.exp(&neg)
    };
    let scaled = tape.mul_scalar_tensor(&logits, &inv_alpha)?;
    let weights = tape.softmax(&scaled, 2)?;
    let out = tape.matmul(&weights, &vh)?;
    tape.reshape(&out, shape)
}

/// Dual cross-attention: one query attends to the synthesis features and
/// the warp features; the two results are fused by a pointwise conv and
/// added back to the query.
pub fn interactive_attention(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    scale: usize,
    query: &Tensor,
    feat_warp: &Tensor,
    feat_syn: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    for (name, t) in [("feat_warp", feat_warp), ("feat_syn", feat_syn)] {
        if t.shape() != query.shape() {
            return Err(Error::shape(
                "interactive_attention",
                format!("{name} {:?} vs query {:?}", t.shape(), query.shape()),
            ));
        }
    }
    let mut net = NetCtx { tape, params };
    let p = |proj: &str| format!("attn.s{scale}.{proj}");
    let q_s = apply_projection(&mut net, &p("qs"), query, cfg.dw_kernel)?;
    let q_w = apply_projection(&mut net, &p("qw"), query, cfg.dw_kernel)?;
    let k_s = apply_projection(&mut net, &p("ks"), feat_syn, cfg.dw_kernel)?;
    let v_s = apply_projection(&mut net, &p("vs"), feat_syn, cfg.dw_kernel)?;
    let k_w = apply_projection(&mut net, &p("kw"), feat_warp, cfg.dw_kernel)?;
    let v_w = apply_projection(&mut net, &p("vw"), feat_warp, cfg.dw_kernel)?;
    let alpha_s = params.try_get(&format!("attn.s{scale}.log_alpha_s"))?;
    let alpha_w = params.try_get(&format!("attn.s{scale}.log_alpha_w"))?;
    let attn_s = channel_attention(net.tape, &q_s, &k_s, &v_s, alpha_s, cfg.heads)?;
    let attn_w = channel_attention(net.tape, &q_w, &k_w, &v_w, alpha_w, cfg.heads)?;
    let cat = net.tape.concat(&[&attn_s, &attn_w], 1)?;
    let fused = net.conv(&format!("attn.s{scale}.fuse"), &cat, 1, 0)?;
    net.tape.add(query, &fused)
}

/// Self-attention refinement: q, k, v all projected from the input, with a
/// residual pointwise projection.
pub fn self_attention_refine(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    scale: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let mut net = NetCtx { tape, params };
    let q = apply_projection(&mut net, &format!("tsa.s{scale}.q"), x, cfg.dw_kernel)?;
    let k = apply_projection(&mut net, &format!("tsa.s{scale}.k"), x, cfg.dw_kernel)?;
    let v = apply_projection(&mut net, &format!("tsa.s{scale}.v"), x, cfg.dw_kernel)?;
    let alpha = params.try_get(&format!("tsa.s{scale}.log_alpha"))?;
    let attn = channel_attention(net.tape, &q, &k, &v, alpha, cfg.heads)?;
    let proj = net.conv(&format!("tsa.s{scale}.proj"), &attn, 1, 0)?;
    net.tape.add(x, &proj)
}

/// Per-scale feature pyramids feeding the decoder.
pub struct SynthFeatures {
    pub phi0: Vec<Tensor>,
    pub phi1: Vec<Tensor>,
    pub ev_left: Vec<Tensor>,
    pub ev_right: Vec<Tensor>,
    /// Input frames area-averaged to each scale.
    pub frames: Vec<(Tensor, Tensor)>,
    /// Flows rescaled to each scale's resolution.
    pub flows: Vec<(Tensor, Tensor)>,
}

/// Warp features and the warped frames they were built from.
pub struct WarpFeatures {
    pub feats: Vec<Tensor>,
    pub warped_frames: Vec<(Tensor, Tensor)>,
}

fn encode_pyramid(
    net: &mut NetCtx,
    prefix: &str,
    input: &Tensor,
    scales: usize,
) -> Result<Vec<Tensor>> {
    let mut feats: Vec<Option<Tensor>> = vec![None; scales];
    let mut x = input.clone();
    for s in (0..scales).rev() {
        let stride = if s == scales - 1 { 1 } else { 2 };
        x = net.conv_act(&format!("{prefix}.s{s}.down"), &x, stride, 1)?;
        x = net.conv_act(&format!("{prefix}.s{s}.ref"), &x, 1, 1)?;
        feats[s] = Some(x.clone());
    }
    Ok(feats.into_iter().map(|f| f.unwrap()).collect())
}

/// Encode frames/events and rescale the flow pyramid onto the synthesis
/// scales.
pub fn build_scale_inputs(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    i0: &Tensor,
    i1: &Tensor,
    g_0t: &Tensor,
    g_t1: &Tensor,
    flows: &FlowPyramids,
) -> Result<SynthFeatures> {
    if flows.flows.len() != cfg.scales {
        return Err(Error::shape(
            "synthesis",
            format!("flow pyramid has {} scales, config expects {}", flows.flows.len(), cfg.scales),
        ));
    }
    let mut net = NetCtx { tape, params };
    let phi0 = encode_pyramid(&mut net, "phi_enc", i0, cfg.scales)?;
    let phi1 = encode_pyramid(&mut net, "phi_enc", i1, cfg.scales)?;
    let ev_left = encode_pyramid(&mut net, "ev_enc", g_0t, cfg.scales)?;
    let ev_right = encode_pyramid(&mut net, "ev_enc", g_t1, cfg.scales)?;
    let mut frames = Vec::with_capacity(cfg.scales);
    let mut scaled_flows = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        let factor = cfg.downsample(s);
        let f0 = net.tape.avg_pool2d(i0, factor)?;
        let f1 = net.tape.avg_pool2d(i1, factor)?;
        // flow scale s sits at half the synthesis resolution of scale s
        let (v0, v1) = &flows.flows[s];
        let v0 = rescale_flow(net.tape, v0, 2.0)?;
        let v1 = rescale_flow(net.tape, v1, 2.0)?;
        let expect = f0.shape()[2];
        if v0.shape()[2] != expect {
            return Err(Error::shape(
                "synthesis",
                format!("flow at scale {s} is {:?}, expected spatial {expect}", v0.shape()),
            ));
        }
        frames.push((f0, f1));
        scaled_flows.push((v0, v1));
    }
    Ok(SynthFeatures { phi0, phi1, ev_left, ev_right, frames, flows: scaled_flows })
}

/// Warp features per scale: backward-warp the downscaled frames and frame
/// features by both flows, concatenate with the event features, encode.
pub fn build_warp_features(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    feats: &SynthFeatures,
) -> Result<WarpFeatures> {
    let mut out = Vec::with_capacity(cfg.scales);
    let mut warped_frames = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        let (v0, v1) = &feats.flows[s];
        let (f0, f1) = &feats.frames[s];
        let (wf0, _) = backward_warp(tape, f0, v0)?;
        let (wf1, _) = backward_warp(tape, f1, v1)?;
        let (wp0, _) = backward_warp(tape, &feats.phi0[s], v0)?;
        let (wp1, _) = backward_warp(tape, &feats.phi1[s], v1)?;
        let cat = tape.concat(&[&wf0, &wf1, &wp0, &wp1, &feats.ev_left[s], &feats.ev_right[s]], 1)?;
        let mut net = NetCtx { tape, params };
        let h = net.conv_act(&format!("warp_enc.s{s}.c1"), &cat, 1, 1)?;
        let h = net.conv_act(&format!("warp_enc.s{s}.c2"), &h, 1, 1)?;
        out.push(h);
        warped_frames.push((wf0, wf1));
    }
    Ok(WarpFeatures { feats: out, warped_frames })
}

/// Synthesis features per scale: unwarped frame and event features only —
/// no dataflow edge from the flows.
pub fn build_synthesis_features(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    feats: &SynthFeatures,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(cfg.scales);
    for s in 0..cfg.scales {
        let cat = tape.concat(
            &[&feats.phi0[s], &feats.phi1[s], &feats.ev_left[s], &feats.ev_right[s]],
            1,
        )?;
        let mut net = NetCtx { tape, params };
        let h = net.conv_act(&format!("syn_enc.s{s}.c1"), &cat, 1, 1)?;
        let h = net.conv_act(&format!("syn_enc.s{s}.c2"), &h, 1, 1)?;
        out.push(h);
    }
    Ok(out)
}

/// Full synthesis pass: multi-scale intermediate frames in `[0, 1]`,
/// coarsest first; the last entry is the full-resolution prediction.
pub fn synthesis_forward(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    params: &ParamTensors,
    i0: &Tensor,
    i1: &Tensor,
    g_0t: &Tensor,
    g_t1: &Tensor,
    flows: &FlowPyramids,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let shape = i0.shape();
    if shape.len() != 4 {
        return Err(Error::shape("synthesis", format!("expected NCHW input, got {shape:?}")));
    }
    let d = cfg.max_downsample();
    if shape[2] % d != 0 || shape[3] % d != 0 {
        return Err(Error::shape(
            "synthesis",
            format!("input {}x{} not divisible by pyramid downsample {d}", shape[2], shape[3]),
        ));
    }
    let feats = build_scale_inputs(tape, cfg, params, i0, i1, g_0t, g_t1, flows)?;
    let warp = build_warp_features(tape, cfg, params, &feats)?;
    let syn = build_synthesis_features(tape, cfg, params, &feats)?;

    let mut outputs = Vec::with_capacity(cfg.scales);
    let mut state: Option<Tensor> = None;
    for s in 0..cfg.scales {
        let (wf0, wf1) = &warp.warped_frames[s];
        let q_cat = tape.concat(
            &[&feats.phi0[s], &feats.phi1[s], &feats.ev_left[s], &feats.ev_right[s], wf0, wf1],
            1,
        )?;
        let mut net = NetCtx { tape, params };
        let q_in = net.conv_act(&format!("qin.s{s}.c1"), &q_cat, 1, 1)?;
        let q_in = net.conv_act(&format!("qin.s{s}.c2"), &q_in, 1, 1)?;
        let query = match &state {
            None => q_in,
            Some(prev) => {
                let (h, w) = (q_in.shape()[2], q_in.shape()[3]);
                let up = net.tape.bilinear_resize(prev, h, w)?;
                let cat = net.tape.concat(&[&q_in, &up], 1)?;
                net.conv(&format!("query_fuse.s{s}"), &cat, 1, 0)?
            }
        };
        let x = interactive_attention(tape, cfg, params, s, &query, &warp.feats[s], &syn[s])?;
        let x = self_attention_refine(tape, cfg, params, s, &x)?;
        let mut net = NetCtx { tape, params };
        let h = net.conv_act(&format!("head.s{s}.c1"), &x, 1, 1)?;
        let logits = net.conv(&format!("head.s{s}.c2"), &h, 1, 1)?;
        outputs.push(tape.sigmoid(&logits));
        state = Some(x);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biofnet::{
        eif_biofnet_forward, init_biof_params, BiOFInput, ForwardOptions, PyramidConfig,
    };

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..numel).map(|_| rng.uniform(-0.5, 0.5)).collect())
    }

    fn zero_flow_pyramid(cfg: &AttentionConfig, h: usize, w: usize) -> FlowPyramids {
        let flows: Vec<(Tensor, Tensor)> = (0..cfg.scales)
            .map(|s| {
                let d = 2 * cfg.downsample(s);
                (Tensor::zeros(&[1, 2, h / d, w / d]), Tensor::zeros(&[1, 2, h / d, w / d]))
            })
            .collect();
        FlowPyramids {
            event_flows: flows.clone(),
            fused_flows: flows.clone(),
            masks: (0..cfg.scales).map(|_| None).collect(),
            flows,
        }
    }

    fn toy_inputs(rng: &mut Rng, h: usize, w: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        (
            rand_tensor(&[1, 3, h, w], rng),
            rand_tensor(&[1, 3, h, w], rng),
            rand_tensor(&[1, 16, h, w], rng),
            rand_tensor(&[1, 16, h, w], rng),
        )
    }

    #[test]
    fn attention_preserves_shape_and_zero_fuse_is_identity() {
        let cfg = AttentionConfig { scales: 1, base_channels: 8, heads: 2, alpha_init: 1.0, dw_kernel: 3 };
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        for proj in PROJECTIONS {
            init_projection(&mut store, &mut rng, &format!("attn.s0.{proj}"), 8, 3);
        }
        init_scalar(&mut store, "attn.s0.log_alpha_s", 0.0);
        init_scalar(&mut store, "attn.s0.log_alpha_w", 0.0);
        init_conv(&mut store, &mut rng, "attn.s0.fuse", 8, 16, 1, false);
        let q = rand_tensor(&[1, 8, 5, 6], &mut rng);
        let fw = rand_tensor(&[1, 8, 5, 6], &mut rng);
        let fs = rand_tensor(&[1, 8, 5, 6], &mut rng);
        {
            let params = store.bind_frozen();
            let mut tape = Tape::no_grad();
            let x = interactive_attention(&mut tape, &cfg, &params, 0, &q, &fw, &fs).unwrap();
            assert_eq!(x.shape(), q.shape());
        }
        store.zero_matching(|n| n.starts_with("attn.s0.fuse"));
        let params = store.bind_frozen();
        let mut tape = Tape::no_grad();
        let x = interactive_attention(&mut tape, &cfg, &params, 0, &q, &fw, &fs).unwrap();
        assert_eq!(x.data(), q.data());
    }

    #[test]
    fn self_attention_zero_projection_is_identity() {
        let cfg = AttentionConfig { scales: 1, base_channels: 8, heads: 2, alpha_init: 1.0, dw_kernel: 3 };
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        for proj in ["q", "k", "v"] {
            init_projection(&mut store, &mut rng, &format!("tsa.s0.{proj}"), 8, 3);
        }
        init_scalar(&mut store, "tsa.s0.log_alpha", 0.0);
        init_conv(&mut store, &mut rng, "tsa.s0.proj", 8, 8, 1, false);
        store.zero_matching(|n| n.starts_with("tsa.s0.proj"));
        let params = store.bind_frozen();
        let x = rand_tensor(&[1, 8, 4, 4], &mut rng);
        let mut tape = Tape::no_grad();
        let y = self_attention_refine(&mut tape, &cfg, &params, 0, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn attention_is_permutation_equivariant_with_pointwise_projections() {
        // with 1x1 depthwise kernels every stage is per-position, and the
        // channel-axis attention weights are permutation-invariant sums
        // over positions, so permuting all inputs permutes the output
        let cfg = AttentionConfig { scales: 1, base_channels: 8, heads: 2, alpha_init: 1.0, dw_kernel: 1 };
        let mut rng = Rng::new(7);
        let mut store = ParamStore::new();
        for proj in PROJECTIONS {
            init_projection(&mut store, &mut rng, &format!("attn.s0.{proj}"), 8, 1);
        }
        init_scalar(&mut store, "attn.s0.log_alpha_s", 0.3);
        init_scalar(&mut store, "attn.s0.log_alpha_w", -0.2);
        init_conv(&mut store, &mut rng, "attn.s0.fuse", 8, 16, 1, false);
        let params = store.bind_frozen();
        let (h, w) = (3, 4);
        let q = rand_tensor(&[1, 8, h, w], &mut rng);
        let fw = rand_tensor(&[1, 8, h, w], &mut rng);
        let fs = rand_tensor(&[1, 8, h, w], &mut rng);
        // a fixed permutation of the hw positions
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permute = |t: &Tensor| -> Tensor {
            let mut data = vec![0.0; t.numel()];
            for c in 0..8 {
                for (dst, &src) in perm.iter().enumerate() {
                    data[c * h * w + dst] = t.data()[c * h * w + src];
                }
            }
            Tensor::from_vec(t.shape().to_vec(), data)
        };
        let mut tape = Tape::no_grad();
        let x = interactive_attention(&mut tape, &cfg, &params, 0, &q, &fw, &fs).unwrap();
        let xp = interactive_attention(
            &mut tape,
            &cfg,
            &params,
            0,
            &permute(&q),
            &permute(&fw),
            &permute(&fs),
        )
        .unwrap();
        let expected = permute(&x);
        for (a, b) in xp.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn synthesis_output_scales_and_range() {
        let cfg = AttentionConfig::default();
        let mut rng = Rng::new(11);
        let store = init_synth_params(&cfg, &mut rng);
        let params = store.bind_frozen();
        let (i0, i1, g0t, gt1) = toy_inputs(&mut rng, 64, 64);
        let flows = zero_flow_pyramid(&cfg, 64, 64);
        let mut tape = Tape::no_grad();
        let outs = synthesis_forward(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, &flows).unwrap();
        let sizes: Vec<(usize, usize)> = outs.iter().map(|o| (o.shape()[2], o.shape()[3])).collect();
        assert_eq!(sizes, vec![(16, 16), (32, 32), (64, 64)]);
        for o in &outs {
            assert_eq!(o.shape()[1], 3);
            assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synthesis_features_ignore_flows() {
        let cfg = AttentionConfig::micro();
        let mut rng = Rng::new(13);
        let store = init_synth_params(&cfg, &mut rng);
        let params = store.bind_frozen();
        let (i0, i1, g0t, gt1) = toy_inputs(&mut rng, 16, 16);
        let zero = zero_flow_pyramid(&cfg, 16, 16);
        let mut shaken = zero_flow_pyramid(&cfg, 16, 16);
        for (v0, v1) in &mut shaken.flows {
            let bump = |t: &Tensor| {
                Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|v| v + 1.5).collect())
            };
            *v0 = bump(v0);
            *v1 = bump(v1);
        }
        let run = |flows: &FlowPyramids| -> Vec<Tensor> {
            let mut tape = Tape::no_grad();
            let feats =
                build_scale_inputs(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, flows).unwrap();
            build_synthesis_features(&mut tape, &cfg, &params, &feats).unwrap()
        };
        for (a, b) in run(&zero).iter().zip(run(&shaken)) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn warped_frames_equal_downscaled_inputs_under_zero_flow() {
        let cfg = AttentionConfig::micro();
        let mut rng = Rng::new(17);
        let store = init_synth_params(&cfg, &mut rng);
        let params = store.bind_frozen();
        let (i0, i1, g0t, gt1) = toy_inputs(&mut rng, 16, 16);
        let flows = zero_flow_pyramid(&cfg, 16, 16);
        let mut tape = Tape::no_grad();
        let feats =
            build_scale_inputs(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, &flows).unwrap();
        let warp = build_warp_features(&mut tape, &cfg, &params, &feats).unwrap();
        for s in 0..cfg.scales {
            assert_eq!(warp.warped_frames[s].0.data(), feats.frames[s].0.data());
            assert_eq!(warp.warped_frames[s].1.data(), feats.frames[s].1.data());
        }
    }

    #[test]
    fn alphas_receive_gradient_and_flows_are_differentiable() {
        let cfg = AttentionConfig::micro();
        let mut rng = Rng::new(19);
        let store = init_synth_params(&cfg, &mut rng);
        let (i0, i1, g0t, gt1) = toy_inputs(&mut rng, 8, 8);
        let mut flow_leaves = Vec::new();
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let flows = {
            let mut pyr = zero_flow_pyramid(&cfg, 8, 8);
            // make the flows leaves so the gradient pathway is observable
            pyr.flows = pyr
                .flows
                .iter()
                .map(|(a, b)| {
                    let la = tape.leaf(a);
                    let lb = tape.leaf(b);
                    flow_leaves.push((la.clone(), lb.clone()));
                    (la, lb)
                })
                .collect();
            pyr
        };
        let outs = synthesis_forward(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, &flows).unwrap();
        let mut rng2 = Rng::new(23);
        let probe = rand_tensor(outs[2].shape(), &mut rng2);
        let weighted = tape.mul(&outs[2], &probe).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for s in 0..cfg.scales {
            for name in [format!("attn.s{s}.log_alpha_s"), format!("attn.s{s}.log_alpha_w")] {
                let g = grads.get(params.get(&name));
                // coarser-scale alphas feed the finest output through the
                // decoder state, so all of them should see gradient
                assert!(g.is_some(), "{name} received no gradient");
                assert!(g.unwrap()[0].abs() > 0.0, "{name} gradient is zero");
            }
        }
        // gradient reaches the finest-scale flow inputs through the warps
        let (f0, f1) = &flow_leaves[cfg.scales - 1];
        assert!(grads.get(f0).is_some());
        assert!(grads.get(f1).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn synthesis_gradcheck_micro() {
        // end-to-end synthesis loss vs central differences on sampled
        // parameters, 8x8 with micro channels
        let cfg = AttentionConfig::micro();
        let mut rng = Rng::new(29);
        let store = init_synth_params(&cfg, &mut rng);
        let (i0, i1, g0t, gt1) = toy_inputs(&mut rng, 8, 8);
        let flow_cfg = PyramidConfig::micro();
        let mut frng = Rng::new(31);
        let mut flow_store = init_biof_params(&flow_cfg, &mut frng);
        for name in flow_store.names().cloned().collect::<Vec<_>>() {
            if name.contains("head") {
                let mut r = Rng::new(37);
                if let Some(p) = flow_store.get_mut(&name) {
                    p.data.iter_mut().for_each(|v| *v = r.uniform(-0.2, 0.2));
                }
            }
        }
        let mut drng = Rng::new(41);
        let gt = Tensor::from_vec(vec![1, 3, 8, 8], (0..192).map(|_| drng.unit()).collect());
        let g_t0 = rand_tensor(&[1, 16, 8, 8], &mut drng);

        let loss_of = |store: &ParamStore, grad: bool| -> (f64, Option<std::collections::BTreeMap<String, Vec<f64>>>) {
            let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
            let params = if grad { store.bind(&mut tape) } else { store.bind_frozen() };
            let flow_params = flow_store.bind_frozen();
            let input = BiOFInput { i0: &i0, i1: &i1, g_0t: &g0t, g_t0: &g_t0, g_t1: &gt1 };
            let flows =
                eif_biofnet_forward(&mut tape, &flow_cfg, &flow_params, &input, ForwardOptions::default())
                    .unwrap();
            let outs =
                synthesis_forward(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, &flows).unwrap();
            let diff = tape.sub(&outs[2], &gt).unwrap();
            let loss = crate::flow::charbonnier(&mut tape, &diff, 1e-3, 0.5).unwrap();
            let v = loss.item();
            if grad {
                let grads = tape.backward(&loss).unwrap();
                (v, Some(params.gradients(&grads)))
            } else {
                (v, None)
            }
        };
        let (_, grads) = loss_of(&store, true);
        let grads = grads.unwrap();
        let mut srng = Rng::new(43);
        let eps = 1e-6;
        let mut checked = 0;
        for name in store.names().cloned().collect::<Vec<String>>() {
            let len = store.get(&name).unwrap().data.len();
            let picks = (len / 100).max(1).min(2);
            for _ in 0..picks {
                let j = srng.below(len);
                let mut plus = store.clone();
                plus.get_mut(&name).unwrap().data[j] += eps;
                let mut minus = store.clone();
                minus.get_mut(&name).unwrap().data[j] -= eps;
                let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * eps);
                let analytic = grads[&name][j];
                let diff = (analytic - numeric).abs();
                let allowed = (1e-3 * analytic.abs().max(numeric.abs())).max(1e-6);
                assert!(diff <= allowed, "{name}[{j}]: analytic {analytic} vs numeric {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 80, "sampled too few coordinates: {checked}");
    }
}
