//! The finite-difference battery behind `gradcheck`: every differentiable
//! primitive against central differences on seeded micro instances, plus
//! sampled-parameter checks of both full networks.

use std::collections::BTreeMap;

use crate::biofnet::{
    eif_biofnet_forward, init_biof_params, BiOFInput, ForwardOptions, PyramidConfig,
};
use crate::error::Result;
use crate::flow::{
    backward_warp, blend_flows, charbonnier, edge_aware_smoothness, flow_loss, local_correlation,
};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::synthesis::{
    init_synth_params, interactive_attention, self_attention_refine, synthesis_forward,
    AttentionConfig,
};
use crate::tensor::{grad_check, Tape, Tensor};

/// One row of the gradcheck report.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    fn new(name: &'static str, err: f64, tol: f64) -> GradReport {
        GradReport { name, max_rel_err: err, tolerance: tol, pass: err < tol }
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..numel).map(|_| rng.uniform(lo, hi)).collect())
}

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

/// Run the whole battery; deterministic for a given seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();

    {
        let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b = rand_tensor(&[3], -0.2, 0.2, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1, 1)?;
                let sq = tape.mul(&y, &y)?;
                tape.mean_all(&sq)
            },
            &[x, w, b],
            EPS,
        )?;
        rows.push(GradReport::new("conv2d", err, PRIMITIVE_TOL));
    }
    {
        let x = rand_tensor(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[4, 2, 3, 3], -0.5, 0.5, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], None, 2, 1, 2)?;
                let sq = tape.mul(&y, &y)?;
                tape.mean_all(&sq)
            },
            &[x, w],
            EPS,
        )?;
        rows.push(GradReport::new("conv2d_strided_grouped", err, PRIMITIVE_TOL));
    }
    {
        let x = rand_tensor(&[2, 6], -1.0, 1.0, &mut rng);
        let g = rand_tensor(&[6], 0.5, 1.5, &mut rng);
        let b = rand_tensor(&[6], -0.3, 0.3, &mut rng);
        let probe = rand_tensor(&[2, 6], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.layer_norm(&xs[0], 1, &xs[1], &xs[2], 1e-5)?;
                let p = tape.mul(&y, &xs[3])?;
                tape.sum_all(&p)
            },
            &[x, g, b, probe],
            EPS,
        )?;
        rows.push(GradReport::new("layer_norm", err, PRIMITIVE_TOL));
    }
    {
        let x = rand_tensor(&[3, 5], -2.0, 2.0, &mut rng);
        let probe = rand_tensor(&[3, 5], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.softmax(&xs[0], 1)?;
                let p = tape.mul(&y, &xs[1])?;
                tape.sum_all(&p)
            },
            &[x, probe],
            EPS,
        )?;
        rows.push(GradReport::new("softmax", err, PRIMITIVE_TOL));
    }
    {
        let a = rand_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[1, 4, 2], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.matmul(&xs[0], &xs[1])?;
                let sq = tape.mul(&y, &y)?;
                tape.mean_all(&sq)
            },
            &[a, b],
            EPS,
        )?;
        rows.push(GradReport::new("matmul", err, PRIMITIVE_TOL));
    }
    {
        let x = rand_tensor(&[1, 2, 4, 5], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let y = tape.bilinear_resize(&xs[0], 7, 9)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x],
            EPS,
        )?;
        rows.push(GradReport::new("bilinear_resize", err, PRIMITIVE_TOL));
    }
    {
        let src = rand_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let flow = rand_tensor(&[2, 6, 6], -0.9, 0.9, &mut rng);
        let probe = rand_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let (w, _) = backward_warp(tape, &xs[0], &xs[1])?;
                let p = tape.mul(&w, &xs[2])?;
                tape.sum_all(&p)
            },
            &[src, flow, probe],
            EPS,
        )?;
        rows.push(GradReport::new("backward_warp", err, PRIMITIVE_TOL));
    }
    {
        let x = rand_tensor(&[2, 4, 4], -1.5, 1.5, &mut rng);
        let err = grad_check(|tape, xs| charbonnier(tape, &xs[0], 1e-3, 0.5), &[x], EPS)?;
        rows.push(GradReport::new("charbonnier", err, PRIMITIVE_TOL));
    }
    {
        let flow = rand_tensor(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let img = rand_tensor(&[1, 5, 5], 0.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| edge_aware_smoothness(tape, &xs[0], &xs[1]),
            &[flow, img],
            EPS,
        )?;
        rows.push(GradReport::new("edge_aware_smoothness", err, PRIMITIVE_TOL));
    }
    {
        let a = rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[9, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let c = local_correlation(tape, &xs[0], &xs[1], 1, true)?;
                let p = tape.mul(&c, &xs[2])?;
                tape.sum_all(&p)
            },
            &[a, b, probe],
            EPS,
        )?;
        rows.push(GradReport::new("local_correlation", err, PRIMITIVE_TOL));
    }
    {
        let v_img = rand_tensor(&[2, 4, 4], -2.0, 2.0, &mut rng);
        let v_evt = rand_tensor(&[2, 4, 4], -2.0, 2.0, &mut rng);
        let mask = rand_tensor(&[1, 4, 4], 0.05, 0.95, &mut rng);
        let probe = rand_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let f = blend_flows(tape, &xs[0], &xs[1], &xs[2])?;
                let p = tape.mul(&f, &xs[3])?;
                tape.sum_all(&p)
            },
            &[v_img, v_evt, mask, probe],
            EPS,
        )?;
        rows.push(GradReport::new("blend_flows", err, PRIMITIVE_TOL));
    }
    {
        let cfg = AttentionConfig { scales: 1, base_channels: 8, heads: 2, alpha_init: 1.0, dw_kernel: 3 };
        let store = attention_only_store(&cfg, &mut rng);
        let q = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let fw = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let fs = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let params = store.bind_frozen();
                let x = interactive_attention(tape, &cfg, &params, 0, &xs[0], &xs[1], &xs[2])?;
                let p = tape.mul(&x, &xs[3])?;
                tape.sum_all(&p)
            },
            &[q, fw, fs, probe],
            EPS,
        )?;
        rows.push(GradReport::new("interactive_attention", err, PRIMITIVE_TOL));
    }
    {
        let cfg = AttentionConfig { scales: 1, base_channels: 8, heads: 2, alpha_init: 1.0, dw_kernel: 3 };
        let store = attention_only_store(&cfg, &mut rng);
        let x = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, xs| {
                let params = store.bind_frozen();
                let y = self_attention_refine(tape, &cfg, &params, 0, &xs[0])?;
                let p = tape.mul(&y, &xs[1])?;
                tape.sum_all(&p)
            },
            &[x, probe],
            EPS,
        )?;
        rows.push(GradReport::new("self_attention_refine", err, PRIMITIVE_TOL));
    }

    rows.push(eif_composite_report(&mut rng)?);
    rows.push(synthesis_composite_report(&mut rng)?);
    Ok(rows)
}

/// Parameters for a single standalone attention block (both cross and
/// self), used by the primitive-level checks.
fn attention_only_store(cfg: &AttentionConfig, rng: &mut Rng) -> ParamStore {
    let mut full = init_synth_params(cfg, rng);
    let mut store = ParamStore::new();
    let keep: Vec<String> = full
        .names()
        .filter(|n| n.starts_with("attn.s0.") || n.starts_with("tsa.s0."))
        .cloned()
        .collect();
    for name in keep {
        let p = full.get_mut(&name).unwrap().clone();
        store.insert(name, p.shape, p.data);
    }
    store
}

struct SampledCheck {
    max_violation: f64,
}

/// Sampled-parameter central differences with an absolute noise floor:
/// a coordinate passes when `|analytic - numeric| <= max(1e-6,
/// tol * max(|analytic|, |numeric|))` for at least one probe step size.
/// The retry at a smaller step resolves coordinates whose probe interval
/// straddles an activation kink; a wrong backward rule fails at every
/// step size. Reported as the worst ratio of difference to allowance.
fn sampled_param_check(
    store: &ParamStore,
    mut loss_of: impl FnMut(&ParamStore, bool) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)>,
    tol: f64,
    rng: &mut Rng,
) -> Result<SampledCheck> {
    let (_, grads) = loss_of(store, true)?;
    let grads = grads.expect("gradient pass");
    let mut worst = 0.0f64;
    for name in store.names().cloned().collect::<Vec<String>>() {
        let len = store.get(&name)?.data.len();
        let picks = (len / 100).max(1).min(2);
        for _ in 0..picks {
            let j = rng.below(len);
            let analytic = grads[&name][j];
            let mut best = f64::INFINITY;
            for eps in [1e-6, 2.5e-7] {
                let mut plus = store.clone();
                plus.get_mut(&name).unwrap().data[j] += eps;
                let mut minus = store.clone();
                minus.get_mut(&name).unwrap().data[j] -= eps;
                let numeric = (loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * eps);
                let allowance = (tol * analytic.abs().max(numeric.abs())).max(1e-6);
                best = best.min((analytic - numeric).abs() / allowance);
                if best < 1.0 {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(SampledCheck { max_violation: worst })
}

fn eif_composite_report(rng: &mut Rng) -> Result<GradReport> {
    let cfg = PyramidConfig::micro();
    let mut store = init_biof_params(&cfg, rng);
    for name in store.names().cloned().collect::<Vec<_>>() {
        if name.contains("head") {
            let mut r = rng.fork();
            if let Some(p) = store.get_mut(&name) {
                p.data.iter_mut().for_each(|v| *v = r.uniform(-0.15, 0.15));
            }
        }
    }
    let i0 = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, rng);
    let i1 = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, rng);
    let g0t = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt0 = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt1 = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt_frame = rand_tensor(&[1, 3, 4, 4], 0.0, 1.0, rng);
    let mut tape0 = Tape::no_grad();
    let i0_small = tape0.avg_pool2d(&i0, 2)?;
    let i1_small = tape0.avg_pool2d(&i1, 2)?;

    let loss_of = |s: &ParamStore, grad: bool| -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let params = if grad { s.bind(&mut tape) } else { s.bind_frozen() };
        let input = BiOFInput { i0: &i0, i1: &i1, g_0t: &g0t, g_t0: &gt0, g_t1: &gt1 };
        let out = eif_biofnet_forward(&mut tape, &cfg, &params, &input, ForwardOptions::default())?;
        let (v0, v1) = out.finest();
        let loss = flow_loss(&mut tape, &gt_frame, &i0_small, &i1_small, v0, v1, 1.0, 10.0)?;
        let value = loss.item();
        if grad {
            let grads = tape.backward(&loss)?;
            Ok((value, Some(params.gradients(&grads))))
        } else {
            Ok((value, None))
        }
    };
    let check = sampled_param_check(&store, loss_of, COMPOSITE_TOL, rng)?;
    Ok(GradReport::new(
        "eif_biofnet_composite",
        check.max_violation * COMPOSITE_TOL,
        COMPOSITE_TOL,
    ))
}

fn synthesis_composite_report(rng: &mut Rng) -> Result<GradReport> {
    let flow_cfg = PyramidConfig::micro();
    let mut flow_store = init_biof_params(&flow_cfg, rng);
    for name in flow_store.names().cloned().collect::<Vec<_>>() {
        if name.contains("head") {
            let mut r = rng.fork();
            if let Some(p) = flow_store.get_mut(&name) {
                p.data.iter_mut().for_each(|v| *v = r.uniform(-0.15, 0.15));
            }
        }
    }
    let cfg = AttentionConfig::micro();
    let store = init_synth_params(&cfg, rng);
    let i0 = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, rng);
    let i1 = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, rng);
    let g0t = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt0 = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt1 = rand_tensor(&[1, 16, 8, 8], -0.5, 0.5, rng);
    let gt_frame = rand_tensor(&[1, 3, 8, 8], 0.0, 1.0, rng);

    let loss_of = |s: &ParamStore, grad: bool| -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let params = if grad { s.bind(&mut tape) } else { s.bind_frozen() };
        let frozen = flow_store.bind_frozen();
        let input = BiOFInput { i0: &i0, i1: &i1, g_0t: &g0t, g_t0: &gt0, g_t1: &gt1 };
        let flows = eif_biofnet_forward(&mut tape, &flow_cfg, &frozen, &input, ForwardOptions::default())?;
        let outs = synthesis_forward(&mut tape, &cfg, &params, &i0, &i1, &g0t, &gt1, &flows)?;
        let diff = tape.sub(&outs[2], &gt_frame)?;
        let loss = charbonnier(&mut tape, &diff, 1e-3, 0.5)?;
        let value = loss.item();
        if grad {
            let grads = tape.backward(&loss)?;
            Ok((value, Some(params.gradients(&grads))))
        } else {
            Ok((value, None))
        }
    };
    let check = sampled_param_check(&store, loss_of, COMPOSITE_TOL, rng)?;
    Ok(GradReport::new(
        "synthesis_composite",
        check.max_violation * COMPOSITE_TOL,
        COMPOSITE_TOL,
    ))
}
