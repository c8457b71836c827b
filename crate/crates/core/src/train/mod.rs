//! Two-stage training on synthetic toy sequences, plus the evaluation
//! protocol: stage one trains the flow estimator against the photometric +
//! smoothness objective; stage two freezes it and trains the synthesis
//! network with the multi-scale robust loss.

pub mod adamw;
pub mod eval;
pub mod metrics;

pub use adamw::AdamW;
pub use eval::{evaluate_epe, skip_eval, MetricRow};

use crate::biofnet::{
    eif_biofnet_forward, init_biof_params, BiOFInput, ForwardOptions, PyramidConfig,
};
use crate::error::{Error, Result};
use crate::event::{simulate_sequence_events, split_events, EventStream};
use crate::flow::{flow_loss, charbonnier, rescale_flow, FlowField, Frame, CHARBONNIER_ALPHA, CHARBONNIER_EPS};
use crate::io::{DatasetKind, RunConfig};
use crate::params::ParamStore;
use crate::pipeline::voxel_inputs;
use crate::rng::Rng;
use crate::synthesis::{init_synth_params, synthesis_forward, AttentionConfig};
use crate::tensor::{Tape, Tensor};

pub const FRAME_INTERVAL_US: u64 = 10_000;
pub const EVENT_SUBSTEPS_PER_INTERVAL: usize = 8;

/// Hyper-parameters for one training stage. The per-scale loss weights put
/// weight 1 on the full-resolution scale (index 2) and 0.1 on the coarser
/// ones.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_scales: [f64; 3],
    pub crop: usize,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> TrainConfig {
        TrainConfig {
            stage: cfg.stage,
            steps: cfg.steps,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay_every: cfg.decay_interval(),
            seed: cfg.seed,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda_scales: [0.1, 0.1, 1.0],
            crop: cfg.crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("steps, batch and lr must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let interval = self.lr_decay_every.max(1);
        self.lr * 0.5f64.powi((step / interval) as i32)
    }
}

/// Uniform per-interval motion of a toy sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionModel {
    Static,
    /// Pixels of content move by (vx, vy) pixels per frame interval.
    Translate { vx: f64, vy: f64 },
    /// Content rotates about the frame center by theta radians per interval.
    Rotate { theta: f64 },
}

/// Frames with timestamps, the events spanning them, and the generating
/// motion (for ground-truth flows).
pub struct ToySequence {
    pub frames: Vec<Frame>,
    pub timestamps: Vec<u64>,
    pub events: EventStream,
    pub motion: Option<MotionModel>,
}

impl ToySequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }

    /// Ground-truth flows (V_{t->a}, V_{t->b}) for the key pair `(a, b)` at
    /// normalized time `t` in `(0, 1)`, at full resolution.
    pub fn gt_flow_at(&self, a: usize, b: usize, t: f64) -> Option<(FlowField, FlowField)> {
        let motion = self.motion?;
        let (h, w) = self.size();
        let span = (b - a) as f64;
        match motion {
            MotionModel::Static => Some((FlowField::zeros(h, w), FlowField::zeros(h, w))),
            MotionModel::Translate { vx, vy } => {
                let to_a = FlowField::constant(h, w, -t * span * vx, -t * span * vy);
                let to_b = FlowField::constant(h, w, (1.0 - t) * span * vx, (1.0 - t) * span * vy);
                Some((to_a, to_b))
            }
            MotionModel::Rotate { theta } => {
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let field = |angle: f64| {
                    let (sin, cos) = angle.sin_cos();
                    let mut data = vec![0.0; 2 * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                            let u = cos * dx - sin * dy - dx;
                            let v = sin * dx + cos * dy - dy;
                            data[y * w + x] = u;
                            data[h * w + y * w + x] = v;
                        }
                    }
                    FlowField::new(Tensor::from_vec(vec![2, h, w], data)).unwrap()
                };
                // a scene point seen at x at time t appears rotated by
                // (k - t) * theta at key time k
                Some((field(-t * span * theta), field((1.0 - t) * span * theta)))
            }
        }
    }

    pub fn gt_flows(&self, a: usize, b: usize, j: usize) -> Option<(FlowField, FlowField)> {
        self.gt_flow_at(a, b, (j - a) as f64 / (b - a) as f64)
    }
}

/// Generation knobs for toy data.
#[derive(Clone, Debug)]
pub struct ToyOptions {
    pub kind: DatasetKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub frames: usize,
    /// Translation magnitude in pixels per interval.
    pub speed: f64,
    /// Rotation in radians per interval.
    pub theta: f64,
    pub contrast_threshold: f64,
    /// Fix the translation direction (radians); `None` draws one per
    /// sequence.
    pub fixed_direction: Option<f64>,
}

impl ToyOptions {
    pub fn new(kind: DatasetKind, count: usize, size: usize, seed: u64) -> ToyOptions {
        ToyOptions {
            kind,
            count,
            size,
            seed,
            frames: 9,
            speed: 3.0,
            theta: 0.02,
            contrast_threshold: 0.2,
            fixed_direction: None,
        }
    }
}

pub fn make_toy_dataset(kind: DatasetKind, n: usize, size: usize, seed: u64) -> Vec<ToySequence> {
    make_toy_dataset_with(&ToyOptions::new(kind, n, size, seed))
}

/// Band-limited random texture on a canvas wider than the frame, sampled
/// under the motion model per frame; events simulated per consecutive pair.
pub fn make_toy_dataset_with(opts: &ToyOptions) -> Vec<ToySequence> {
    assert!(opts.size >= 32, "toy frames must be at least 32 px");
    assert!(opts.frames >= 2);
    let mut root = Rng::new(opts.seed);
    (0..opts.count).map(|_| make_sequence(opts, &mut root.fork())).collect()
}

fn make_sequence(opts: &ToyOptions, rng: &mut Rng) -> ToySequence {
    let size = opts.size;
    let margin = (opts.frames as f64 * opts.speed).ceil() as usize + 4;
    let canvas_size = size + 2 * margin;
    let canvas = make_texture(canvas_size, rng);

    let motion = match opts.kind {
        DatasetKind::Static => MotionModel::Static,
        DatasetKind::Translate => {
            // rightward velocity (speed, 0) unless a direction is pinned
            let angle = opts.fixed_direction.unwrap_or(0.0);
            MotionModel::Translate { vx: opts.speed * angle.cos(), vy: opts.speed * angle.sin() }
        }
        DatasetKind::Rotate => {
            let sign = if rng.unit() < 0.5 { 1.0 } else { -1.0 };
            MotionModel::Rotate { theta: sign * opts.theta }
        }
    };

    let (cy, cx) = ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
    let frame_at = |kf: f64| -> Frame {
        Frame::from_fn(3, size, size, |c, y, x| {
            // canvas position of frame pixel (y, x) at time kf (intervals)
            let (sy, sx) = match motion {
                MotionModel::Static => (y as f64, x as f64),
                MotionModel::Translate { vx, vy } => (y as f64 - kf * vy, x as f64 - kf * vx),
                MotionModel::Rotate { theta } => {
                    let angle = -kf * theta;
                    let (sin, cos) = angle.sin_cos();
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
                }
            };
            sample_canvas(&canvas, canvas_size, c, sy + margin as f64, sx + margin as f64)
        })
    };

    let frames: Vec<Frame> = (0..opts.frames).map(|k| frame_at(k as f64)).collect();
    let timestamps: Vec<u64> = (0..opts.frames).map(|k| k as u64 * FRAME_INTERVAL_US).collect();
    // Events come from the continuous motion sampled well above the stored
    // frame rate, the way events accompany the full-rate video the key
    // frames were skipped from; timestamps then trace the actual edge
    // crossings instead of smearing over whole intervals.
    let substeps = EVENT_SUBSTEPS_PER_INTERVAL;
    let n_sub = (opts.frames - 1) * substeps + 1;
    let sub_frames: Vec<Frame> = (0..n_sub).map(|k| frame_at(k as f64 / substeps as f64)).collect();
    let sub_times: Vec<u64> = (0..n_sub)
        .map(|k| (k as u64 * FRAME_INTERVAL_US) / substeps as u64)
        .collect();
    let events = simulate_sequence_events(&sub_frames, &sub_times, opts.contrast_threshold)
        .expect("subframes share geometry");
    ToySequence { frames, timestamps, events, motion: Some(motion) }
}

/// Three octaves of bilinearly upsampled noise per channel. The fine
/// octave puts enough log-luminance contrast on few-pixel scales that a
/// contrast threshold of 0.2 fires several events per moving edge.
fn make_texture(size: usize, rng: &mut Rng) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let octave = |res: usize, rng: &mut Rng, tape: &mut Tape| -> Tensor {
        let coarse = Tensor::from_vec(
            vec![3, res, res],
            (0..3 * res * res).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        tape.bilinear_resize(&coarse, size, size).unwrap()
    };
    let low = octave((size / 16).max(2), rng, &mut tape);
    let mid = octave((size / 7).max(3), rng, &mut tape);
    let fine = octave((size * 2 / 5).max(4), rng, &mut tape);
    low.data()
        .iter()
        .zip(mid.data())
        .zip(fine.data())
        .map(|((l, m), f)| (0.5 + 0.30 * l + 0.20 * m + 0.17 * f).clamp(0.05, 0.95))
        .collect()
}

fn sample_canvas(canvas: &[f64], size: usize, c: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (size - 1) as f64);
    let x = x.clamp(0.0, (size - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(size - 1);
    let x1 = (x0 + 1).min(size - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let base = c * size * size;
    let at = |yy: usize, xx: usize| canvas[base + yy * size + xx];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x1) * (1.0 - fy) * fx
        + at(y1, x0) * fy * (1.0 - fx)
        + at(y1, x1) * fy * fx
}

/// One training sample: cropped network inputs plus the ground-truth
/// middle frame.
pub struct TrainSample {
    pub i0: Tensor,
    pub i1: Tensor,
    pub gt: Tensor,
    pub g_0t: Tensor,
    pub g_t0: Tensor,
    pub g_t1: Tensor,
}

fn crop_spatial(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let shape = t.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let mut data = Vec::with_capacity(n * c * size * size);
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..size {
            let row = base + (y0 + y) * w + x0;
            data.extend_from_slice(&t.data()[row..row + size]);
        }
    }
    Tensor::from_vec(vec![n, c, size, size], data)
}

/// Cut the events of `seq` to the key window, build the three voxel grids
/// split at frame `j`, and apply a synchronized crop to frames and grids.
pub fn prepare_sample(
    seq: &ToySequence,
    a: usize,
    b: usize,
    j: usize,
    bins: usize,
    crop: Option<(usize, usize, usize)>,
) -> Result<TrainSample> {
    if !(a < j && j < b && b < seq.len()) {
        return Err(Error::invalid("prepare_sample", format!("bad indices {a} < {j} < {b}")));
    }
    let (h, w) = seq.size();
    let (t_a, t_b, t_j) = (seq.timestamps[a], seq.timestamps[b], seq.timestamps[j]);
    let (_, tail) = split_events(&seq.events, t_a)?;
    let (pair_events, _) = split_events(&tail, t_b)?;
    let vox = voxel_inputs(&pair_events, t_j, bins, h, w)?;
    let mut sample = TrainSample {
        i0: seq.frames[a].as_input(),
        i1: seq.frames[b].as_input(),
        gt: seq.frames[j].as_input(),
        g_0t: vox.g_0t,
        g_t0: vox.g_t0,
        g_t1: vox.g_t1,
    };
    if let Some((y0, x0, size)) = crop {
        for t in [
            &mut sample.i0,
            &mut sample.i1,
            &mut sample.gt,
            &mut sample.g_0t,
            &mut sample.g_t0,
            &mut sample.g_t1,
        ] {
            *t = crop_spatial(t, y0, x0, size);
        }
    }
    Ok(sample)
}

/// Random (sequence, key pair, middle index, crop) draw shared by both
/// stages. Key spans of 2 and 4 intervals give interior times in
/// {1/4, 1/2, 3/4}.
fn draw_sample(rng: &mut Rng, dataset: &[ToySequence], crop: usize) -> (usize, usize, usize, usize, Option<(usize, usize, usize)>) {
    let seq_idx = rng.below(dataset.len());
    let n_frames = dataset[seq_idx].len();
    let span = if n_frames > 4 && rng.unit() < 0.5 { 4 } else { 2 };
    let a = rng.below(n_frames - span);
    let j = a + 1 + rng.below(span - 1);
    let b = a + span;
    let crop_box = if crop > 0 {
        let (h, w) = dataset[seq_idx].size();
        if crop < h || crop < w {
            let y0 = rng.below(h - crop + 1);
            let x0 = rng.below(w - crop + 1);
            Some((y0, x0, crop))
        } else {
            None
        }
    } else {
        None
    };
    (seq_idx, a, b, j, crop_box)
}

/// Stage-one objective for one sample: the photometric + smoothness loss
/// applied per pyramid scale (frames area-averaged to each scale's warp
/// resolution, flows rescaled up by 2), combined with the given per-scale
/// weights. Zero-weighted scales are skipped entirely.
pub fn stage_one_loss(
    tape: &mut Tape,
    flow_cfg: &PyramidConfig,
    params: &crate::params::ParamTensors,
    sample: &TrainSample,
    lambda1: f64,
    lambda2: f64,
    scale_weights: [f64; 3],
    opts: ForwardOptions,
) -> Result<Tensor> {
    let input = BiOFInput {
        i0: &sample.i0,
        i1: &sample.i1,
        g_0t: &sample.g_0t,
        g_t0: &sample.g_t0,
        g_t1: &sample.g_t1,
    };
    let pyramids = eif_biofnet_forward(tape, flow_cfg, params, &input, opts)?;
    let mut total: Option<Tensor> = None;
    for (s, (v0, v1)) in pyramids.flows.iter().enumerate() {
        if scale_weights[s] == 0.0 {
            continue;
        }
        let pool = flow_cfg.image_downsample(s) / 2;
        let gt_s = tape.avg_pool2d(&sample.gt, pool)?;
        let i0_s = tape.avg_pool2d(&sample.i0, pool)?;
        let i1_s = tape.avg_pool2d(&sample.i1, pool)?;
        let v0 = rescale_flow(tape, v0, 2.0)?;
        let v1 = rescale_flow(tape, v1, 2.0)?;
        let term = flow_loss(tape, &gt_s, &i0_s, &i1_s, &v0, &v1, lambda1, lambda2)?;
        let term = tape.scale(&term, scale_weights[s]);
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("all scale weights are zero".into()))
}

/// Coarse-to-fine schedule for stage one: the photometric objective is
/// first applied at the coarsest scale only, then progressively shifted
/// onto the finer scales, with the learning rate stepping down alongside.
/// Enabling one scale at a time keeps the well-conditioned coarse
/// alignment signal from being drowned out by fine-texture gradients.
pub fn stage_one_schedule(step: usize, total_steps: usize) -> ([f64; 3], f64) {
    let frac = step as f64 / total_steps.max(1) as f64;
    if frac < 0.45 {
        ([1.0, 0.0, 0.0], 2.0)
    } else if frac < 0.7 {
        ([0.35, 1.0, 0.0], 1.0)
    } else {
        ([0.12, 0.35, 1.0], 0.5)
    }
}

/// Scale gradients to a global L2 norm cap.
pub(crate) fn clip_gradients(grads: &mut std::collections::BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm: f64 = grads.values().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Train the flow estimator; returns the trained parameters and the
/// per-step loss curve.
pub fn train_stage_one(
    cfg: &TrainConfig,
    flow_cfg: &PyramidConfig,
    dataset: &[ToySequence],
    bins: usize,
    mode: ForwardOptions,
) -> Result<(ParamStore, Vec<f64>)> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage_one called with stage {}", cfg.stage)));
    }
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut store = init_biof_params(flow_cfg, &mut rng);
    let mut opt = AdamW::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (scale_weights, lr_mul) = stage_one_schedule(step, cfg.steps);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch {
            let (sq, a, b, j, crop_box) = draw_sample(&mut rng, dataset, cfg.crop);
            let sample = prepare_sample(&dataset[sq], a, b, j, bins, crop_box)?;
            let loss = stage_one_loss(
                &mut tape,
                flow_cfg,
                &params,
                &sample,
                cfg.lambda1,
                cfg.lambda2,
                scale_weights,
                mode,
            )?;
            total = Some(match total {
                Some(t) => tape.add(&t, &loss)?,
                None => loss,
            });
        }
        let loss = tape.scale(&total.expect("batch >= 1"), 1.0 / cfg.batch as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                op: "train_stage_one",
                detail: format!("non-finite loss at step {step}"),
            });
        }
        curve.push(value);
        let grads = tape.backward(&loss)?;
        let mut by_name = params.gradients(&grads);
        clip_gradients(&mut by_name, 1.0);
        opt.step(&mut store, &by_name, cfg.lr_at(step) * lr_mul)?;
    }
    Ok((store, curve))
}

/// Train the synthesis network against frozen flow parameters; the flow
/// store is left untouched (the caller can digest-check it).
pub fn train_stage_two(
    cfg: &TrainConfig,
    flow_cfg: &PyramidConfig,
    flow_store: &ParamStore,
    synth_cfg: &AttentionConfig,
    dataset: &[ToySequence],
    bins: usize,
) -> Result<(ParamStore, Vec<f64>)> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage_two called with stage {}", cfg.stage)));
    }
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let mut rng = Rng::new(cfg.seed.wrapping_add(1));
    let mut store = init_synth_params(synth_cfg, &mut rng);
    let mut opt = AdamW::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    let frozen = flow_store.bind_frozen();
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch {
            let (sq, a, b, j, crop_box) = draw_sample(&mut rng, dataset, cfg.crop);
            let sample = prepare_sample(&dataset[sq], a, b, j, bins, crop_box)?;
            let input = BiOFInput {
                i0: &sample.i0,
                i1: &sample.i1,
                g_0t: &sample.g_0t,
                g_t0: &sample.g_t0,
                g_t1: &sample.g_t1,
            };
            let flows =
                eif_biofnet_forward(&mut tape, flow_cfg, &frozen, &input, ForwardOptions::default())?;
            let outs = synthesis_forward(
                &mut tape,
                synth_cfg,
                &params,
                &sample.i0,
                &sample.i1,
                &sample.g_0t,
                &sample.g_t1,
                &flows,
            )?;
            for (s, out) in outs.iter().enumerate() {
                let factor = synth_cfg.downsample(s);
                let gt_s = tape.avg_pool2d(&sample.gt, factor)?;
                let diff = tape.sub(out, &gt_s)?;
                let l = charbonnier(&mut tape, &diff, CHARBONNIER_EPS, CHARBONNIER_ALPHA)?;
                let weighted = tape.scale(&l, cfg.lambda_scales[s]);
                total = Some(match total {
                    Some(t) => tape.add(&t, &weighted)?,
                    None => weighted,
                });
            }
        }
        let loss = tape.scale(&total.expect("batch >= 1"), 1.0 / cfg.batch as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                op: "train_stage_two",
                detail: format!("non-finite loss at step {step}"),
            });
        }
        curve.push(value);
        let grads = tape.backward(&loss)?;
        let by_name = params.gradients(&grads);
        opt.step(&mut store, &by_name, cfg.lr_at(step))?;
    }
    Ok((store, curve))
}

/// Loss curves as `step,loss` CSV.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}


#[doc(hidden)]
pub fn clip_for_tests(grads: &mut std::collections::BTreeMap<String, Vec<f64>>, max_norm: f64) {
    clip_gradients(grads, max_norm);
}
