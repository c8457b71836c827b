//! Frame-skip evaluation protocol and flow endpoint-error measurement.

use crate::biofnet::{ForwardOptions, PyramidConfig};
use crate::error::{Error, Result};
use crate::event::split_events;
use crate::io::EvalMode;
use crate::params::ParamStore;
use crate::pipeline::Pipeline;
use crate::train::metrics::{psnr, ssim};
use crate::train::ToySequence;

/// One line of the metric table.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub skip: usize,
    pub mode: EvalMode,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_frames: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("skip,mode,psnr_db,ssim,n_frames\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.5},{}\n",
            r.skip,
            r.mode.as_str(),
            r.psnr_db,
            r.ssim,
            r.n_frames
        ));
    }
    out
}

/// Combine per-worker rows (weighted by frame counts); rows must cover the
/// same skips in the same order.
pub fn merge_rows(parts: Vec<Vec<MetricRow>>) -> Vec<MetricRow> {
    let mut merged: Vec<MetricRow> = Vec::new();
    for part in parts {
        for (i, row) in part.into_iter().enumerate() {
            match merged.get_mut(i) {
                None => merged.push(row),
                Some(acc) => {
                    debug_assert_eq!(acc.skip, row.skip);
                    let total = (acc.n_frames + row.n_frames) as f64;
                    let wa = acc.n_frames as f64 / total;
                    let wb = row.n_frames as f64 / total;
                    acc.psnr_db = acc.psnr_db * wa + row.psnr_db * wb;
                    acc.ssim = acc.ssim * wa + row.ssim * wb;
                    acc.n_frames += row.n_frames;
                }
            }
        }
    }
    merged
}

/// Indices of the frames scored for one key pair `(a, b)` with `skip`
/// dropped frames.
fn evaluated_indices(a: usize, skip: usize, mode: EvalMode) -> Vec<usize> {
    match mode {
        EvalMode::Whole => (a + 1..a + skip + 1).collect(),
        EvalMode::Middle => vec![a + (skip + 1) / 2],
    }
}

/// Keep key frames every `skip + 1` frames, interpolate every skipped
/// frame at its true normalized time, and average PSNR/SSIM per skip.
pub fn skip_eval(
    pipeline: &Pipeline,
    sequences: &[ToySequence],
    skips: &[usize],
    mode: EvalMode,
) -> Result<Vec<MetricRow>> {
    if sequences.is_empty() {
        return Err(Error::invalid("skip_eval", "no sequences"));
    }
    let mut rows = Vec::with_capacity(skips.len());
    for &skip in skips {
        if skip == 0 {
            return Err(Error::invalid("skip_eval", "skip must be >= 1"));
        }
        let step = skip + 1;
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        let mut count = 0usize;
        for seq in sequences {
            if seq.len() < step + 1 {
                return Err(Error::invalid(
                    "skip_eval",
                    format!("sequence of {} frames too short for skip {skip}", seq.len()),
                ));
            }
            let mut a = 0;
            while a + step < seq.len() {
                let b = a + step;
                let (t_a, t_b) = (seq.timestamps[a], seq.timestamps[b]);
                let (_, tail) = split_events(&seq.events, t_a)?;
                let (pair_events, _) = split_events(&tail, t_b)?;
                for j in evaluated_indices(a, skip, mode) {
                    let outs =
                        pipeline.interpolate(&seq.frames[a], &seq.frames[b], &pair_events, seq.timestamps[j])?;
                    let pred = outs.last().expect("at least one scale").clamped();
                    psnr_acc += psnr(&pred, &seq.frames[j])?;
                    ssim_acc += ssim(&pred, &seq.frames[j])?;
                    count += 1;
                }
                a += step;
            }
        }
        if count == 0 {
            return Err(Error::invalid("skip_eval", "no frames evaluated"));
        }
        rows.push(MetricRow {
            skip,
            mode,
            psnr_db: psnr_acc / count as f64,
            ssim: ssim_acc / count as f64,
            n_frames: count,
        });
    }
    Ok(rows)
}

/// Mean endpoint error (pixels) of the full-resolution bidirectional flows
/// against the sequences' ground-truth motion, over middle frames of
/// 2-interval key pairs.
pub fn evaluate_epe(
    flow_cfg: &PyramidConfig,
    flow_store: &ParamStore,
    sequences: &[ToySequence],
    bins: usize,
    opts: ForwardOptions,
) -> Result<f64> {
    let pipeline = Pipeline {
        flow_cfg: *flow_cfg,
        flow_params: flow_store.clone(),
        synth_cfg: crate::synthesis::AttentionConfig::default(),
        synth_params: None,
        bins,
    };
    let mut acc = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let mut a = 0;
        while a + 2 < seq.len() {
            let (b, j) = (a + 2, a + 1);
            let (t_a, t_b) = (seq.timestamps[a], seq.timestamps[b]);
            let (_, tail) = split_events(&seq.events, t_a)?;
            let (pair_events, _) = split_events(&tail, t_b)?;
            let (v0, v1) =
                pipeline.full_res_flows(&seq.frames[a], &seq.frames[b], &pair_events, seq.timestamps[j], opts)?;
            let (gt0, gt1) = seq
                .gt_flows(a, b, j)
                .ok_or_else(|| Error::invalid("evaluate_epe", "sequence has no ground-truth motion"))?;
            acc += v0.endpoint_error(&gt0) + v1.endpoint_error(&gt1);
            count += 2;
            a += 4;
        }
    }
    if count == 0 {
        return Err(Error::invalid("evaluate_epe", "no pairs evaluated"));
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluated_index_arithmetic() {
        // 9 frames, 3 skips: keys {0,4,8}; whole mode scores {1,2,3,5,6,7}
        let mut whole = Vec::new();
        let mut a = 0;
        while a + 4 < 9 {
            whole.extend(evaluated_indices(a, 3, EvalMode::Whole));
            a += 4;
        }
        assert_eq!(whole, vec![1, 2, 3, 5, 6, 7]);
        // middle mode scores {2, 6}
        let mut mid = Vec::new();
        let mut a = 0;
        while a + 4 < 9 {
            mid.extend(evaluated_indices(a, 3, EvalMode::Middle));
            a += 4;
        }
        assert_eq!(mid, vec![2, 6]);
    }
}
