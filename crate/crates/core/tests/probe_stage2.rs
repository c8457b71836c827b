use evfi_core::biofnet::{ForwardOptions, PyramidConfig};
use evfi_core::io::{DatasetKind, EvalMode};
use evfi_core::pipeline::Pipeline;
use evfi_core::synthesis::AttentionConfig;
use evfi_core::train::metrics::{frame_average, psnr, ssim};
use evfi_core::train::*;

#[test]
#[ignore]
fn stage2_probe() {
    let dataset = make_toy_dataset(DatasetKind::Translate, 16, 64, 7);
    let (train_set, holdout) = dataset.split_at(12);
    let flow_cfg = PyramidConfig::default();
    // quick stage-one run for the frozen flow checkpoint
    let cfg1 = TrainConfig {
        stage: 1, steps: 150, batch: 2, lr: 1e-3, lr_decay_every: 60, seed: 5,
        lambda1: 1.0, lambda2: 10.0, lambda_scales: [0.1, 0.1, 1.0], crop: 32,
    };
    let (flow_store, _) = train_stage_one(&cfg1, &flow_cfg, train_set, 16, ForwardOptions::default()).unwrap();

    let synth_cfg = AttentionConfig { scales: 3, base_channels: 12, heads: 2, alpha_init: 1.0, dw_kernel: 3 };
    let cfg2 = TrainConfig { stage: 2, steps: 1800, lr: 3e-3, lr_decay_every: 700, ..cfg1.clone() };
    let t0 = std::time::Instant::now();
    let (synth_store, curve) = train_stage_two(&cfg2, &flow_cfg, &flow_store, &synth_cfg, train_set, 16).unwrap();
    let w = |a: usize, b: usize| curve[a..b].iter().sum::<f64>() / (b - a) as f64;
    println!("stage2 {} steps in {:?}; loss {:.4} -> w600 {:.4} -> w1200 {:.4} -> w1800 {:.4}",
        curve.len(), t0.elapsed(), curve[0], w(550, 600), w(1150, 1200), w(1750, 1800));

    let pipeline = Pipeline { flow_cfg, flow_params: flow_store, synth_cfg, synth_params: Some(synth_store), bins: 16 };
    let rows = skip_eval(&pipeline, holdout, &[1, 3], EvalMode::Middle).unwrap();
    for r in &rows {
        println!("skip {}: psnr {:.2} ssim {:.4} ({} frames)", r.skip, r.psnr_db, r.ssim, r.n_frames);
    }
    for skip in [1usize, 3] {
        let mut acc = 0.0;
        let mut sacc = 0.0;
        let mut n = 0;
        for seq in holdout {
            let step = skip + 1;
            let mut a = 0;
            while a + step < seq.len() {
                let j = a + (skip + 1) / 2;
                let avg = frame_average(&seq.frames[a], &seq.frames[a + step]).unwrap();
                acc += psnr(&avg, &seq.frames[j]).unwrap();
                sacc += ssim(&avg, &seq.frames[j]).unwrap();
                n += 1;
                a += step;
            }
        }
        println!("baseline skip {}: psnr {:.2} ssim {:.4} ({} frames)", skip, acc / n as f64, sacc / n as f64, n);
    }
}
