use std::path::{Path, PathBuf};

use evfi_core::biofnet::{ForwardOptions, PyramidConfig};
use evfi_core::error::{Error, Result};
use evfi_core::event::{simulate_events, voxelize as voxelize_grid};
use evfi_core::flow::FlowField;
use evfi_core::io::{
    read_checkpoint, read_evt1, read_image, write_checkpoint, write_events_csv, write_evt1,
    write_flo, write_image, RunConfig,
};
use evfi_core::params::ParamStore;
use evfi_core::pipeline::Pipeline;
use evfi_core::synthesis::AttentionConfig;
use evfi_core::train::eval::{merge_rows, metrics_csv};
use evfi_core::train::{
    evaluate_epe, loss_curve_csv, make_toy_dataset_with, skip_eval, train_stage_one,
    train_stage_two, ToyOptions, ToySequence, TrainConfig,
};
use evfi_core::Frame;

use crate::args::*;
use crate::{EXIT_NUMERICAL, EXIT_OK};

const HOLDOUT_SEQUENCES: usize = 8;

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
            RunConfig::parse(&String::from_utf8_lossy(&std::fs::read(p)?))?
        }
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("EVFI_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::Config(format!("EVFI_SEED {seed:?} is not a u64")))?;
    }
    Ok(cfg)
}

fn flow_config(cfg: &RunConfig) -> PyramidConfig {
    PyramidConfig { base_channels: cfg.base_channels, ..PyramidConfig::default() }
}

fn synth_config(cfg: &RunConfig) -> AttentionConfig {
    AttentionConfig {
        base_channels: cfg.synth_channels,
        heads: cfg.heads,
        ..AttentionConfig::default()
    }
}

fn toy_dataset(cfg: &RunConfig) -> Vec<ToySequence> {
    let mut opts = ToyOptions::new(cfg.dataset, cfg.sequences, cfg.size, cfg.seed);
    opts.frames = cfg.frames_per_sequence;
    opts.contrast_threshold = cfg.contrast_threshold;
    make_toy_dataset_with(&opts)
}

fn split_train_holdout(dataset: &[ToySequence]) -> Result<(&[ToySequence], &[ToySequence])> {
    if dataset.len() <= HOLDOUT_SEQUENCES {
        return Err(Error::Config(format!(
            "need more than {HOLDOUT_SEQUENCES} sequences (got {}) to hold out {HOLDOUT_SEQUENCES}",
            dataset.len()
        )));
    }
    Ok(dataset.split_at(dataset.len() - HOLDOUT_SEQUENCES))
}

pub fn simulate(a: SimulateArgs) -> Result<i32> {
    let frame_a = read_image(&a.frame_a)?;
    let frame_b = read_image(&a.frame_b)?;
    let stream = simulate_events(&frame_a, &frame_b, a.t_a, a.t_b, a.threshold)?;
    ensure_out(&a.out)?;
    std::fs::write(a.out.join("events.evt1"), write_evt1(&stream))?;
    if a.csv {
        std::fs::write(a.out.join("events.csv"), write_events_csv(&stream))?;
    }
    println!(
        "{} events over [{}, {}] us at threshold {}",
        stream.len(),
        stream.t_start,
        stream.t_end,
        a.threshold
    );
    Ok(EXIT_OK)
}

pub fn voxelize(a: VoxelizeArgs) -> Result<i32> {
    let stream = read_evt1(&read_file(&a.events)?)?;
    let t0 = a.t0.unwrap_or(stream.t_start);
    let t1 = a.t1.unwrap_or(stream.t_end);
    let grid = voxelize_grid(&stream, t0, t1, a.bins, stream.height as usize, stream.width as usize)?;
    ensure_out(&a.out)?;
    // dump each temporal bin as a PGM, signed values mapped to [0, 1]
    let peak = grid.data.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let (h, w) = (grid.height, grid.width);
    for b in 0..grid.bins {
        let frame = Frame::from_fn(1, h, w, |_, y, x| {
            0.5 + 0.5 * grid.data.at(&[b, y, x]) / peak
        });
        write_image(&frame, &a.out.join(format!("voxel_bin_{b:02}.pgm")))?;
    }
    println!(
        "voxelized {} events into {} bins of {}x{}; L1 mass {:.3}, peak |value| {:.3}",
        stream.len(),
        grid.bins,
        h,
        w,
        grid.l1_mass(),
        peak
    );
    Ok(EXIT_OK)
}

pub fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = load_config(&a.config)?;
    if let Some(stage) = a.stage {
        cfg.stage = stage;
    }
    cfg.validate()?;
    ensure_out(&a.out)?;
    let dataset = toy_dataset(&cfg);
    let (train_set, holdout) = split_train_holdout(&dataset)?;
    let flow_cfg = flow_config(&cfg);
    let tcfg = TrainConfig::from_run(&cfg);
    match cfg.stage {
        1 => {
            let (store, curve) =
                train_stage_one(&tcfg, &flow_cfg, train_set, cfg.bins, ForwardOptions::default())?;
            std::fs::write(a.out.join("flow.ckpt"), write_checkpoint(&store))?;
            std::fs::write(a.out.join("loss_stage1.csv"), loss_curve_csv(&curve))?;
            let epe = evaluate_epe(&flow_cfg, &store, holdout, cfg.bins, ForwardOptions::default())?;
            println!(
                "stage 1: {} steps, final loss {:.5}, holdout EPE {:.3} px",
                curve.len(),
                curve.last().unwrap_or(&f64::NAN),
                epe
            );
            println!("wrote {}", a.out.join("flow.ckpt").display());
        }
        2 => {
            let flow_path = a
                .flow_ckpt
                .clone()
                .or_else(|| cfg.flow_checkpoint.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| a.out.join("flow.ckpt"));
            let flow_store = read_checkpoint(&read_file(&flow_path)?)?;
            let digest_before = flow_store.digest();
            let synth_cfg = synth_config(&cfg);
            let (store, curve) =
                train_stage_two(&tcfg, &flow_cfg, &flow_store, &synth_cfg, train_set, cfg.bins)?;
            assert_eq!(flow_store.digest(), digest_before, "flow weights must stay frozen");
            std::fs::write(a.out.join("synth.ckpt"), write_checkpoint(&store))?;
            std::fs::write(a.out.join("loss_stage2.csv"), loss_curve_csv(&curve))?;
            println!(
                "stage 2: {} steps, final loss {:.5}, flow digest unchanged ({:016x})",
                curve.len(),
                curve.last().unwrap_or(&f64::NAN),
                digest_before
            );
            println!("wrote {}", a.out.join("synth.ckpt").display());
        }
        other => return Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
    }
    Ok(EXIT_OK)
}

fn load_pipeline(
    cfg: &RunConfig,
    flow_ckpt: &Path,
    synth_ckpt: Option<&Path>,
) -> Result<Pipeline> {
    let flow_params = read_checkpoint(&read_file(flow_ckpt)?)?;
    let synth_params: Option<ParamStore> = match synth_ckpt {
        Some(p) => Some(read_checkpoint(&read_file(p)?)?),
        None => None,
    };
    Ok(Pipeline {
        flow_cfg: flow_config(cfg),
        flow_params,
        synth_cfg: synth_config(cfg),
        synth_params,
        bins: cfg.bins,
    })
}

pub fn interpolate(a: InterpolateArgs) -> Result<i32> {
    if !(a.t > 0.0 && a.t < 1.0) {
        return Err(Error::Config(format!("--t must be inside (0, 1), got {}", a.t)));
    }
    let cfg = load_config(&a.config)?;
    let frame_a = read_image(&a.frame_a)?;
    let frame_b = read_image(&a.frame_b)?;
    let events = read_evt1(&read_file(&a.events)?)?;
    let pipeline = load_pipeline(&cfg, &a.flow_ckpt, Some(&a.synth_ckpt))?;
    let span = events.t_end - events.t_start;
    let t_mid = events.t_start + (span as f64 * a.t).round() as u64;
    ensure_out(&a.out)?;
    let outs = pipeline.interpolate(&frame_a, &frame_b, &events, t_mid)?;
    for (s, frame) in outs.iter().enumerate() {
        let path = a.out.join(format!("pred_s{s}.ppm"));
        write_image(&frame.clamped(), &path)?;
    }
    println!(
        "interpolated at t = {:.3} (t_mid = {t_mid} us); wrote {} scales to {}",
        a.t,
        outs.len(),
        a.out.display()
    );
    if a.dump_flows {
        let pyr = pipeline.flow_forward(&frame_a, &frame_b, &events, t_mid, ForwardOptions::default())?;
        for (s, (v0, v1)) in pyr.flows.iter().enumerate() {
            for (dir, v) in [(0, v0), (1, v1)] {
                let sh = v.shape();
                let field = FlowField::new(v.view(vec![2, sh[2], sh[3]]))?;
                std::fs::write(a.out.join(format!("flow_s{s}_t{dir}.flo")), write_flo(&field))?;
            }
        }
        for (s, masks) in pyr.masks.iter().enumerate() {
            if let Some((m0, m1)) = masks {
                for (dir, m) in [(0, m0), (1, m1)] {
                    let sh = m.shape();
                    let frame = Frame::new(m.view(vec![1, sh[2], sh[3]]))?;
                    write_image(&frame, &a.out.join(format!("mask_s{s}_t{dir}.pgm")))?;
                }
            }
        }
        println!("dumped diagnostic flows and masks");
    }
    Ok(EXIT_OK)
}

pub fn eval(a: EvalArgs) -> Result<i32> {
    let mut cfg = load_config(&a.config)?;
    if let Some(skips) = &a.skips {
        cfg.skips = skips.clone();
    }
    if let Some(mode) = &a.mode {
        cfg.mode = mode.parse()?;
    }
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pipeline = load_pipeline(&cfg, &a.flow_ckpt, Some(&a.synth_ckpt))?;
    let dataset = toy_dataset(&cfg);
    let (_, holdout) = split_train_holdout(&dataset)?;
    let rows = if a.jobs <= 1 || holdout.len() < 2 {
        skip_eval(&pipeline, holdout, &cfg.skips, cfg.mode)?
    } else {
        let jobs = a.jobs.min(holdout.len());
        let chunk = holdout.len().div_ceil(jobs);
        let results: Vec<Result<Vec<evfi_core::train::MetricRow>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = holdout
                .chunks(chunk)
                .map(|part| scope.spawn(|| skip_eval(&pipeline, part, &cfg.skips, cfg.mode)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        let mut parts = Vec::new();
        for r in results {
            parts.push(r?);
        }
        merge_rows(parts)
    };
    ensure_out(&a.out)?;
    std::fs::write(a.out.join("metrics.csv"), metrics_csv(&rows))?;
    println!("skip  mode    psnr_db   ssim     frames");
    for r in &rows {
        println!(
            "{:<5} {:<7} {:>7.2}  {:>7.4}  {:>5}",
            r.skip,
            r.mode.as_str(),
            r.psnr_db,
            r.ssim,
            r.n_frames
        );
    }
    println!("wrote {}", a.out.join("metrics.csv").display());
    Ok(EXIT_OK)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let rows = evfi_core::gradsuite::run_gradient_suite(a.seed)?;
    let mut report = String::new();
    report.push_str("operator                      max_rel_err   tolerance  status\n");
    for r in &rows {
        report.push_str(&format!(
            "{:<28}  {:>10.3e}  {:>10.0e}  {}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    print!("{report}");
    if let Some(dir) = &a.out {
        ensure_out(dir)?;
        std::fs::write(dir.join("gradcheck.txt"), &report)?;
    }
    if rows.iter().all(|r| r.pass) {
        println!("all {} gradient checks passed", rows.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient checks FAILED");
        Ok(EXIT_NUMERICAL)
    }
}

pub fn selftest(a: SelftestArgs) -> Result<i32> {
    let rows = evfi_core::selftest::run_selftest(a.seed);
    for r in &rows {
        println!("{} {:<40} {}", if r.pass { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    if rows.iter().all(|r| r.pass) {
        println!("all {} self-tests passed", rows.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("self-tests FAILED");
        Ok(EXIT_NUMERICAL)
    }
}

