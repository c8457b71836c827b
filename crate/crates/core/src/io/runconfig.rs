//! Key-value run configuration: UTF-8 `key = value` lines with `#`
//! comments. Unknown keys are rejected; parse -> serialize -> parse is a
//! fixed point.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Translate,
    Rotate,
    Static,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Translate => "translate",
            DatasetKind::Rotate => "rotate",
            DatasetKind::Static => "static",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(DatasetKind::Translate),
            "rotate" => Ok(DatasetKind::Rotate),
            "static" => Ok(DatasetKind::Static),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Middle,
    Whole,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Middle => "middle",
            EvalMode::Whole => "whole",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "middle" => Ok(EvalMode::Middle),
            "whole" => Ok(EvalMode::Whole),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

/// Everything an offline run needs; field defaults give a working toy
/// setup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub size: usize,
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub base_channels: usize,
    pub synth_channels: usize,
    pub heads: usize,
    pub bins: usize,
    pub contrast_threshold: f64,
    pub dataset: DatasetKind,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub speed: f64,
    pub crop: usize,
    pub skips: Vec<usize>,
    pub mode: EvalMode,
    pub flow_checkpoint: Option<String>,
    pub synth_checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            size: 64,
            stage: 1,
            steps: 1200,
            batch: 2,
            lr: 1e-3,
            lr_decay_every: 0, // 0 = derive as 40% of steps
            base_channels: 16,
            synth_channels: 12,
            heads: 2,
            bins: 16,
            contrast_threshold: 0.2,
            dataset: DatasetKind::Translate,
            sequences: 20,
            frames_per_sequence: 9,
            speed: 3.0,
            crop: 32,
            skips: vec![3],
            mode: EvalMode::Middle,
            flow_checkpoint: None,
            synth_checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Decay interval for the x0.5 learning-rate schedule.
    pub fn decay_interval(&self) -> usize {
        if self.lr_decay_every > 0 {
            self.lr_decay_every
        } else {
            (self.steps * 2 / 5).max(1)
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} {value:?}", lineno + 1));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "size" => cfg.size = value.parse().map_err(|_| bad("size"))?,
                "stage" => {
                    cfg.stage = value.parse().map_err(|_| bad("stage"))?;
                    if cfg.stage != 1 && cfg.stage != 2 {
                        return Err(Error::Config(format!("stage must be 1 or 2, got {}", cfg.stage)));
                    }
                }
                "steps" => cfg.steps = value.parse().map_err(|_| bad("steps"))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad("batch"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "lr_decay_every" => cfg.lr_decay_every = value.parse().map_err(|_| bad("lr_decay_every"))?,
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad("base_channels"))?,
                "synth_channels" => cfg.synth_channels = value.parse().map_err(|_| bad("synth_channels"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("heads"))?,
                "bins" => cfg.bins = value.parse().map_err(|_| bad("bins"))?,
                "contrast_threshold" => {
                    cfg.contrast_threshold = value.parse().map_err(|_| bad("contrast_threshold"))?
                }
                "dataset" => cfg.dataset = value.parse()?,
                "sequences" => cfg.sequences = value.parse().map_err(|_| bad("sequences"))?,
                "frames_per_sequence" => {
                    cfg.frames_per_sequence = value.parse().map_err(|_| bad("frames_per_sequence"))?
                }
                "speed" => cfg.speed = value.parse().map_err(|_| bad("speed"))?,
                "crop" => cfg.crop = value.parse().map_err(|_| bad("crop"))?,
                "skips" => {
                    cfg.skips = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad("skips")))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "mode" => cfg.mode = value.parse()?,
                "flow_checkpoint" => cfg.flow_checkpoint = Some(value.to_string()),
                "synth_checkpoint" => cfg.synth_checkpoint = Some(value.to_string()),
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.size < 32 {
            return Err(Error::Config(format!("size {} < 32", self.size)));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("bins {} < 2", self.bins)));
        }
        if self.crop != 0 && (self.crop % 8 != 0 || self.crop > self.size) {
            return Err(Error::Config(format!(
                "crop {} must be 0 or a multiple of 8 no larger than size",
                self.crop
            )));
        }
        if self.size % 8 != 0 {
            return Err(Error::Config(format!("size {} must be divisible by 8", self.size)));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "size = {}", self.size);
        let _ = writeln!(out, "stage = {}", self.stage);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "batch = {}", self.batch);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lr_decay_every = {}", self.lr_decay_every);
        let _ = writeln!(out, "base_channels = {}", self.base_channels);
        let _ = writeln!(out, "synth_channels = {}", self.synth_channels);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "bins = {}", self.bins);
        let _ = writeln!(out, "contrast_threshold = {}", self.contrast_threshold);
        let _ = writeln!(out, "dataset = {}", self.dataset.as_str());
        let _ = writeln!(out, "sequences = {}", self.sequences);
        let _ = writeln!(out, "frames_per_sequence = {}", self.frames_per_sequence);
        let _ = writeln!(out, "speed = {}", self.speed);
        let _ = writeln!(out, "crop = {}", self.crop);
        let skips: Vec<String> = self.skips.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "skips = {}", skips.join(","));
        let _ = writeln!(out, "mode = {}", self.mode.as_str());
        if let Some(p) = &self.flow_checkpoint {
            let _ = writeln!(out, "flow_checkpoint = {p}");
        }
        if let Some(p) = &self.synth_checkpoint {
            let _ = writeln!(out, "synth_checkpoint = {p}");
        }
        out
    }
}
