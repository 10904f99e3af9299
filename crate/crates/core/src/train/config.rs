use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{EncoderKind, GuideMode, ModelConfig, EMBEDDING_DIM};

use super::{AamConfig, ScheduleConfig};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

pub fn parse_mode(value: &str) -> Result<GuideMode> {
    Ok(match value {
        "baseline" => GuideMode::BASELINE,
        "full" | "p1" => GuideMode::FULL,
        "no_target" | "p2" => GuideMode::NO_TARGET_CHANNEL,
        "no_nontarget" | "p3" => GuideMode::NO_NONTARGET_CHANNEL,
        "no_mask" | "p4" => GuideMode::NO_MASK,
        other => return Err(Error::Config(format!("unknown mode {other:?}"))),
    })
}

pub fn mode_name(mode: GuideMode) -> &'static str {
    match mode {
        m if m == GuideMode::BASELINE => "baseline",
        m if m == GuideMode::FULL => "full",
        m if m == GuideMode::NO_TARGET_CHANNEL => "no_target",
        m if m == GuideMode::NO_NONTARGET_CHANNEL => "no_nontarget",
        m if m == GuideMode::NO_MASK => "no_mask",
        _ => "custom",
    }
}

/// Everything a training run needs besides the corpus.
///
/// Keys accepted by [`TrainConfig::set`]:
///
/// | key | meaning |
/// |---|---|
/// | `seed` | root seed |
/// | `mode` | `baseline`, `full`, `no_target`, `no_nontarget`, `no_mask` |
/// | `channels`, `kernel`, `dilations`, `attention_dim`, `embedding_dim` | model sizes; `dilations` is comma separated |
/// | `cycles`, `epochs_per_cycle`, `iters_per_epoch`, `warmup_iters`, `peak_lr`, `cycle_decay` | schedule |
/// | `margin`, `scale` | AAM objective |
/// | `mixtures_per_batch` | guided batch size in mixtures; baseline batches hold three crops per mixture |
/// | `crop_s` | baseline crop length |
/// | `noise_prob`, `snr_min_db`, `snr_max_db` | additive noise augmentation |
/// | `bn_momentum` | running-statistics update rate |
/// | `workers` | worker threads |
/// | `checkpoint_dir` | per-epoch checkpoints, empty for none |
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: GuideMode,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub schedule: ScheduleConfig,
    pub aam: AamConfig,
    pub mixtures_per_batch: usize,
    pub crop_s: f64,
    pub noise_prob: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub bn_momentum: f64,
    pub workers: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: GuideMode::FULL,
            channels: 32,
            kernel: 5,
            dilations: vec![1, 2, 3],
            attention_dim: 16,
            embedding_dim: EMBEDDING_DIM,
            schedule: ScheduleConfig {
                cycles: 2,
                epochs_per_cycle: 2,
                warmup_iters: 10,
                peak_lr: 0.001,
                cycle_decay: 0.75,
                iters_per_epoch: 25,
            },
            aam: AamConfig::default(),
            mixtures_per_batch: 8,
            crop_s: 3.0,
            noise_prob: 0.5,
            snr_min_db: 5.0,
            snr_max_db: 20.0,
            bn_momentum: 0.1,
            workers: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "mode",
        "channels",
        "kernel",
        "dilations",
        "attention_dim",
        "embedding_dim",
        "cycles",
        "epochs_per_cycle",
        "iters_per_epoch",
        "warmup_iters",
        "peak_lr",
        "cycle_decay",
        "margin",
        "scale",
        "mixtures_per_batch",
        "crop_s",
        "noise_prob",
        "snr_min_db",
        "snr_max_db",
        "bn_momentum",
        "workers",
        "checkpoint_dir",
    ];

    /// Full-size recipe: wide encoder, four 20-epoch cycles, 1k warm-up,
    /// 128 mixtures per batch.
    pub fn paper(iters_per_epoch: usize) -> Self {
        Self {
            channels: 1024,
            attention_dim: 128,
            schedule: ScheduleConfig::paper(iters_per_epoch),
            mixtures_per_batch: 128,
            ..Self::default()
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies one override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.schedule;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = parse_mode(value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "dilations" => {
                self.dilations = value
                    .split(',')
                    .map(|d| parse_value(key, d.trim()))
                    .collect::<Result<_>>()?
            }
            "attention_dim" => self.attention_dim = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "cycles" => s.cycles = parse_value(key, value)?,
            "epochs_per_cycle" => s.epochs_per_cycle = parse_value(key, value)?,
            "iters_per_epoch" => s.iters_per_epoch = parse_value(key, value)?,
            "warmup_iters" => s.warmup_iters = parse_value(key, value)?,
            "peak_lr" => s.peak_lr = parse_value(key, value)?,
            "cycle_decay" => s.cycle_decay = parse_value(key, value)?,
            "margin" => self.aam.margin = parse_value(key, value)?,
            "scale" => self.aam.scale = parse_value(key, value)?,
            "mixtures_per_batch" => self.mixtures_per_batch = parse_value(key, value)?,
            "crop_s" => self.crop_s = parse_value(key, value)?,
            "noise_prob" => self.noise_prob = parse_value(key, value)?,
            "snr_min_db" => self.snr_min_db = parse_value(key, value)?,
            "snr_max_db" => self.snr_max_db = parse_value(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "checkpoint_dir" => {
                self.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value))
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text accepted by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        let dil: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("mode", mode_name(self.mode).into()),
            ("channels", self.channels.to_string()),
            ("kernel", self.kernel.to_string()),
            ("dilations", dil.join(",")),
            ("attention_dim", self.attention_dim.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("cycles", s.cycles.to_string()),
            ("epochs_per_cycle", s.epochs_per_cycle.to_string()),
            ("iters_per_epoch", s.iters_per_epoch.to_string()),
            ("warmup_iters", s.warmup_iters.to_string()),
            ("peak_lr", s.peak_lr.to_string()),
            ("cycle_decay", s.cycle_decay.to_string()),
            ("margin", self.aam.margin.to_string()),
            ("scale", self.aam.scale.to_string()),
            ("mixtures_per_batch", self.mixtures_per_batch.to_string()),
            ("crop_s", self.crop_s.to_string()),
            ("noise_prob", self.noise_prob.to_string()),
            ("snr_min_db", self.snr_min_db.to_string()),
            ("snr_max_db", self.snr_max_db.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("workers", self.workers.to_string()),
            (
                "checkpoint_dir",
                self.checkpoint_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
        ];
        rows.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_dim: self.mode.in_dim(),
            channels: self.channels,
            kernel: self.kernel,
            dilations: self.dilations.clone(),
            attention_dim: self.attention_dim,
            embedding_dim: self.embedding_dim,
            num_classes,
            encoder: EncoderKind::Conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.aam.validate()?;
        self.model_config(1).validate()?;
        if self.mixtures_per_batch == 0 || self.workers == 0 {
            return Err(Error::Config(
                "mixtures_per_batch and workers must be positive".into(),
            ));
        }
        if !(self.crop_s >= 0.5) {
            return Err(Error::Config("crop_s must be at least 0.5 s".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || self.snr_min_db > self.snr_max_db {
            return Err(Error::Config(
                "noise_prob must be in [0,1] and snr_min_db <= snr_max_db".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must be in (0,1]".into()));
        }
        Ok(())
    }
}
