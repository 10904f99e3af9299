use std::path::Path;

use gse_core::diarization::ClusterParams;
use gse_core::train::{parse_key_values, TrainConfig};
use gse_core::verification::Policy;
use gse_core::{Error, Result};

/// Everything a command may read from `--config` and `--set`.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Whether `seed` was given explicitly.
    pub seed_set: bool,
    pub speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterances per speaker kept for training; the rest are for evaluation.
    pub train_utts: usize,
    pub trials: usize,
    pub interferers: usize,
    pub policy: Policy,
    pub conversations: usize,
    pub conversation_s: f64,
    pub overlap_prob: f64,
    pub cluster: ClusterParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seed_set: false,
            speakers: 20,
            utts_per_speaker: 12,
            train_utts: 8,
            trials: 500,
            interferers: 3,
            policy: Policy::Guided,
            conversations: 3,
            conversation_s: 30.0,
            overlap_prob: 0.5,
            cluster: ClusterParams::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides in order.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            for (k, v) in parse_key_values(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "speakers" => self.speakers = parse(key, value)?,
            "utts_per_speaker" => self.utts_per_speaker = parse(key, value)?,
            "train_utts" => self.train_utts = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "interferers" => self.interferers = parse(key, value)?,
            "policy" => self.policy = value.parse()?,
            "conversations" => self.conversations = parse(key, value)?,
            "conversation_s" => self.conversation_s = parse(key, value)?,
            "overlap_prob" => self.overlap_prob = parse(key, value)?,
            "cluster_threshold" => self.cluster.threshold = parse(key, value)?,
            "min_cluster_size" => self.cluster.min_cluster_size = parse(key, value)?,
            _ => {
                self.train.set(key, value)?;
                if key == "seed" {
                    self.seed_set = true;
                }
            }
        }
        Ok(())
    }

    /// Applies the seed precedence: `--seed`, then the config, then
    /// `GSE_SEED`, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(s) = flag {
            self.train.seed = s;
        } else if !self.seed_set {
            if let Ok(v) = std::env::var("GSE_SEED") {
                self.train.seed = parse("GSE_SEED", &v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.speakers < 2 || self.utts_per_speaker < 2 {
            return Err(Error::Config(
                "need at least 2 speakers with 2 utterances".into(),
            ));
        }
        if self.train_utts >= self.utts_per_speaker {
            return Err(Error::Config(
                "train_utts must leave utterances for evaluation".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config("overlap_prob must be in [0, 1]".into()));
        }
        if !(self.cluster.threshold.is_finite() && self.cluster.threshold >= 0.0) {
            return Err(Error::Config(
                "cluster_threshold must be non-negative".into(),
            ));
        }
        if self.cluster.min_cluster_size == 0 {
            return Err(Error::Config("min_cluster_size must be positive".into()));
        }
        Ok(())
    }
}
