//! The embedding extractor: encoder, attentive statistics pooling with
//! optional activity masking, output projection, and the classifier weights
//! used by the training objective.

mod checkpoint;
mod extractor;
mod forward;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::dsp::{GUIDED_DIM, N_MELS};
use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use extractor::{prepare_guided_input, Extractor};
pub use forward::{
    attention_weights, attentive_stats, context_stats, encode, forward, mask_renormalize, project,
    BnStats, ForwardOutput, ParamVars,
};

pub const EMBEDDING_DIM: usize = 192;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Dilated conv → relu → batch-norm stack with a final 1×1 projection.
    Conv,
    /// Test hook: frame embeddings are the input rows, zero-padded or
    /// truncated to `channels`.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderKind,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(in_dim: usize, num_classes: usize) -> Self {
        Self {
            in_dim,
            channels: 64,
            kernel: 5,
            dilations: vec![1, 2, 3],
            attention_dim: 32,
            embedding_dim: EMBEDDING_DIM,
            num_classes,
            encoder: EncoderKind::Conv,
        }
    }

    /// Channel and bottleneck sizes of the full-size system.
    pub fn paper_scale(in_dim: usize, num_classes: usize) -> Self {
        Self {
            channels: 1024,
            attention_dim: 128,
            ..Self::desk(in_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim != N_MELS && self.in_dim != GUIDED_DIM {
            return Err(Error::Config(format!(
                "in_dim must be {N_MELS} or {GUIDED_DIM}, got {}",
                self.in_dim
            )));
        }
        if self.channels == 0
            || self.attention_dim == 0
            || self.embedding_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.encoder == EncoderKind::Conv
            && (self.kernel == 0 || self.dilations.is_empty() || self.dilations.contains(&0))
        {
            return Err(Error::Config(
                "conv encoder needs a kernel and positive dilations".into(),
            ));
        }
        Ok(())
    }
}

/// Which guide inputs and masking a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GuideMode {
    pub use_target_channel: bool,
    pub use_nontarget_channel: bool,
    pub use_attention_mask: bool,
}

impl GuideMode {
    pub const BASELINE: GuideMode = GuideMode {
        use_target_channel: false,
        use_nontarget_channel: false,
        use_attention_mask: false,
    };
    /// Complete guided system.
    pub const FULL: GuideMode = GuideMode {
        use_target_channel: true,
        use_nontarget_channel: true,
        use_attention_mask: true,
    };
    pub const NO_TARGET_CHANNEL: GuideMode = GuideMode {
        use_target_channel: false,
        ..Self::FULL
    };
    pub const NO_NONTARGET_CHANNEL: GuideMode = GuideMode {
        use_nontarget_channel: false,
        ..Self::FULL
    };
    pub const NO_MASK: GuideMode = GuideMode {
        use_attention_mask: false,
        ..Self::FULL
    };

    pub fn is_baseline(&self) -> bool {
        *self == Self::BASELINE
    }

    pub fn in_dim(&self) -> usize {
        if self.is_baseline() {
            N_MELS
        } else {
            GUIDED_DIM
        }
    }
}

/// Named trainable arrays plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub mode: GuideMode,
    tensors: IndexMap<String, Tensor>,
}

pub(crate) fn bn_prefix(layer: usize) -> String {
    format!("enc.{layer}.bn")
}

impl ModelParams {
    /// Random initialization (He-style for rectified layers).
    pub fn init(config: ModelConfig, mode: GuideMode, seed: u64) -> Result<Self> {
        config.validate()?;
        if mode.in_dim() != config.in_dim {
            return Err(Error::Config(format!(
                "guide mode needs in_dim {}, config has {}",
                mode.in_dim(),
                config.in_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        let mut gauss = |shape: Vec<usize>, std: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect(),
            )
            .expect("shape")
        };
        let d = config.channels;
        let mut width = config.in_dim;
        if config.encoder == EncoderKind::Conv {
            for (i, _) in config.dilations.iter().enumerate() {
                let fan_in = (width * config.kernel) as f64;
                tensors.insert(
                    format!("enc.{i}.weight"),
                    gauss(vec![d, width, config.kernel], (2.0 / fan_in).sqrt()),
                );
                tensors.insert(format!("enc.{i}.bias"), Tensor::zeros(vec![d]));
                let bn = bn_prefix(i);
                tensors.insert(format!("{bn}.gamma"), Tensor::filled(vec![d], 1.0));
                tensors.insert(format!("{bn}.beta"), Tensor::zeros(vec![d]));
                tensors.insert(format!("{bn}.running_mean"), Tensor::zeros(vec![d]));
                tensors.insert(format!("{bn}.running_var"), Tensor::filled(vec![d], 1.0));
                width = d;
            }
            tensors.insert(
                "enc.out.weight".into(),
                gauss(vec![d, width], (1.0 / width as f64).sqrt()),
            );
            tensors.insert("enc.out.bias".into(), Tensor::zeros(vec![d]));
        }
        let a = config.attention_dim;
        tensors.insert(
            "attn.w1".into(),
            gauss(vec![a, 3 * d], (2.0 / (3 * d) as f64).sqrt()),
        );
        tensors.insert("attn.b1".into(), Tensor::zeros(vec![a]));
        tensors.insert("attn.w2".into(), gauss(vec![d, a], (1.0 / a as f64).sqrt()));
        tensors.insert("attn.b2".into(), Tensor::zeros(vec![d]));
        let e = config.embedding_dim;
        tensors.insert(
            "out.weight".into(),
            gauss(vec![e, 2 * d], (1.0 / (2 * d) as f64).sqrt()),
        );
        tensors.insert("out.bias".into(), Tensor::zeros(vec![e]));
        tensors.insert("aam.weight".into(), gauss(vec![config.num_classes, e], 1.0));
        Ok(Self {
            config,
            mode,
            tensors,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        mode: GuideMode,
        tensors: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        let reference = Self::init(config.clone(), mode, 0)?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        if tensors.len() != reference.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Self {
            config,
            mode,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidInput(format!("model has no tensor {name}")))
    }

    /// All stored arrays in a stable order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    /// Names of the arrays updated by the optimizer.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| !Self::is_buffer(k))
            .cloned()
            .collect()
    }

    pub fn num_bn_layers(&self) -> usize {
        match self.config.encoder {
            EncoderKind::Conv => self.config.dilations.len(),
            EncoderKind::Identity => 0,
        }
    }

    /// Sets the running statistics of one batch-norm layer.
    pub fn set_bn_stats(&mut self, layer: usize, mean: &[f64], var: &[f64]) -> Result<()> {
        let bn = bn_prefix(layer);
        for (suffix, values) in [("running_mean", mean), ("running_var", var)] {
            let t = self
                .tensors
                .get_mut(&format!("{bn}.{suffix}"))
                .ok_or_else(|| Error::InvalidInput(format!("no batch-norm layer {layer}")))?;
            if t.len() != values.len() {
                return Err(Error::shape("set_bn_stats", "channel count"));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !Self::is_buffer(k))
            .map(|(_, v)| v.len())
            .sum()
    }
}
