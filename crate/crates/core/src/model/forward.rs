use indexmap::IndexMap;

use crate::autodiff::{BatchNormStats, Tape, Tensor, Var};
use crate::dsp::{downsample_activity, FeatureMatrix};
use crate::error::{Error, Result};

use super::{bn_prefix, EncoderKind, ModelParams, BN_EPS};

/// Model arrays bound to a tape.
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Records the trainable arrays on `tape`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .iter()
            .filter(|(name, _)| !ModelParams::is_buffer(name))
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    /// Binds explicitly recorded variables, e.g. a mix of leaves and constants.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-channel first and second moments of a batch-norm input over frames.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub frames: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

pub struct ForwardOutput {
    /// Frame embeddings `H` (D×T).
    pub frames: Var,
    /// Attention weights actually used for pooling (D×T).
    pub attention: Var,
    /// Embedding `v` (E×1).
    pub embedding: Var,
    pub bn_stats: Vec<BnStats>,
}

/// Frame-level encoder; output keeps the input length.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    x: &FeatureMatrix,
) -> Result<(Var, Vec<BnStats>)> {
    let cfg = &params.config;
    if x.rows() != cfg.in_dim {
        return Err(Error::shape(
            "encode",
            format!("input has {} rows, model expects {}", x.rows(), cfg.in_dim),
        ));
    }
    let t = x.cols();
    match cfg.encoder {
        EncoderKind::Identity => {
            let d = cfg.channels;
            let mut data = vec![0.0; d * t];
            let rows = d.min(x.rows());
            data[..rows * t].copy_from_slice(&x.data()[..rows * t]);
            Ok((tape.constant(Tensor::matrix(d, t, data)?), Vec::new()))
        }
        EncoderKind::Conv => {
            let mut h = tape.constant(Tensor::matrix(x.rows(), t, x.data().to_vec())?);
            let mut stats = Vec::with_capacity(cfg.dilations.len());
            for (i, &dil) in cfg.dilations.iter().enumerate() {
                let w = vars.get(&format!("enc.{i}.weight"))?;
                let b = vars.get(&format!("enc.{i}.bias"))?;
                let c = tape.conv1d(w, Some(b), h, dil)?;
                let r = tape.relu(c)?;
                stats.push(moments(tape.value(r)));
                let bn = bn_prefix(i);
                let running = BatchNormStats::Running {
                    mean: params
                        .tensor(&format!("{bn}.running_mean"))?
                        .data()
                        .to_vec(),
                    var: params.tensor(&format!("{bn}.running_var"))?.data().to_vec(),
                };
                let gamma = vars.get(&format!("{bn}.gamma"))?;
                let beta = vars.get(&format!("{bn}.beta"))?;
                h = tape.batch_norm(r, gamma, beta, &running, BN_EPS)?;
            }
            let w = vars.get("enc.out.weight")?;
            let b = vars.get("enc.out.bias")?;
            Ok((tape.affine(w, h, Some(b))?, stats))
        }
    }
}

fn moments(t: &Tensor) -> BnStats {
    let cols = t.cols();
    let (sum, sum_sq) = t
        .data()
        .chunks(cols)
        .map(|row| {
            (
                row.iter().sum::<f64>(),
                row.iter().map(|v| v * v).sum::<f64>(),
            )
        })
        .unzip();
    BnStats {
        frames: cols,
        sum,
        sum_sq,
    }
}

/// Pooling weights over frames: uniform over all frames, or over the frames
/// flagged in `frames` when given.
fn uniform_weights(d: usize, t: usize, frames: Option<&[bool]>) -> Result<Tensor> {
    let row: Vec<f64> = match frames {
        None => vec![1.0 / t as f64; t],
        Some(mask) => {
            let n = mask.iter().filter(|&&m| m).count();
            if n == 0 {
                return Err(Error::EmptyTargetActivity);
            }
            mask.iter()
                .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
                .collect()
        }
    };
    let mut data = Vec::with_capacity(d * t);
    for _ in 0..d {
        data.extend_from_slice(&row);
    }
    Tensor::matrix(d, t, data)
}

/// Per-frame context vectors `h_t ⊕ μ ⊕ σ` (3D×T).
///
/// When `frames` is given the statistics cover only those frames, so frames
/// outside the mask cannot influence the pooled result.
pub fn context_stats(tape: &mut Tape, h: Var, frames: Option<&[bool]>) -> Result<Var> {
    let (d, t) = (tape.value(h).rows(), tape.value(h).cols());
    let u = tape.constant(uniform_weights(d, t, frames)?);
    let mu = tape.weighted_mean(h, u)?;
    let var = tape.weighted_var(h, u)?;
    let sigma = tape.sqrt(var)?;
    let mu_b = tape.broadcast_cols(mu, t)?;
    let sigma_b = tape.broadcast_cols(sigma, t)?;
    tape.concat_rows(&[h, mu_b, sigma_b])
}

fn attention_logits(tape: &mut Tape, vars: &ParamVars, context: Var) -> Result<Var> {
    let hidden = tape.affine(vars.get("attn.w1")?, context, Some(vars.get("attn.b1")?))?;
    let hidden = tape.relu(hidden)?;
    tape.affine(vars.get("attn.w2")?, hidden, Some(vars.get("attn.b2")?))
}

/// Channel- and context-wise attention weights, softmax-normalized over frames.
pub fn attention_weights(tape: &mut Tape, vars: &ParamVars, context: Var) -> Result<Var> {
    let logits = attention_logits(tape, vars, context)?;
    tape.row_softmax(logits)
}

/// Zeroes attention at frames where the target is inactive and renormalizes.
/// `z_target` has feature-frame length and is mapped onto the attention
/// length.
pub fn mask_renormalize(tape: &mut Tape, a: Var, z_target: &[bool]) -> Result<Var> {
    let t = tape.value(a).cols();
    let mask = downsample_activity(z_target, t);
    tape.mask_renormalize(a, &mask)
}

/// Weighted mean and standard deviation of frame embeddings.
pub fn attentive_stats(tape: &mut Tape, h: Var, a: Var) -> Result<(Var, Var)> {
    let mu = tape.weighted_mean(h, a)?;
    let var = tape.weighted_var(h, a)?;
    let sigma = tape.sqrt(var)?;
    Ok((mu, sigma))
}

/// Output projection of the pooled statistics.
pub fn project(tape: &mut Tape, vars: &ParamVars, mu: Var, sigma: Var) -> Result<Var> {
    let pooled = tape.concat_rows(&[mu, sigma])?;
    tape.affine(vars.get("out.weight")?, pooled, Some(vars.get("out.bias")?))
}

/// Full extractor forward pass on prepared input features.
///
/// `z_target` must be given when the model masks attention.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    x: &FeatureMatrix,
    z_target: Option<&[bool]>,
) -> Result<ForwardOutput> {
    let (h, bn_stats) = encode(tape, params, vars, x)?;
    let t = tape.value(h).cols();
    let mask = match (params.mode.use_attention_mask, z_target) {
        (true, Some(z)) => Some(downsample_activity(z, t)),
        (true, None) => {
            return Err(Error::InvalidInput(
                "attention masking needs target activity".into(),
            ));
        }
        (false, _) => None,
    };
    let context = context_stats(tape, h, mask.as_deref())?;
    // Masking and renormalizing a softmax is a softmax over the kept frames.
    let attention = match &mask {
        Some(m) => {
            let logits = attention_logits(tape, vars, context)?;
            tape.masked_row_softmax(logits, m)?
        }
        None => attention_weights(tape, vars, context)?,
    };
    let (mu, sigma) = attentive_stats(tape, h, attention)?;
    let embedding = project(tape, vars, mu, sigma)?;
    Ok(ForwardOutput {
        frames: h,
        attention,
        embedding,
        bn_stats,
    })
}
