use crate::autodiff::{Tape, Tensor};
use crate::dsp::{
    guide_concat, union_nontarget, ActivityMatrix, AudioClip, FeatureMatrix, LogMel, LogMelConfig,
    N_MELS,
};
use crate::error::{Error, Result};

use super::forward::{forward, ParamVars};
use super::{GuideMode, ModelParams};

/// Builds the model input for `target` from an 80-row mel matrix.
///
/// Baseline mode returns the mel matrix unchanged. Guided modes append the
/// target and non-target rows, with a disabled channel fed as zeros. The
/// target activity is returned alongside for masking.
pub fn prepare_guided_input(
    mel: &FeatureMatrix,
    acts: Option<(&ActivityMatrix, usize)>,
    mode: GuideMode,
) -> Result<(FeatureMatrix, Option<Vec<bool>>)> {
    if mel.rows() != N_MELS {
        return Err(Error::shape(
            "prepare_guided_input",
            format!("expected {N_MELS} rows, got {}", mel.rows()),
        ));
    }
    if mode.is_baseline() {
        return Ok((mel.clone(), None));
    }
    let (acts, target) =
        acts.ok_or_else(|| Error::InvalidInput("guided extraction needs speaker activity".into()))?;
    if acts.cols() != mel.cols() {
        return Err(Error::shape(
            "prepare_guided_input",
            format!(
                "{} feature frames vs {} activity frames",
                mel.cols(),
                acts.cols()
            ),
        ));
    }
    if target >= acts.num_speakers() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: acts.num_speakers(),
        });
    }
    let z_target = acts.row(target).to_vec();
    if mode.use_attention_mask && !z_target.iter().any(|&z| z) {
        return Err(Error::EmptyTargetActivity);
    }
    let off = vec![false; mel.cols()];
    let target_row = if mode.use_target_channel {
        &z_target
    } else {
        &off
    };
    let nontarget = if mode.use_nontarget_channel {
        union_nontarget(acts, target)?
    } else {
        off.clone()
    };
    let x = guide_concat(mel, target_row, &nontarget)?;
    Ok((x, Some(z_target)))
}

/// Inference wrapper: features, guide channels and forward pass.
#[derive(Debug)]
pub struct Extractor {
    params: ModelParams,
    logmel: LogMel,
}

impl Extractor {
    pub fn new(params: ModelParams, sample_rate: u32) -> Result<Self> {
        Ok(Self {
            params,
            logmel: LogMel::new(LogMelConfig::default(), sample_rate)?,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn mode(&self) -> GuideMode {
        self.params.mode
    }

    pub fn logmel(&self) -> &LogMel {
        &self.logmel
    }

    pub fn features(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        self.logmel.compute(clip)
    }

    /// Embedding and pooling weights (D×T) for precomputed mel features.
    pub fn embed_features_with_attention(
        &self,
        mel: &FeatureMatrix,
        acts: Option<(&ActivityMatrix, usize)>,
    ) -> Result<(Vec<f64>, Tensor)> {
        let (x, z) = prepare_guided_input(mel, acts, self.params.mode)?;
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &self.params, false);
        let out = forward(&mut tape, &self.params, &vars, &x, z.as_deref())?;
        Ok((
            tape.value(out.embedding).data().to_vec(),
            tape.value(out.attention).clone(),
        ))
    }

    pub fn embed_features(
        &self,
        mel: &FeatureMatrix,
        acts: Option<(&ActivityMatrix, usize)>,
    ) -> Result<Vec<f64>> {
        self.embed_features_with_attention(mel, acts)
            .map(|(v, _)| v)
    }

    /// Embedding of speaker `target` in `clip`; baseline models ignore `acts`.
    pub fn extract(
        &self,
        clip: &AudioClip,
        acts: Option<(&ActivityMatrix, usize)>,
    ) -> Result<Vec<f64>> {
        let mel = self.features(clip)?;
        self.embed_features(&mel, acts)
    }
}
