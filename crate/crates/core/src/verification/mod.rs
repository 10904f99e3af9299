//! Speaker verification: frame selection for interval-based baselines, trial
//! construction and scoring, and the EER / minDCF metrics.

mod trials;

use crate::dsp::{union_nontarget, ActivityMatrix};
use crate::error::{Error, Result};

pub(crate) use trials::embed_frames;
pub use trials::{
    cosine_score, make_trials, read_scores, read_trials, score_trials, write_scores, write_trials,
    Policy, TestRef, Trial, TrialSet,
};

/// Which target frames an interval-based (unguided) extractor may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Frames where only the target speaks; all target frames if none.
    SoloOnly,
    /// Every target-active frame.
    SoloPlusOverlap,
}

pub fn segment_select(
    acts: &ActivityMatrix,
    target: usize,
    policy: SelectionPolicy,
) -> Result<Vec<bool>> {
    let nt = union_nontarget(acts, target)?;
    let z = acts.row(target);
    if !z.iter().any(|&v| v) {
        return Err(Error::EmptyTargetActivity);
    }
    if policy == SelectionPolicy::SoloOnly {
        let solo: Vec<bool> = z.iter().zip(&nt).map(|(&a, &b)| a && !b).collect();
        if solo.iter().any(|&v| v) {
            return Ok(solo);
        }
    }
    Ok(z.to_vec())
}

/// Scores split by trial label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }

    pub fn from_labels(labels: &[bool], scores: &[f64]) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::InvalidInput("one score per label required".into()));
        }
        let mut s = Self::default();
        for (&l, &v) in labels.iter().zip(scores) {
            if l {
                s.target.push(v);
            } else {
                s.nontarget.push(v);
            }
        }
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Empty("target scores"));
        }
        if self.nontarget.is_empty() {
            return Err(Error::Empty("non-target scores"));
        }
        if !self
            .target
            .iter()
            .chain(&self.nontarget)
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput("scores must be finite".into()));
        }
        Ok(())
    }

    /// `(FRR, FAR)` at every distinct score and at +∞, by increasing threshold.
    /// FRR(t) = P(target < t), FAR(t) = P(non-target ≥ t).
    pub fn operating_points(&self) -> Result<Vec<(f64, f64)>> {
        self.check()?;
        let mut tar = self.target.clone();
        let mut non = self.nontarget.clone();
        tar.sort_by(f64::total_cmp);
        non.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        let (nt, nn) = (tar.len() as f64, non.len() as f64);
        let (mut i, mut j) = (0, 0);
        Ok(thresholds
            .into_iter()
            .map(|t| {
                while i < tar.len() && tar[i] < t {
                    i += 1;
                }
                while j < non.len() && non[j] < t {
                    j += 1;
                }
                (i as f64 / nt, (non.len() - j) as f64 / nn)
            })
            .collect())
    }
}

/// Equal error rate in percent, interpolated linearly between the two
/// operating points around the FRR = FAR crossing.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let pts = scores.operating_points()?;
    let k = pts
        .iter()
        .position(|(frr, far)| frr >= far)
        .expect("the +inf threshold has FRR = 1 and FAR = 0");
    let (a1, b1) = pts[k];
    if a1 == b1 || k == 0 {
        return Ok(100.0 * a1);
    }
    let (a0, b0) = pts[k - 1];
    let lambda = (b0 - a0) / ((a1 - a0) - (b1 - b0));
    Ok(100.0 * (a0 + lambda * (a1 - a0)))
}

/// Detection cost parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(scores: &ScoreSet, p: &DcfParams) -> Result<f64> {
    if !(p.p_target > 0.0 && p.p_target < 1.0) || p.c_miss <= 0.0 || p.c_fa <= 0.0 {
        return Err(Error::InvalidInput(
            "need 0 < p_target < 1 and positive costs".into(),
        ));
    }
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    Ok(scores
        .operating_points()?
        .into_iter()
        .map(|(frr, far)| (p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far) / norm)
        .fold(f64::INFINITY, f64::min))
}
