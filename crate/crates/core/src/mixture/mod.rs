//! Synthetic speakers, training mixtures, one-vs-many evaluation mixtures and
//! target overlap statistics.

mod manifest;
mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    activity_from_intervals, frame_count, union_nontarget, ActivityMatrix, AudioClip, HOP_SAMPLES,
    SAMPLE_RATE,
};
use crate::error::{Error, Result};

pub use manifest::{read_manifest, rebuild_mixture, write_manifest, ManifestEntry, ManifestRecord};
pub use synth::{speaker_id, synth_corpus, Corpus, SpeakerProfile, Utterance};

/// Samples per millisecond; start times are drawn on this grid.
const MS: usize = SAMPLE_RATE as usize / 1000;

/// Where and how loud one source sits in a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub utterance_id: String,
    pub speaker_id: String,
    /// First sample of the source in the mixture.
    pub start: usize,
    /// Offset into the utterance; crops wrap around the utterance end.
    pub offset: usize,
    pub len: usize,
    pub gain: f64,
}

impl Placement {
    pub fn start_s(&self) -> f64 {
        self.start as f64 / SAMPLE_RATE as f64
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub clip: AudioClip,
    pub acts: ActivityMatrix,
    /// One entry per activity row, in row order.
    pub placements: Vec<Placement>,
    /// Row of the designated target, for evaluation mixtures.
    pub target: Option<usize>,
}

impl MixtureSample {
    pub fn speaker_ids(&self) -> &[String] {
        self.acts.speaker_ids()
    }
}

pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub(crate) fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64).sqrt()
}

/// `len` samples starting at `offset`, repeating the utterance circularly.
pub fn crop_circular(samples: &[f32], offset: usize, len: usize) -> Vec<f32> {
    if samples.is_empty() {
        return vec![0.0; len];
    }
    (0..len)
        .map(|i| samples[(offset + i) % samples.len()])
        .collect()
}

/// Activity rows implied by placements over a mixture of `total` samples.
pub fn activity_from_placements(placements: &[Placement], total: usize) -> Result<ActivityMatrix> {
    let frames = frame_count(total);
    let ids = placements.iter().map(|p| p.speaker_id.clone()).collect();
    let rows = placements
        .iter()
        .map(|p| activity_from_intervals(&[(p.start, p.end())], frames, HOP_SAMPLES))
        .collect();
    ActivityMatrix::new(ids, rows)
}

/// Sums gain-scaled sources at their placements, in placement order.
pub fn mix_sources(
    sources: &[&[f32]],
    placements: Vec<Placement>,
    target: Option<usize>,
) -> Result<MixtureSample> {
    if sources.len() != placements.len() || sources.is_empty() {
        return Err(Error::InvalidInput(
            "one source per placement required".into(),
        ));
    }
    let total = placements.iter().map(Placement::end).max().unwrap_or(0);
    let mut out = vec![0.0f32; total];
    for (src, p) in sources.iter().zip(&placements) {
        let crop = crop_circular(src, p.offset, p.len);
        let g = p.gain as f32;
        for (o, s) in out[p.start..p.end()].iter_mut().zip(&crop) {
            *o += g * s;
        }
    }
    let acts = activity_from_placements(&placements, total)?;
    Ok(MixtureSample {
        clip: AudioClip::new(out, SAMPLE_RATE)?,
        acts,
        placements,
        target,
    })
}

fn check_distinct(ids: &[&str]) -> Result<()> {
    for (i, a) in ids.iter().enumerate() {
        if ids[..i].contains(a) {
            return Err(Error::InvalidInput(format!(
                "speaker {a} appears twice in a mixture"
            )));
        }
    }
    Ok(())
}

/// Training mixture recipe parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMixConfig {
    pub speakers: usize,
    pub crop_min_s: f64,
    pub crop_max_s: f64,
    pub max_start_s: f64,
    pub min_start_gap_s: f64,
    pub gain_db: f64,
}

impl Default for TrainingMixConfig {
    fn default() -> Self {
        Self {
            speakers: 3,
            crop_min_s: 3.0,
            crop_max_s: 6.0,
            max_start_s: 3.0,
            min_start_gap_s: 0.5,
            gain_db: 5.0,
        }
    }
}

/// Draws `n` start times on the millisecond grid in `[0, max]` until every
/// pair differs by at least `gap`, then shifts the earliest to zero.
fn spaced_starts(rng: &mut ChaCha8Rng, n: usize, max_s: f64, gap_s: f64) -> Vec<usize> {
    let max_ms = (max_s * 1000.0).round() as usize;
    let gap = (gap_s * 1000.0).round() as usize;
    loop {
        let mut starts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=max_ms)).collect();
        let ok = (0..n).all(|i| (0..i).all(|j| starts[i].abs_diff(starts[j]) >= gap));
        if ok {
            let lo = *starts.iter().min().unwrap();
            starts.iter_mut().for_each(|s| *s = (*s - lo) * MS);
            return starts;
        }
    }
}

/// One on-the-fly training mixture of distinct speakers.
pub fn make_training_mixture(
    corpus: &Corpus,
    cfg: &TrainingMixConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureSample> {
    let n = cfg.speakers;
    if corpus.num_speakers() < n {
        return Err(Error::InvalidInput(format!(
            "corpus has {} speakers, mixtures need {n}",
            corpus.num_speakers()
        )));
    }
    let spk: Vec<usize> = rand::seq::index::sample(rng, corpus.num_speakers(), n).into_vec();
    let mut chosen = Vec::with_capacity(n);
    for &k in &spk {
        let utts: Vec<&Utterance> = corpus.of_speaker(k).collect();
        chosen.push(*utts.choose(rng).expect("speaker has utterances"));
    }
    let starts = spaced_starts(rng, n, cfg.max_start_s, cfg.min_start_gap_s);
    let mut placements = Vec::with_capacity(n);
    let mut ref_rms = 0.0;
    for (i, u) in chosen.iter().enumerate() {
        let len =
            (rng.gen_range(cfg.crop_min_s..=cfg.crop_max_s) * SAMPLE_RATE as f64).round() as usize;
        let ulen = u.clip.len();
        let offset = if ulen > len {
            rng.gen_range(0..=ulen - len)
        } else {
            0
        };
        let r = rms(&crop_circular(u.clip.samples(), offset, len));
        let db = rng.gen_range(-cfg.gain_db..=cfg.gain_db);
        let gain = if i == 0 {
            ref_rms = r;
            1.0
        } else if r > 0.0 {
            round6(db_to_gain(db) * ref_rms / r)
        } else {
            1.0
        };
        placements.push(Placement {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            start: starts[i],
            offset,
            len,
            gain,
        });
    }
    let sources: Vec<&[f32]> = chosen.iter().map(|u| u.clip.samples()).collect();
    mix_sources(&sources, placements, None)
}

/// Placements of utterances chained in `order`: utterance `n` starts
/// `delays_ms[n-1]` after utterance `n-1`.
pub fn sequential_placements(order: &[&Utterance], delays_ms: &[usize]) -> Result<Vec<Placement>> {
    if order.len() != delays_ms.len() + 1 {
        return Err(Error::InvalidInput(
            "need one delay per utterance after the first".into(),
        ));
    }
    let ids: Vec<&str> = order.iter().map(|u| u.speaker_id.as_str()).collect();
    check_distinct(&ids)?;
    let mut start = 0usize;
    let mut placements = Vec::with_capacity(order.len());
    for (n, u) in order.iter().enumerate() {
        if n > 0 {
            start += delays_ms[n - 1] * MS;
        }
        placements.push(Placement {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            start,
            offset: 0,
            len: u.clip.len(),
            gain: 1.0,
        });
    }
    Ok(placements)
}

/// One-vs-many mixture with explicit chain order and delays.
pub fn place_sequential(
    order: &[&Utterance],
    delays_ms: &[usize],
    target: usize,
) -> Result<MixtureSample> {
    if target >= order.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: order.len(),
        });
    }
    let placements = sequential_placements(order, delays_ms)?;
    let sources: Vec<&[f32]> = order.iter().map(|u| u.clip.samples()).collect();
    mix_sources(&sources, placements, Some(target))
}

/// Placement plan of a one-vs-many mixture: the test utterance and the
/// interferers are chained, each starting `δ ~ U[0, |previous|]` after the
/// previous one, with the test utterance in a uniformly drawn slot. Returns
/// the chain order, the delays in milliseconds and the test slot.
pub fn plan_one_vs_many<'a>(
    test: &'a Utterance,
    interferers: &[&'a Utterance],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<&'a Utterance>, Vec<usize>, usize)> {
    let mut ids: Vec<&str> = vec![test.speaker_id.as_str()];
    ids.extend(interferers.iter().map(|u| u.speaker_id.as_str()));
    check_distinct(&ids)?;
    let slot = rng.gen_range(0..=interferers.len());
    let mut order: Vec<&Utterance> = interferers.to_vec();
    order.insert(slot, test);
    let delays: Vec<usize> = order[..order.len() - 1]
        .iter()
        .map(|u| rng.gen_range(0..=u.clip.len() / MS))
        .collect();
    Ok((order, delays, slot))
}

pub fn make_one_vs_many(
    test: &Utterance,
    interferers: &[&Utterance],
    rng: &mut ChaCha8Rng,
) -> Result<MixtureSample> {
    let (order, delays, slot) = plan_one_vs_many(test, interferers, rng)?;
    place_sequential(&order, &delays, slot)
}

/// Percentage of target-active frames during which another speaker is active.
pub fn overlap_ratio(acts: &ActivityMatrix, target: usize) -> Result<f64> {
    let nt = union_nontarget(acts, target)?;
    let z = acts.row(target);
    let active = z.iter().filter(|&&v| v).count();
    if active == 0 {
        return Err(Error::EmptyTargetActivity);
    }
    let both = z.iter().zip(&nt).filter(|(&a, &b)| a && b).count();
    Ok(100.0 * both as f64 / active as f64)
}

/// Seconds during which only the target is active.
pub fn single_speaker_duration(acts: &ActivityMatrix, target: usize, hop_s: f64) -> Result<f64> {
    let nt = union_nontarget(acts, target)?;
    let solo = acts
        .row(target)
        .iter()
        .zip(&nt)
        .filter(|(&a, &b)| a && !b)
        .count();
    Ok(hop_s * solo as f64)
}

/// White noise at `snr_db` relative to the signal power.
pub fn add_white_noise(samples: &mut [f32], snr_db: f64, rng: &mut ChaCha8Rng) {
    let p = rms(samples);
    // Uniform noise on [-a, a] has RMS a/√3.
    let a = p / db_to_gain(snr_db) * 3f64.sqrt();
    for s in samples.iter_mut() {
        *s += (a * rng.gen_range(-1.0..1.0)) as f32;
    }
}

#[cfg(test)]
mod tests;
