use std::path::Path;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::dsp::{gather_frames, ActivityMatrix, AudioClip, HOP_SAMPLES, WIN_SAMPLES};
use crate::error::{Error, Result};
use crate::mixture::{crop_circular, make_one_vs_many, Corpus, MixtureSample, Utterance};
use crate::model::Extractor;
use crate::rng::stream_rng;

use super::{segment_select, SelectionPolicy};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TestRef {
    Utterance(String),
    /// Mixture id and the speaker designated as target.
    Mixture {
        id: String,
        target_speaker: String,
    },
}

impl TestRef {
    fn key(&self) -> String {
        match self {
            TestRef::Utterance(u) => u.clone(),
            TestRef::Mixture { id, target_speaker } => format!("{id}:{target_speaker}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    /// Same speaker on both sides.
    pub target: bool,
    pub enroll: String,
    pub test: TestRef,
}

/// Trials together with the mixtures they reference.
#[derive(Clone, Debug, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub mixtures: IndexMap<String, MixtureSample>,
}

impl TrialSet {
    pub fn labels(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.target).collect()
    }
}

/// Embedding strategy on the test side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Unguided model on the selected target frames.
    Interval(SelectionPolicy),
    /// Guided model on the whole mixture with speaker activities.
    Guided,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b1" | "solo_only" => Ok(Policy::Interval(SelectionPolicy::SoloOnly)),
            "b2" | "solo_plus_overlap" => Ok(Policy::Interval(SelectionPolicy::SoloPlusOverlap)),
            "guided" => Ok(Policy::Guided),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Balanced trial list: even indices are target trials. With `interferers`
/// > 0 the test side is a one-vs-many mixture whose interferers exclude both
/// > the enrollment and the test speaker.
pub fn make_trials(corpus: &Corpus, n: usize, interferers: usize, seed: u64) -> Result<TrialSet> {
    let speakers: Vec<usize> = (0..corpus.num_speakers())
        .filter(|&k| corpus.of_speaker(k).count() >= 2)
        .collect();
    if speakers.len() < 2 || corpus.num_speakers() < interferers + 2 {
        return Err(Error::InvalidInput(format!(
            "corpus too small for trials with {interferers} interferers"
        )));
    }
    let mut set = TrialSet::default();
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        let target = i % 2 == 0;
        let a = speakers[rng.gen_range(0..speakers.len())];
        let a_utts: Vec<&Utterance> = corpus.of_speaker(a).collect();
        let e = rng.gen_range(0..a_utts.len());
        let test: &Utterance = if target {
            let k = (e + rng.gen_range(1..a_utts.len())) % a_utts.len();
            a_utts[k]
        } else {
            let mut s = rng.gen_range(0..corpus.num_speakers() - 1);
            if s >= a {
                s += 1;
            }
            let utts: Vec<&Utterance> = corpus.of_speaker(s).collect();
            utts[rng.gen_range(0..utts.len())]
        };
        let test_ref = if interferers == 0 {
            TestRef::Utterance(test.utterance_id.clone())
        } else {
            let pool: Vec<usize> = (0..corpus.num_speakers())
                .filter(|&k| k != a && corpus.speakers()[k] != test.speaker_id)
                .collect();
            let chosen: Vec<&Utterance> = sample(&mut rng, pool.len(), interferers)
                .into_iter()
                .map(|p| {
                    let utts: Vec<&Utterance> = corpus.of_speaker(pool[p]).collect();
                    utts[rng.gen_range(0..utts.len())]
                })
                .collect();
            let mix = make_one_vs_many(test, &chosen, &mut rng)?;
            let id = format!("m{i:05}");
            set.mixtures.insert(id.clone(), mix);
            TestRef::Mixture {
                id,
                target_speaker: test.speaker_id.clone(),
            }
        };
        set.trials.push(Trial {
            target,
            enroll: a_utts[e].utterance_id.clone(),
            test: test_ref,
        });
    }
    Ok(set)
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine_score(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Embedding of a clean single-speaker clip; guided models see the target
/// active in every frame and no interference.
fn embed_clean(ex: &Extractor, clip: &AudioClip) -> Result<Vec<f64>> {
    if ex.mode().is_baseline() {
        return ex.extract(clip, None);
    }
    let mel = ex.features(clip)?;
    let acts = ActivityMatrix::new(vec!["target".into()], vec![vec![true; mel.cols()]])?;
    ex.embed_features(&mel, Some((&acts, 0)))
}

/// Waveform of the selected frames, repeated up to one analysis window when
/// shorter.
fn gather_for_baseline(clip: &AudioClip, keep: &[bool]) -> Result<AudioClip> {
    let g = gather_frames(clip, keep, HOP_SAMPLES)?;
    if g.len() >= WIN_SAMPLES {
        return Ok(g);
    }
    AudioClip::new(crop_circular(g.samples(), 0, WIN_SAMPLES), g.sample_rate())
}

/// Unguided embedding of the selected frames of `clip`.
pub(crate) fn embed_frames(ex: &Extractor, clip: &AudioClip, keep: &[bool]) -> Result<Vec<f64>> {
    ex.extract(&gather_for_baseline(clip, keep)?, None)
}

/// Target embedding in a mixture under `policy`.
pub(crate) fn embed_mixture(
    ex: &Extractor,
    mix: &MixtureSample,
    target: usize,
    policy: Policy,
) -> Result<Vec<f64>> {
    match policy {
        Policy::Interval(sel) => {
            let keep = segment_select(&mix.acts, target, sel)?;
            embed_frames(ex, &mix.clip, &keep)
        }
        Policy::Guided => ex.extract(&mix.clip, Some((&mix.acts, target))),
    }
}

fn check_policy(ex: &Extractor, policy: Policy) -> Result<()> {
    match (policy, ex.mode().is_baseline()) {
        (Policy::Guided, false) | (Policy::Interval(_), true) => Ok(()),
        (Policy::Guided, true) => Err(Error::Config(
            "guided policy needs a guided checkpoint".into(),
        )),
        (Policy::Interval(_), false) => Err(Error::Config(
            "interval policies need a baseline checkpoint".into(),
        )),
    }
}

/// One cosine score per trial. Every distinct enrollment and test side is
/// embedded once; failures name the first trial using the offending side.
pub fn score_trials(
    trials: &[Trial],
    mixtures: &IndexMap<String, MixtureSample>,
    corpus: &Corpus,
    ex: &Extractor,
    policy: Policy,
) -> Result<Vec<f64>> {
    check_policy(ex, policy)?;
    let mut sides: IndexMap<String, (usize, Side)> = IndexMap::new();
    for (i, t) in trials.iter().enumerate() {
        sides
            .entry(format!("e:{}", t.enroll))
            .or_insert((i, Side::Clean(t.enroll.clone())));
        let side = match &t.test {
            TestRef::Utterance(u) => Side::Clean(u.clone()),
            TestRef::Mixture { id, target_speaker } => {
                Side::Mix(id.clone(), target_speaker.clone())
            }
        };
        sides
            .entry(format!("t:{}", t.test.key()))
            .or_insert((i, side));
    }
    let entries: Vec<(&String, &(usize, Side))> = sides.iter().collect();
    let embs = entries
        .par_iter()
        .map(|(_, (trial, side))| {
            side.embed(ex, corpus, mixtures, policy)
                .map_err(|e| Error::Trial {
                    trial: *trial,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let index: IndexMap<&String, usize> = entries
        .iter()
        .enumerate()
        .map(|(i, (k, _))| (*k, i))
        .collect();
    Ok(trials
        .iter()
        .map(|t| {
            let a = &embs[index[&format!("e:{}", t.enroll)]];
            let b = &embs[index[&format!("t:{}", t.test.key())]];
            cosine_score(a, b)
        })
        .collect())
}

enum Side {
    Clean(String),
    Mix(String, String),
}

impl Side {
    fn embed(
        &self,
        ex: &Extractor,
        corpus: &Corpus,
        mixtures: &IndexMap<String, MixtureSample>,
        policy: Policy,
    ) -> Result<Vec<f64>> {
        match self {
            Side::Clean(u) => {
                let utt = corpus
                    .get(u)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown utterance {u}")))?;
                embed_clean(ex, &utt.clip)
            }
            Side::Mix(id, spk) => {
                let mix = mixtures
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown mixture {id}")))?;
                let target = mix.acts.index_of(spk).ok_or_else(|| {
                    Error::InvalidInput(format!("speaker {spk} not in mixture {id}"))
                })?;
                embed_mixture(ex, mix, target, policy)
            }
        }
    }
}

/// `label enroll test[:target_speaker]` per line.
pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let text: String = trials
        .iter()
        .map(|t| {
            let test = match &t.test {
                TestRef::Utterance(u) => u.clone(),
                TestRef::Mixture { id, target_speaker } => format!("{id}:{target_speaker}"),
            };
            format!("{} {} {}\n", u8::from(t.target), t.enroll, test)
        })
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: n + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err("expected `label enroll test`"));
        }
        let target = match f[0] {
            "1" => true,
            "0" => false,
            _ => return Err(err("label must be 0 or 1")),
        };
        let test = match f[2].split_once(':') {
            Some((id, spk)) if !id.is_empty() && !spk.is_empty() => TestRef::Mixture {
                id: id.to_string(),
                target_speaker: spk.to_string(),
            },
            Some(_) => return Err(err("empty mixture id or speaker")),
            None => TestRef::Utterance(f[2].to_string()),
        };
        out.push(Trial {
            target,
            enroll: f[1].to_string(),
            test,
        });
    }
    Ok(out)
}

/// `trial_index TAB score` with six decimals.
pub fn write_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let text: String = scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i}\t{s:.6}\n"))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a score file; indices must run 0, 1, 2, ...
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let err = |msg: &str| Error::Parse {
            line: n + 1,
            msg: msg.to_string(),
        };
        let (i, s) = line
            .split_once('\t')
            .ok_or_else(|| err("expected index TAB score"))?;
        if i.trim().parse::<usize>().ok() != Some(out.len()) {
            return Err(err("trial indices must be consecutive from 0"));
        }
        let v: f64 = s.trim().parse().map_err(|_| err("bad score"))?;
        if !v.is_finite() {
            return Err(err("score is not finite"));
        }
        out.push(v);
    }
    Ok(out)
}
