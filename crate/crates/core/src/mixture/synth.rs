use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{load_wav, save_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const UTT_MIN_S: f64 = 3.0;
const UTT_MAX_S: f64 = 8.0;
const TARGET_RMS: f64 = 0.1;
const MAX_HARMONIC_HZ: f64 = 5000.0;
const BLOCK: usize = 160;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub clip: AudioClip,
    pub speaker_id: String,
    pub utterance_id: String,
}

/// Fixed voice characteristics of a synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
    /// Per-harmonic amplitude decay.
    pub tilt: f64,
}

impl SpeakerProfile {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            f0_hz: (rng.gen_range(80f64.ln()..300f64.ln())).exp(),
            formants_hz: [
                rng.gen_range(300.0..900.0),
                rng.gen_range(900.0..2500.0),
                rng.gen_range(2200.0..3500.0),
            ],
            bandwidths_hz: [
                rng.gen_range(60.0..120.0),
                rng.gen_range(80.0..160.0),
                rng.gen_range(120.0..250.0),
            ],
            tilt: rng.gen_range(0.96..0.995),
        }
    }

    fn harmonic_gain(&self, formants: &[f64; 3], freq: f64) -> f64 {
        const WEIGHTS: [f64; 3] = [1.0, 0.7, 0.45];
        formants
            .iter()
            .zip(&self.bandwidths_hz)
            .zip(WEIGHTS)
            .map(|((f, b), w)| {
                let x = (freq - f) / b;
                w / (1.0 + x * x)
            })
            .sum::<f64>()
            + 0.02
    }

    /// One utterance: a harmonic source with slow pitch movement, filtered by
    /// the jittered formant profile and shaped by a syllable-rate envelope.
    pub fn synthesize(&self, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let sr = SAMPLE_RATE as f64;
        let n = (duration_s * sr).round() as usize;
        let f0 = self.f0_hz * rng.gen_range(0.92..1.08);
        let formants = self.formants_hz.map(|f| f * rng.gen_range(0.95..1.05));
        let (pitch_rate, pitch_depth, pitch_phase) = (
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.02..0.06),
            rng.gen_range(0.0..2.0 * PI),
        );
        let (am_rate, am_depth, am_phase) = (
            rng.gen_range(3.0..6.0),
            rng.gen_range(0.3..0.6),
            rng.gen_range(0.0..2.0 * PI),
        );
        let mut out = vec![0.0f64; n];
        let mut phase = 0.0f64;
        let mut amps = Vec::new();
        for (b, block) in out.chunks_mut(BLOCK).enumerate() {
            let t = (b * BLOCK) as f64 / sr;
            let f = f0 * (1.0 + pitch_depth * (2.0 * PI * pitch_rate * t + pitch_phase).sin());
            let k_max = (MAX_HARMONIC_HZ / f).floor() as usize;
            amps.clear();
            let mut decay = 1.0;
            for k in 1..=k_max {
                amps.push(decay * self.harmonic_gain(&formants, k as f64 * f));
                decay *= self.tilt;
            }
            let step = 2.0 * PI * f / sr;
            for (i, y) in block.iter_mut().enumerate() {
                phase = (phase + step) % (2.0 * PI);
                // sin(kφ) by the Chebyshev recurrence.
                let c2 = 2.0 * phase.cos();
                let (mut prev, mut cur) = (0.0, phase.sin());
                let mut acc = 0.0;
                for &a in &amps {
                    acc += a * cur;
                    let next = c2 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                let ts = t + i as f64 / sr;
                let env = 1.0 - am_depth * (0.5 + 0.5 * (2.0 * PI * am_rate * ts + am_phase).sin());
                *y = acc * env + 0.01 * rng.gen_range(-1.0..1.0);
            }
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
        let g = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
        // Snap to the 16-bit grid so WAV storage is lossless.
        out.into_iter()
            .map(|v| ((v * g * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32)
            .collect()
    }
}

/// Utterances grouped by speaker; speakers keep first-appearance order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    by_speaker: Vec<Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut speakers: Vec<String> = Vec::new();
        let mut by_speaker: Vec<Vec<usize>> = Vec::new();
        let mut by_id = HashMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if by_id.insert(u.utterance_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate utterance id {}",
                    u.utterance_id
                )));
            }
            match speakers.iter().position(|s| *s == u.speaker_id) {
                Some(k) => by_speaker[k].push(i),
                None => {
                    speakers.push(u.speaker_id.clone());
                    by_speaker.push(vec![i]);
                }
            }
        }
        Ok(Self {
            utterances,
            speakers,
            by_speaker,
            by_id,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == id)
    }

    /// Utterances of the speaker at index `k`.
    pub fn of_speaker(&self, k: usize) -> impl Iterator<Item = &Utterance> {
        self.by_speaker[k].iter().map(|&i| &self.utterances[i])
    }

    pub fn get(&self, utterance_id: &str) -> Option<&Utterance> {
        self.by_id.get(utterance_id).map(|&i| &self.utterances[i])
    }

    /// Splits each speaker's utterances: the first `train_per_speaker` go to
    /// the first corpus, the rest to the second.
    pub fn split(&self, train_per_speaker: usize) -> Result<(Corpus, Corpus)> {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for idx in &self.by_speaker {
            for (j, &i) in idx.iter().enumerate() {
                let u = self.utterances[i].clone();
                if j < train_per_speaker {
                    train.push(u);
                } else {
                    held.push(u);
                }
            }
        }
        Ok((Corpus::new(train)?, Corpus::new(held)?))
    }

    /// Writes one WAV per utterance plus a `corpus.tsv` index.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for u in &self.utterances {
            let file = format!("{}.wav", u.utterance_id);
            save_wav(dir.join(&file), &u.clip)?;
            index.push_str(&format!("{}\t{}\t{}\n", u.utterance_id, u.speaker_id, file));
        }
        let path = dir.join("corpus.tsv");
        std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("corpus.tsv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut utts = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: "expected utterance_id, speaker_id, file".into(),
                });
            }
            utts.push(Utterance {
                clip: load_wav(dir.join(f[2]))?,
                speaker_id: f[1].to_string(),
                utterance_id: f[0].to_string(),
            });
        }
        Corpus::new(utts)
    }
}

pub fn speaker_id(k: usize) -> String {
    format!("spk{k:03}")
}

/// Synthetic corpus of `num_speakers` voices with `utts_per_speaker`
/// utterances of 3–8 s each.
pub fn synth_corpus(num_speakers: usize, utts_per_speaker: usize, seed: u64) -> Result<Corpus> {
    if num_speakers < 2 {
        return Err(Error::InvalidInput(
            "a corpus needs at least two speakers".into(),
        ));
    }
    if utts_per_speaker == 0 {
        return Err(Error::InvalidInput(
            "utts_per_speaker must be positive".into(),
        ));
    }
    let mut utts = Vec::with_capacity(num_speakers * utts_per_speaker);
    for k in 0..num_speakers {
        let mut rng = stream_rng(seed, k as u64);
        let profile = SpeakerProfile::sample(&mut rng);
        for j in 0..utts_per_speaker {
            let dur = rng.gen_range(UTT_MIN_S..UTT_MAX_S);
            let samples = profile.synthesize(dur, &mut rng);
            utts.push(Utterance {
                clip: AudioClip::new(samples, SAMPLE_RATE)?,
                speaker_id: speaker_id(k),
                utterance_id: format!("{}_u{j:03}", speaker_id(k)),
            });
        }
    }
    Corpus::new(utts)
}
