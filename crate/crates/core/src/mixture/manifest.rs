use std::path::Path;

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

use super::{mix_sources, Corpus, MixtureSample, Placement};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub start_s: f64,
    pub gain: f64,
}

/// One evaluation mixture:
/// `mixture_id TAB target_speaker TAB utt,start,gain;... TAB wav TAB activity`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub mixture_id: String,
    pub target_speaker: String,
    pub entries: Vec<ManifestEntry>,
    pub wav_path: String,
    pub activity_path: String,
}

impl ManifestRecord {
    pub fn from_mixture(
        mixture_id: &str,
        mix: &MixtureSample,
        wav_path: &str,
        activity_path: &str,
    ) -> Result<Self> {
        let target = mix
            .target
            .ok_or_else(|| Error::InvalidInput("mixture has no designated target".into()))?;
        Ok(Self {
            mixture_id: mixture_id.to_string(),
            target_speaker: mix.placements[target].speaker_id.clone(),
            entries: mix
                .placements
                .iter()
                .map(|p| ManifestEntry {
                    utterance_id: p.utterance_id.clone(),
                    start_s: p.start_s(),
                    gain: p.gain,
                })
                .collect(),
            wav_path: wav_path.to_string(),
            activity_path: activity_path.to_string(),
        })
    }

    fn to_line(&self) -> String {
        let list: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{},{:.6},{:.6}", e.utterance_id, e.start_s, e.gain))
            .collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.mixture_id,
            self.target_speaker,
            list.join(";"),
            self.wav_path,
            self.activity_path
        )
    }

    fn parse(line: &str, n: usize) -> Result<Self> {
        let err = |msg: &str| Error::Parse {
            line: n,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err("expected 5 tab-separated fields"));
        }
        let entries = f[2]
            .split(';')
            .map(|item| {
                let p: Vec<&str> = item.split(',').collect();
                if p.len() != 3 {
                    return Err(err("placement must be utterance,start,gain"));
                }
                let num = |s: &str| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err("bad number"))
                };
                Ok(ManifestEntry {
                    utterance_id: p[0].to_string(),
                    start_s: num(p[1])?,
                    gain: num(p[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mixture_id: f[0].to_string(),
            target_speaker: f[1].to_string(),
            entries,
            wav_path: f[3].to_string(),
            activity_path: f[4].to_string(),
        })
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| ManifestRecord::parse(l, i + 1))
        .collect()
}

/// Regenerates a mixture from its manifest record and the source corpus.
pub fn rebuild_mixture(record: &ManifestRecord, corpus: &Corpus) -> Result<MixtureSample> {
    let mut sources = Vec::with_capacity(record.entries.len());
    let mut placements = Vec::with_capacity(record.entries.len());
    for e in &record.entries {
        let u = corpus
            .get(&e.utterance_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown utterance {}", e.utterance_id)))?;
        if e.start_s < 0.0 {
            return Err(Error::InvalidInput("negative start time".into()));
        }
        sources.push(u.clip.samples());
        placements.push(Placement {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            start: (e.start_s * SAMPLE_RATE as f64).round() as usize,
            offset: 0,
            len: u.clip.len(),
            gain: e.gain,
        });
    }
    let target = placements
        .iter()
        .position(|p| p.speaker_id == record.target_speaker)
        .ok_or_else(|| {
            Error::InvalidInput(format!("target {} not in mixture", record.target_speaker))
        })?;
    mix_sources(&sources, placements, Some(target))
}
