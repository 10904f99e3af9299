use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mixture::{crop_circular, Corpus, Utterance};

use super::{Annotation, Interval};

/// Turn-taking recipe for synthetic conversations. Times are drawn on a
/// 10 ms grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationConfig {
    pub speakers: usize,
    pub duration_s: f64,
    pub turn_min_s: f64,
    pub turn_max_s: f64,
    /// Chance that a turn starts before the previous one ends.
    pub overlap_prob: f64,
    pub overlap_min_s: f64,
    pub overlap_max_s: f64,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self {
            speakers: 3,
            duration_s: 30.0,
            turn_min_s: 1.5,
            turn_max_s: 4.0,
            overlap_prob: 0.5,
            overlap_min_s: 0.5,
            overlap_max_s: 1.5,
            gap_min_s: 0.1,
            gap_max_s: 0.5,
        }
    }
}

impl ConversationConfig {
    pub fn without_overlap() -> Self {
        Self {
            overlap_prob: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub clip: AudioClip,
    pub reference: Annotation,
}

fn draw_cs(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> u64 {
    let (a, b) = ((lo * 100.0).round() as u64, (hi * 100.0).round() as u64);
    rng.gen_range(a..=b.max(a))
}

/// A conversation among `cfg.speakers` distinct speakers of `corpus`. Each
/// turn goes to a different speaker than the previous one and is cut from a
/// random utterance; a turn may overlap only the turn right before it.
pub fn make_conversation(
    corpus: &Corpus,
    cfg: &ConversationConfig,
    file_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Conversation> {
    if cfg.speakers < 2 || corpus.num_speakers() < cfg.speakers {
        return Err(Error::InvalidInput(format!(
            "need at least 2 and at most {} speakers",
            corpus.num_speakers()
        )));
    }
    if !(cfg.turn_min_s > 0.0
        && cfg.turn_min_s <= cfg.turn_max_s
        && cfg.duration_s > cfg.turn_min_s)
    {
        return Err(Error::InvalidInput(
            "bad turn or conversation length".into(),
        ));
    }
    let group: Vec<usize> = sample(rng, corpus.num_speakers(), cfg.speakers).into_vec();
    let total_cs = (cfg.duration_s * 100.0).round() as u64;
    let mut out = vec![0.0f32; total_cs as usize * 160];
    let mut acts: IndexMap<String, Vec<Interval>> = IndexMap::new();
    for &k in &group {
        acts.insert(corpus.speakers()[k].clone(), Vec::new());
    }
    // (start, end, group slot) of the last two turns, in centiseconds.
    let mut prev: Option<(u64, u64, usize)> = None;
    let mut second_end = 0u64;
    loop {
        let slot = match prev {
            None => rng.gen_range(0..group.len()),
            Some((_, _, p)) => (p + rng.gen_range(1..group.len())) % group.len(),
        };
        let len = draw_cs(rng, cfg.turn_min_s, cfg.turn_max_s);
        let start = match prev {
            None => draw_cs(rng, 0.0, cfg.gap_max_s),
            Some((ps, pe, _)) => {
                if rng.gen::<f64>() < cfg.overlap_prob {
                    let ov = draw_cs(rng, cfg.overlap_min_s, cfg.overlap_max_s).min((pe - ps) / 2);
                    (pe - ov).max(second_end)
                } else {
                    pe + draw_cs(rng, cfg.gap_min_s, cfg.gap_max_s)
                }
            }
        };
        if start + 50 >= total_cs {
            break;
        }
        let end = (start + len).min(total_cs);
        let k = group[slot];
        let utts: Vec<&Utterance> = corpus.of_speaker(k).collect();
        let u = utts[rng.gen_range(0..utts.len())];
        let offset = rng.gen_range(0..u.clip.len().max(1));
        let n = (end - start) as usize * 160;
        let crop = crop_circular(u.clip.samples(), offset, n);
        for (o, s) in out[start as usize * 160..].iter_mut().zip(&crop) {
            *o += s;
        }
        acts[slot].push((start * 10, end * 10));
        second_end = prev.map_or(0, |p| p.1);
        prev = Some((start, end, slot));
        if end >= total_cs {
            break;
        }
    }
    acts.retain(|_, v| !v.is_empty());
    Ok(Conversation {
        clip: AudioClip::new(out, SAMPLE_RATE)?,
        reference: Annotation::from_speaker_intervals(file_id, &acts),
    })
}
