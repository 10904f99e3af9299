//! Two-stage diarization: sliding-window local results, per-window speaker
//! embeddings, centroid-linkage clustering and stitching, plus DER/JER
//! scoring and RTTM I/O. Times are integer milliseconds throughout.

mod cluster;
mod conversation;
mod pipeline;
mod rttm;

use indexmap::IndexMap;
use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{Error, Result};

pub use cluster::{ahc_centroid, Metric};
pub use conversation::{make_conversation, Conversation, ConversationConfig};
pub use pipeline::{
    cluster_and_stitch, embed_windows, oracle_local, slide_windows, stitch, tune,
    window_embeddings, window_spans, windows_from_local, ClusterParams, DiarizationMode,
    TrackEmbedding, Window, WindowResult, SHIFT_MS, WINDOW_MS,
};
pub use rttm::{read_local_rttm, read_rttm, write_local_rttm, write_rttm, LocalTurn};

/// Half-open `[start, end)` millisecond interval.
pub type Interval = (u64, u64);

/// Sorts and merges overlapping or touching intervals; drops empty ones.
pub fn normalize(mut iv: Vec<Interval>) -> Vec<Interval> {
    iv.retain(|(s, e)| e > s);
    iv.sort_unstable();
    let mut out: Vec<Interval> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

pub fn total_len(iv: &[Interval]) -> u64 {
    iv.iter().map(|(s, e)| e - s).sum()
}

/// Intersection of two normalized interval lists.
pub fn intersect(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if e > s {
            out.push((s, e));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Turn {
    pub file_id: String,
    pub onset_ms: u64,
    pub duration_ms: u64,
    pub speaker: String,
}

impl Turn {
    pub fn new(file_id: &str, onset_ms: u64, duration_ms: u64, speaker: &str) -> Result<Self> {
        if duration_ms == 0 {
            return Err(Error::InvalidInput("turn duration must be positive".into()));
        }
        Ok(Self {
            file_id: file_id.to_string(),
            onset_ms,
            duration_ms,
            speaker: speaker.to_string(),
        })
    }

    pub fn end_ms(&self) -> u64 {
        self.onset_ms + self.duration_ms
    }

    pub fn onset_s(&self) -> f64 {
        self.onset_ms as f64 / 1000.0
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ms as f64 / 1000.0
    }
}

/// Speaker turns, kept sorted by onset, then speaker and duration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Annotation {
    turns: Vec<Turn>,
}

impl Annotation {
    pub fn new(mut turns: Vec<Turn>) -> Self {
        turns.sort_by(|a, b| {
            (
                a.file_id.as_str(),
                a.onset_ms,
                a.speaker.as_str(),
                a.duration_ms,
            )
                .cmp(&(
                    b.file_id.as_str(),
                    b.onset_ms,
                    b.speaker.as_str(),
                    b.duration_ms,
                ))
        });
        Self { turns }
    }

    /// One turn per merged interval of each speaker.
    pub fn from_speaker_intervals(
        file_id: &str,
        speakers: &IndexMap<String, Vec<Interval>>,
    ) -> Self {
        let mut turns = Vec::new();
        for (spk, iv) in speakers {
            for (s, e) in normalize(iv.clone()) {
                turns.push(Turn {
                    file_id: file_id.to_string(),
                    onset_ms: s,
                    duration_ms: e - s,
                    speaker: spk.clone(),
                });
            }
        }
        Self::new(turns)
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn file_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.turns.iter().map(|t| t.file_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn for_file(&self, file_id: &str) -> Annotation {
        Annotation {
            turns: self
                .turns
                .iter()
                .filter(|t| t.file_id == file_id)
                .cloned()
                .collect(),
        }
    }

    /// Normalized activity per speaker, speakers in first-onset order.
    pub fn speaker_intervals(&self) -> IndexMap<String, Vec<Interval>> {
        let mut map: IndexMap<String, Vec<Interval>> = IndexMap::new();
        for t in &self.turns {
            map.entry(t.speaker.clone())
                .or_default()
                .push((t.onset_ms, t.end_ms()));
        }
        for v in map.values_mut() {
            *v = normalize(std::mem::take(v));
        }
        map
    }

    pub fn end_ms(&self) -> u64 {
        self.turns.iter().map(Turn::end_ms).max().unwrap_or(0)
    }

    /// Speech time with at least one, and with at least two, speakers.
    pub fn speech_and_overlap_ms(&self) -> (u64, u64) {
        let segs = elementary_counts(&speaker_sets(self), &[]);
        let speech = segs.iter().filter(|s| s.1 >= 1).map(|s| s.0).sum();
        let overlap = segs.iter().filter(|s| s.1 >= 2).map(|s| s.0).sum();
        (speech, overlap)
    }

    /// Percentage of speech time with overlapping speakers.
    pub fn overlap_ratio(&self) -> f64 {
        let (speech, overlap) = self.speech_and_overlap_ms();
        if speech == 0 {
            return 0.0;
        }
        100.0 * overlap as f64 / speech as f64
    }

    pub fn rename_speakers(&self, f: impl Fn(&str) -> String) -> Annotation {
        Annotation::new(
            self.turns
                .iter()
                .map(|t| Turn {
                    speaker: f(&t.speaker),
                    ..t.clone()
                })
                .collect(),
        )
    }
}

/// DER components in milliseconds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerBreakdown {
    pub reference_ms: u64,
    pub miss_ms: u64,
    pub false_alarm_ms: u64,
    pub confusion_ms: u64,
    /// Reference speaker index to mapped hypothesis speaker index.
    pub mapping: Vec<Option<usize>>,
}

impl DerBreakdown {
    pub fn der(&self) -> f64 {
        100.0 * (self.miss_ms + self.false_alarm_ms + self.confusion_ms) as f64
            / self.reference_ms as f64
    }
}

/// Overlap (ms) between every reference and hypothesis speaker.
pub fn overlap_matrix(r: &[Vec<Interval>], h: &[Vec<Interval>]) -> Vec<Vec<u64>> {
    r.iter()
        .map(|ri| h.iter().map(|hj| total_len(&intersect(ri, hj))).collect())
        .collect()
}

/// Speaker mapping maximizing total mapped overlap.
fn optimal_mapping(ov: &[Vec<u64>], n_hyp: usize) -> (u64, Vec<Option<usize>>) {
    let n_ref = ov.len();
    let n = n_ref.max(n_hyp);
    if n == 0 {
        return (0, Vec::new());
    }
    let m = Matrix::from_fn(n, n, |(i, j)| {
        if i < n_ref && j < n_hyp {
            ov[i][j] as i64
        } else {
            0
        }
    });
    let (total, assign) = kuhn_munkres(&m);
    let mapping = (0..n_ref)
        .map(|i| (assign[i] < n_hyp).then_some(assign[i]))
        .collect();
    (total as u64, mapping)
}

/// Scores with the given speaker mapping.
pub fn der_with_mapping(
    r: &[Vec<Interval>],
    h: &[Vec<Interval>],
    mapping: &[Option<usize>],
) -> Result<DerBreakdown> {
    let reference_ms: u64 = r.iter().map(|v| total_len(v)).sum();
    if reference_ms == 0 {
        return Err(Error::Empty("reference annotation"));
    }
    let correct: u64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| total_len(&intersect(&r[i], &h[j]))))
        .sum();
    let nr = elementary_counts(r, h);
    let (mut miss, mut fa, mut matched) = (0, 0, 0);
    for (d, a, b) in nr {
        miss += d * a.saturating_sub(b) as u64;
        fa += d * b.saturating_sub(a) as u64;
        matched += d * a.min(b) as u64;
    }
    Ok(DerBreakdown {
        reference_ms,
        miss_ms: miss,
        false_alarm_ms: fa,
        confusion_ms: matched - correct,
        mapping: mapping.to_vec(),
    })
}

/// `(duration, reference count, hypothesis count)` per elementary segment.
fn elementary_counts(r: &[Vec<Interval>], h: &[Vec<Interval>]) -> Vec<(u64, usize, usize)> {
    let all: Vec<Vec<Interval>> = r.iter().chain(h).cloned().collect();
    let mut bounds: Vec<u64> = all.iter().flatten().flat_map(|&(s, e)| [s, e]).collect();
    bounds.sort_unstable();
    bounds.dedup();
    let active = |set: &[Interval], t: u64| {
        let k = set.partition_point(|iv| iv.1 <= t);
        k < set.len() && set[k].0 <= t
    };
    bounds
        .windows(2)
        .map(|w| {
            let a = r.iter().filter(|s| active(s, w[0])).count();
            let b = h.iter().filter(|s| active(s, w[0])).count();
            (w[1] - w[0], a, b)
        })
        .collect()
}

fn speaker_sets(a: &Annotation) -> Vec<Vec<Interval>> {
    a.speaker_intervals().into_values().collect()
}

/// DER breakdown under the optimal one-to-one mapping, no collar, overlapped
/// speech scored.
pub fn der_breakdown(reference: &Annotation, hypothesis: &Annotation) -> Result<DerBreakdown> {
    let r = speaker_sets(reference);
    let h = speaker_sets(hypothesis);
    let (_, mapping) = optimal_mapping(&overlap_matrix(&r, &h), h.len());
    der_with_mapping(&r, &h, &mapping)
}

/// Diarization error rate in percent.
pub fn der(reference: &Annotation, hypothesis: &Annotation) -> Result<f64> {
    der_breakdown(reference, hypothesis).map(|b| b.der())
}

/// Jaccard error rate in percent under the DER mapping; unmapped reference
/// speakers count 100.
pub fn jer(reference: &Annotation, hypothesis: &Annotation) -> Result<f64> {
    let r = speaker_sets(reference);
    let h = speaker_sets(hypothesis);
    if r.iter().all(|v| v.is_empty()) {
        return Err(Error::Empty("reference annotation"));
    }
    let (_, mapping) = optimal_mapping(&overlap_matrix(&r, &h), h.len());
    let per: f64 = r
        .iter()
        .zip(&mapping)
        .map(|(ri, m)| match m {
            Some(j) => {
                let inter = total_len(&intersect(ri, &h[*j]));
                let union = total_len(ri) + total_len(&h[*j]) - inter;
                100.0 * (1.0 - inter as f64 / union as f64)
            }
            None => 100.0,
        })
        .sum();
    Ok(per / r.len() as f64)
}
