use indexmap::IndexMap;
use rayon::prelude::*;

use crate::dsp::{activity_from_intervals, frame_count, ActivityMatrix, AudioClip, HOP_SAMPLES};
use crate::error::{Error, Result};
use crate::model::Extractor;
use crate::verification::{segment_select, SelectionPolicy};

use super::{
    ahc_centroid, der, intersect, normalize, Annotation, Interval, LocalTurn, Metric, Turn,
};

pub const WINDOW_MS: u64 = 10_000;
pub const SHIFT_MS: u64 = 1_000;

const SAMPLES_PER_MS: u64 = 16;

/// A local-diarization window: each track's activity clipped to the window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start_ms: u64,
    pub end_ms: u64,
    pub tracks: Vec<(String, Vec<Interval>)>,
}

/// Spans of `WINDOW_MS` every `SHIFT_MS`. A file no longer than one window
/// gets a single window; when the last regular window stops short of the end
/// a final window is aligned to the end.
pub fn window_spans(duration_ms: u64) -> Vec<Interval> {
    let mut spans = Vec::new();
    if duration_ms <= WINDOW_MS {
        spans.push((0, duration_ms));
    } else {
        let mut s = 0;
        while s + WINDOW_MS <= duration_ms {
            spans.push((s, s + WINDOW_MS));
            s += SHIFT_MS;
        }
        if spans.last().map(|w| w.1) != Some(duration_ms) {
            spans.push((duration_ms - WINDOW_MS, duration_ms));
        }
    }
    spans
}

/// Every window of the file, listing the tracks with speech inside it.
pub fn slide_windows(local: &Annotation, duration_ms: u64) -> Vec<Window> {
    let tracks = local.speaker_intervals();
    window_spans(duration_ms)
        .into_iter()
        .map(|(s, e)| Window {
            start_ms: s,
            end_ms: e,
            tracks: tracks
                .iter()
                .filter_map(|(label, iv)| {
                    let clipped = intersect(iv, &[(s, e)]);
                    (!clipped.is_empty()).then(|| (label.clone(), clipped))
                })
                .collect(),
        })
        .collect()
}

/// Windows from externally supplied per-window local results, indexed as in
/// [`window_spans`]. Local labels are scoped to their window.
pub fn windows_from_local(turns: &[LocalTurn], duration_ms: u64) -> Result<Vec<Window>> {
    let spans = window_spans(duration_ms);
    let mut by_window: IndexMap<usize, IndexMap<String, Vec<Interval>>> = IndexMap::new();
    for t in turns {
        if t.window >= spans.len() {
            return Err(Error::IndexOutOfRange {
                index: t.window,
                len: spans.len(),
            });
        }
        by_window
            .entry(t.window)
            .or_default()
            .entry(format!("w{}:{}", t.window, t.turn.speaker))
            .or_default()
            .push((t.turn.onset_ms, t.turn.end_ms()));
    }
    by_window.sort_keys();
    Ok(by_window
        .into_iter()
        .map(|(w, tracks)| {
            let (s, e) = spans[w];
            Window {
                start_ms: s,
                end_ms: e,
                tracks: tracks
                    .into_iter()
                    .filter_map(|(l, iv)| {
                        let clipped = intersect(&normalize(iv), &[(s, e)]);
                        (!clipped.is_empty()).then_some((l, clipped))
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Local results for every window of `reference`, as an oracle local
/// diarizer would produce them.
pub fn oracle_local(reference: &Annotation, duration_ms: u64) -> Vec<LocalTurn> {
    let file_id = reference.turns().first().map_or("", |t| t.file_id.as_str());
    let mut out = Vec::new();
    for (w, win) in slide_windows(reference, duration_ms)
        .into_iter()
        .enumerate()
    {
        for (speaker, iv) in win.tracks {
            for (a, b) in iv {
                out.push(LocalTurn {
                    window: w,
                    turn: Turn::new(file_id, a, b - a, &speaker)
                        .expect("clipped intervals are non-empty"),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiarizationMode {
    /// Unguided model on each speaker's single-speaker frames.
    BaselineSolo,
    /// Guided model on the window's speech frames with all activities.
    Guided,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackEmbedding {
    pub label: String,
    pub intervals: Vec<Interval>,
    /// `None` when the track has no active frame at feature resolution.
    pub embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowResult {
    pub start_ms: u64,
    pub end_ms: u64,
    pub tracks: Vec<TrackEmbedding>,
}

fn skip_silent(r: Result<Vec<f64>>) -> Result<Option<Vec<f64>>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyTargetActivity) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One embedding per track of `window`.
pub fn window_embeddings(
    ex: &Extractor,
    clip: &AudioClip,
    window: &Window,
    mode: DiarizationMode,
) -> Result<WindowResult> {
    if (mode == DiarizationMode::Guided) == ex.mode().is_baseline() {
        return Err(Error::Config(format!(
            "{mode:?} diarization does not match the checkpoint"
        )));
    }
    let s0 = (window.start_ms * SAMPLES_PER_MS) as usize;
    let s1 = ((window.end_ms * SAMPLES_PER_MS) as usize).min(clip.len());
    let seg = AudioClip::new(clip.samples()[s0.min(s1)..s1].to_vec(), clip.sample_rate())?;
    let frames = frame_count(seg.len());
    let mut tracks: Vec<TrackEmbedding> = window
        .tracks
        .iter()
        .map(|(label, iv)| TrackEmbedding {
            label: label.clone(),
            intervals: iv.clone(),
            embedding: None,
        })
        .collect();
    if frames == 0 || tracks.is_empty() {
        return Ok(WindowResult {
            start_ms: window.start_ms,
            end_ms: window.end_ms,
            tracks,
        });
    }
    let rows = window
        .tracks
        .iter()
        .map(|(_, iv)| {
            let local: Vec<(usize, usize)> = iv
                .iter()
                .map(|&(s, e)| {
                    (
                        ((s - window.start_ms) * SAMPLES_PER_MS) as usize,
                        ((e - window.start_ms) * SAMPLES_PER_MS) as usize,
                    )
                })
                .collect();
            activity_from_intervals(&local, frames, HOP_SAMPLES)
        })
        .collect();
    let acts = ActivityMatrix::new(window.tracks.iter().map(|t| t.0.clone()).collect(), rows)?;
    match mode {
        DiarizationMode::BaselineSolo => {
            for (n, t) in tracks.iter_mut().enumerate() {
                t.embedding = skip_silent(
                    segment_select(&acts, n, SelectionPolicy::SoloOnly)
                        .and_then(|keep| crate::verification::embed_frames(ex, &seg, &keep)),
                )?;
            }
        }
        DiarizationMode::Guided => {
            let keep = acts.any_active();
            if keep.iter().any(|&k| k) {
                let mel = ex.features(&seg)?.select_columns(&keep)?;
                let speech = acts.select_columns(&keep)?;
                for (n, t) in tracks.iter_mut().enumerate() {
                    t.embedding = skip_silent(ex.embed_features(&mel, Some((&speech, n))))?;
                }
            }
        }
    }
    Ok(WindowResult {
        start_ms: window.start_ms,
        end_ms: window.end_ms,
        tracks,
    })
}

/// Embeds every window, in parallel over windows.
pub fn embed_windows(
    ex: &Extractor,
    clip: &AudioClip,
    windows: &[Window],
    mode: DiarizationMode,
) -> Result<Vec<WindowResult>> {
    windows
        .par_iter()
        .map(|w| window_embeddings(ex, clip, w, mode))
        .collect()
}

/// Emits each track under its global label. Where windows embedding the same
/// track disagree, each stretch between window boundaries takes the majority
/// label of the windows covering it, ties going to the smaller label.
/// `labels` holds one entry per embedded track, in window order.
pub fn stitch(results: &[WindowResult], labels: &[usize], file_id: &str) -> Result<Annotation> {
    let embedded = results
        .iter()
        .flat_map(|r| &r.tracks)
        .filter(|t| t.embedding.is_some())
        .count();
    if embedded != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{embedded} embedded tracks but {} labels",
            labels.len()
        )));
    }
    // Per track: its activity and the (window span, label) votes.
    let mut tracks: IndexMap<&str, (Vec<Interval>, Vec<(u64, u64, usize)>)> = IndexMap::new();
    let mut next = labels.iter();
    for r in results {
        for t in &r.tracks {
            let entry = tracks.entry(&t.label).or_default();
            entry.0.extend_from_slice(&t.intervals);
            if t.embedding.is_some() {
                let l = *next.next().expect("counted above");
                entry.1.push((r.start_ms, r.end_ms, l));
            }
        }
    }
    let mut out: IndexMap<String, Vec<Interval>> = IndexMap::new();
    for (_, (iv, votes)) in tracks {
        let iv = normalize(iv);
        let mut bounds: Vec<u64> = votes.iter().flat_map(|v| [v.0, v.1]).collect();
        bounds.sort_unstable();
        bounds.dedup();
        for b in bounds.windows(2) {
            let mut counts: IndexMap<usize, usize> = IndexMap::new();
            for v in votes.iter().filter(|v| v.0 <= b[0] && v.1 >= b[1]) {
                *counts.entry(v.2).or_default() += 1;
            }
            let Some((&label, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            else {
                continue;
            };
            let part = intersect(&iv, &[(b[0], b[1])]);
            out.entry(format!("S{label}")).or_default().extend(part);
        }
    }
    Ok(Annotation::from_speaker_intervals(file_id, &out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// Largest cosine distance at which clusters still merge.
    pub threshold: f64,
    pub min_cluster_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_cluster_size: 1,
        }
    }
}

/// Clusters all embedded tracks of a file and stitches the result.
pub fn cluster_and_stitch(
    results: &[WindowResult],
    params: &ClusterParams,
    file_id: &str,
) -> Result<Annotation> {
    let embs: Vec<Vec<f64>> = results
        .iter()
        .flat_map(|r| &r.tracks)
        .filter_map(|t| t.embedding.clone())
        .collect();
    let labels = ahc_centroid(
        &embs,
        params.threshold,
        params.min_cluster_size,
        Metric::Cosine,
    );
    stitch(results, &labels, file_id)
}

/// Grid search for the parameters with the lowest mean DER over `dev`.
///
/// Small dev sets often reach the best DER over a whole run of thresholds.
/// The longest such run wins (then the smaller minimum size), and its middle
/// threshold is returned, the lower one for even lengths.
pub fn tune(
    dev: &[(Vec<WindowResult>, Annotation)],
    thresholds: &[f64],
    min_sizes: &[usize],
) -> Result<(ClusterParams, f64)> {
    if dev.is_empty() {
        return Err(Error::Empty("development set"));
    }
    if thresholds.is_empty() || min_sizes.is_empty() {
        return Err(Error::Empty("tuning grid"));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    let mut ms = min_sizes.to_vec();
    ms.sort_unstable();
    let mut grid = Vec::with_capacity(ms.len());
    for &min_cluster_size in &ms {
        let mut row = Vec::with_capacity(ts.len());
        for &threshold in &ts {
            let p = ClusterParams {
                threshold,
                min_cluster_size,
            };
            let mut total = 0.0;
            for (results, reference) in dev {
                let hyp = cluster_and_stitch(results, &p, "dev")?;
                total += der(reference, &hyp)?;
            }
            row.push(total / dev.len() as f64);
        }
        grid.push(row);
    }
    let best = grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    // (run length, min-size index, run start)
    let mut pick: Option<(usize, usize, usize)> = None;
    for (m, row) in grid.iter().enumerate() {
        let mut i = 0;
        while i < row.len() {
            if row[i] != best {
                i += 1;
                continue;
            }
            let start = i;
            while i < row.len() && row[i] == best {
                i += 1;
            }
            if pick.is_none_or(|(len, _, _)| i - start > len) {
                pick = Some((i - start, m, start));
            }
        }
    }
    let (len, m, start) = pick.expect("grid is non-empty");
    let p = ClusterParams {
        threshold: ts[start + (len - 1) / 2],
        min_cluster_size: ms[m],
    };
    Ok((p, best))
}
