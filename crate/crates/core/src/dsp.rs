//! Audio ingestion, log-mel features and speech-activity channels.
//!
//! Features follow a fixed recipe: Hamming window, power spectrum, HTK-scale
//! triangular mel filters spanning 0 Hz to Nyquist, natural log with a floor.
//! No pre-emphasis and no per-utterance normalization is applied.
//!
//! Activity is always expressed on feature frames: one binary label per hop.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
/// Mel rows plus the target and non-target guide rows.
pub const GUIDED_DIM: usize = N_MELS + 2;
pub const HOP_S: f64 = 0.010;
pub const WIN_S: f64 = 0.025;
/// Hop and window lengths in samples at [`SAMPLE_RATE`].
pub const HOP_SAMPLES: usize = 160;
pub const WIN_SAMPLES: usize = 400;

/// Frames the default front end yields for `num_samples` at [`SAMPLE_RATE`].
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WIN_SAMPLES {
        0
    } else {
        1 + (num_samples - WIN_SAMPLES) / HOP_SAMPLES
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("audio clip"));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Reads a 16-bit PCM mono WAV file at 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected 16-bit integer PCM",
            path.display()
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedAudio(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples beyond [-1, 1] are clipped.
pub fn save_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Dense row-major feature grid; rows are feature dimensions, columns frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub frame_shift_s: f64,
    pub frame_width_s: f64,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "FeatureMatrix::new",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        if cols == 0 {
            return Err(Error::Empty("feature matrix"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature matrix has non-finite values".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            frame_shift_s: HOP_S,
            frame_width_s: WIN_S,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of frames.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Keeps the columns whose flag is set.
    pub fn select_columns(&self, keep: &[bool]) -> Result<FeatureMatrix> {
        if keep.len() != self.cols {
            return Err(Error::shape(
                "select_columns",
                format!("mask length {} vs {} frames", keep.len(), self.cols),
            ));
        }
        let cols = keep.iter().filter(|&&k| k).count();
        if cols == 0 {
            return Err(Error::Empty("column selection"));
        }
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(row.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v));
        }
        Ok(FeatureMatrix {
            rows: self.rows,
            cols,
            data,
            ..*self
        })
    }

    /// Columns `start..end`.
    pub fn slice_columns(&self, start: usize, end: usize) -> Result<FeatureMatrix> {
        if start >= end || end > self.cols {
            return Err(Error::InvalidInput(format!(
                "column range {start}..{end} outside 0..{}",
                self.cols
            )));
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(FeatureMatrix {
            rows: self.rows,
            cols,
            data,
            ..*self
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub win_s: f64,
    pub hop_s: f64,
    pub n_fft: usize,
    pub floor_eps: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            n_mels: N_MELS,
            win_s: WIN_S,
            hop_s: HOP_S,
            n_fft: 512,
            floor_eps: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter restricted to its nonzero FFT bins.
#[derive(Clone, Debug)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Reusable log-mel extractor (window, FFT plan and filterbank are cached).
#[derive(Clone)]
pub struct LogMel {
    cfg: LogMelConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

impl LogMel {
    pub fn new(cfg: LogMelConfig, sample_rate: u32) -> Result<Self> {
        let win = (cfg.win_s * sample_rate as f64).round() as usize;
        let hop = (cfg.hop_s * sample_rate as f64).round() as usize;
        if win == 0 || hop == 0 || cfg.n_mels == 0 {
            return Err(Error::Config("degenerate log-mel configuration".into()));
        }
        if cfg.n_fft < win {
            return Err(Error::Config(format!(
                "n_fft {} shorter than window {win}",
                cfg.n_fft
            )));
        }
        let window = (0..win)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win as f64 - 1.0)).cos()
            })
            .collect();
        let filters = mel_filterbank(cfg.n_mels, cfg.n_fft, sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            sample_rate,
            win,
            hop,
            window,
            filters,
            fft,
        })
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    pub fn win_samples(&self) -> usize {
        self.win
    }

    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.win).then(|| 1 + (num_samples - self.win) / self.hop)
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::UnsupportedAudio(format!(
                "clip rate {} Hz, extractor rate {} Hz",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        let samples = clip.samples();
        let frames = self.num_frames(samples.len()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "clip of {} samples is shorter than one window ({})",
                samples.len(),
                self.win
            ))
        })?;
        let n_mels = self.cfg.n_mels;
        let n_fft = self.cfg.n_fft;
        let mut out = vec![0.0; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        let log_floor = self.cfg.floor_eps.ln();
        for l in 0..frames {
            let start = l * self.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < self.win {
                    samples[start + i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let energy: f64 = filt
                    .weights
                    .iter()
                    .zip(&power[filt.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                out[m * frames + l] = if energy > self.cfg.floor_eps {
                    energy.ln()
                } else {
                    log_floor
                };
            }
        }
        FeatureMatrix::new(n_mels, frames, out)
    }
}

fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<MelFilter> {
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let weights: Vec<(usize, f64)> = (0..n_bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            let first_bin = weights.first().map_or(0, |(k, _)| *k);
            let mut dense = Vec::new();
            if let Some((last, _)) = weights.last() {
                dense = vec![0.0; last - first_bin + 1];
                for (k, w) in &weights {
                    dense[k - first_bin] = *w;
                }
            }
            MelFilter {
                first_bin,
                weights: dense,
            }
        })
        .collect()
}

/// One-shot log-mel extraction; prefer [`LogMel`] when processing many clips.
pub fn logmel(clip: &AudioClip, cfg: &LogMelConfig) -> Result<FeatureMatrix> {
    LogMel::new(cfg.clone(), clip.sample_rate())?.compute(clip)
}

/// Per-speaker binary activity on feature frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMatrix {
    speaker_ids: Vec<String>,
    rows: Vec<Vec<bool>>,
    cols: usize,
}

impl ActivityMatrix {
    pub fn new(speaker_ids: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("activity matrix"));
        }
        if speaker_ids.len() != rows.len() {
            return Err(Error::shape(
                "ActivityMatrix::new",
                format!("{} ids for {} rows", speaker_ids.len(), rows.len()),
            ));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ActivityMatrix::new", "ragged rows"));
        }
        Ok(Self {
            speaker_ids,
            rows,
            cols,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.rows.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn speaker_ids(&self) -> &[String] {
        &self.speaker_ids
    }

    pub fn row(&self, n: usize) -> &[bool] {
        &self.rows[n]
    }

    pub fn index_of(&self, speaker: &str) -> Option<usize> {
        self.speaker_ids.iter().position(|s| s == speaker)
    }

    /// Frames where any speaker is active.
    pub fn any_active(&self) -> Vec<bool> {
        (0..self.cols)
            .map(|l| self.rows.iter().any(|r| r[l]))
            .collect()
    }

    pub fn select_columns(&self, keep: &[bool]) -> Result<ActivityMatrix> {
        if keep.len() != self.cols {
            return Err(Error::shape(
                "ActivityMatrix::select_columns",
                "mask length",
            ));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .collect()
            })
            .collect();
        ActivityMatrix::new(self.speaker_ids.clone(), rows)
    }

    pub fn slice_columns(&self, start: usize, end: usize) -> Result<ActivityMatrix> {
        if start > end || end > self.cols {
            return Err(Error::InvalidInput("activity column range".into()));
        }
        let rows = self.rows.iter().map(|r| r[start..end].to_vec()).collect();
        ActivityMatrix::new(self.speaker_ids.clone(), rows)
    }

    /// Sidecar text: `speaker_id<TAB>bits` per speaker.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for (id, row) in self.speaker_ids.iter().zip(&self.rows) {
            let bits: String = row.iter().map(|&b| if b { '1' } else { '0' }).collect();
            let _ = writeln!(out, "{id}\t{bits}");
        }
        out
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, bits) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected speaker_id<TAB>bits".into(),
            })?;
            let row = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Parse {
                        line: i + 1,
                        msg: format!("invalid activity character {other:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            ids.push(id.to_string());
            rows.push(row);
        }
        ActivityMatrix::new(ids, rows)
    }

    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

/// Frames where some speaker other than `target` is active.
pub fn union_nontarget(acts: &ActivityMatrix, target: usize) -> Result<Vec<bool>> {
    if target >= acts.num_speakers() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: acts.num_speakers(),
        });
    }
    let mut out = vec![false; acts.cols()];
    for (n, row) in acts.rows.iter().enumerate() {
        if n == target {
            continue;
        }
        for (o, &z) in out.iter_mut().zip(row) {
            *o |= z;
        }
    }
    Ok(out)
}

/// Appends the target and non-target rows to an 80-row mel matrix.
pub fn guide_concat(
    feat: &FeatureMatrix,
    z_target: &[bool],
    z_nontarget: &[bool],
) -> Result<FeatureMatrix> {
    let l = feat.cols();
    if z_target.len() != l || z_nontarget.len() != l {
        return Err(Error::shape(
            "guide_concat",
            format!(
                "{l} frames vs activity lengths {} and {}",
                z_target.len(),
                z_nontarget.len()
            ),
        ));
    }
    if feat.rows() != N_MELS {
        return Err(Error::shape(
            "guide_concat",
            format!("expected {N_MELS} mel rows, got {}", feat.rows()),
        ));
    }
    let mut data = Vec::with_capacity(GUIDED_DIM * l);
    data.extend_from_slice(feat.data());
    data.extend(z_target.iter().map(|&z| if z { 1.0 } else { 0.0 }));
    data.extend(z_nontarget.iter().map(|&z| if z { 1.0 } else { 0.0 }));
    Ok(FeatureMatrix {
        rows: GUIDED_DIM,
        cols: l,
        data,
        frame_shift_s: feat.frame_shift_s,
        frame_width_s: feat.frame_width_s,
    })
}

/// Drops the guide rows of an 82-row matrix.
pub fn strip_guides(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    if feat.rows() != GUIDED_DIM {
        return Err(Error::shape(
            "strip_guides",
            format!("expected {GUIDED_DIM} rows, got {}", feat.rows()),
        ));
    }
    Ok(FeatureMatrix {
        rows: N_MELS,
        cols: feat.cols,
        data: feat.data[..N_MELS * feat.cols].to_vec(),
        frame_shift_s: feat.frame_shift_s,
        frame_width_s: feat.frame_width_s,
    })
}

/// Maps frame activity of length `L` onto `t_len` encoder steps:
/// `out[t] = z[clamp(round(L*t/T), 1, L)]` with 1-based indices, rounding
/// halves up.
pub fn downsample_activity(z: &[bool], t_len: usize) -> Vec<bool> {
    let l = z.len();
    if l == 0 || t_len == 0 {
        return Vec::new();
    }
    (1..=t_len)
        .map(|t| {
            let idx = (2 * l * t + t_len) / (2 * t_len);
            z[idx.clamp(1, l) - 1]
        })
        .collect()
}

/// Frame activity from sample intervals `[start, end)`: a frame is active when
/// at least half of its hop interval is covered.
pub fn activity_from_intervals(
    intervals: &[(usize, usize)],
    frames: usize,
    hop: usize,
) -> Vec<bool> {
    let mut covered = vec![0usize; frames];
    let mut merged: Vec<(usize, usize)> =
        intervals.iter().copied().filter(|(s, e)| e > s).collect();
    merged.sort_unstable();
    let mut union: Vec<(usize, usize)> = Vec::new();
    for (s, e) in merged {
        match union.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => union.push((s, e)),
        }
    }
    for (s, e) in union {
        let first = s / hop;
        let last = ((e - 1) / hop).min(frames.saturating_sub(1));
        for (l, c) in covered.iter_mut().enumerate().take(last + 1).skip(first) {
            let lo = (l * hop).max(s);
            let hi = ((l + 1) * hop).min(e);
            if hi > lo {
                *c += hi - lo;
            }
        }
    }
    covered.into_iter().map(|c| 2 * c >= hop).collect()
}

/// Concatenates the waveform regions of the frames whose flag is set.
/// Frame `l` contributes samples `[l*hop, (l+1)*hop)`.
pub fn gather_frames(clip: &AudioClip, keep: &[bool], hop: usize) -> Result<AudioClip> {
    let samples = clip.samples();
    let mut out = Vec::new();
    for (l, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let s = l * hop;
        if s >= samples.len() {
            break;
        }
        let e = ((l + 1) * hop).min(samples.len());
        out.extend_from_slice(&samples[s..e]);
    }
    AudioClip::new(out, clip.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> AudioClip {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| {
                (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                    as f32
            })
            .collect();
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_has_98_frames() {
        let feat = logmel(&tone(440.0, 1.0), &LogMelConfig::default()).unwrap();
        assert_eq!(feat.rows(), 80);
        assert_eq!(feat.cols(), 98);
    }

    #[test]
    fn silence_hits_floor() {
        let clip = AudioClip::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let feat = logmel(&clip, &LogMelConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(feat.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.1; 399], SAMPLE_RATE).unwrap();
        assert!(logmel(&clip, &LogMelConfig::default()).is_err());
    }

    #[test]
    fn tone_peak_matches_direct_dft() {
        let clip = tone(1000.0, 0.5);
        let feat = logmel(&clip, &LogMelConfig::default()).unwrap();
        // Oracle: naive DFT of the first windowed frame, projected on the filters.
        let win = 400;
        let n_fft = 512;
        let frame: Vec<f64> = (0..win)
            .map(|n| {
                let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / 399.0).cos();
                clip.samples()[n] as f64 * w
            })
            .collect();
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let filters = mel_filterbank(80, n_fft, SAMPLE_RATE);
        let energies: Vec<f64> = filters
            .iter()
            .map(|f| {
                f.weights
                    .iter()
                    .zip(&power[f.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect();
        let oracle_peak = argmax(&energies);
        for l in 0..feat.cols() {
            let col: Vec<f64> = (0..80).map(|m| feat.get(m, l)).collect();
            assert_eq!(argmax(&col), oracle_peak, "frame {l}");
        }
        for (m, e) in energies.iter().enumerate() {
            assert!((feat.get(m, 0) - e.max(1e-10).ln()).abs() < 1e-8);
        }
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn wav_round_trip_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        for _ in 0..15999 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.len(), 16000);
        assert_eq!(clip.sample_rate(), 16000);
        assert!((clip.samples()[0] - 32767.0 / 32768.0).abs() < 1e-7);
        assert!(clip.samples()[1..].iter().all(|&s| s == 0.0));

        let out = dir.path().join("b.wav");
        save_wav(&out, &clip).unwrap();
        assert_eq!(load_wav(&out).unwrap(), clip);
    }

    #[test]
    fn wav_rejects_stereo_and_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        for (channels, rate) in [(2u16, 16000u32), (1, 8000)] {
            let path = dir.path().join(format!("{channels}_{rate}.wav"));
            let spec = hound::WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..800 {
                w.write_sample(0i16).unwrap();
            }
            w.finalize().unwrap();
            assert!(matches!(load_wav(&path), Err(Error::UnsupportedAudio(_))));
        }
        assert!(matches!(
            load_wav(dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
    }

    fn acts(rows: &[&[u8]]) -> ActivityMatrix {
        ActivityMatrix::new(
            (0..rows.len()).map(|i| format!("s{i}")).collect(),
            rows.iter()
                .map(|r| r.iter().map(|&b| b == 1).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn union_nontarget_examples() {
        let single = acts(&[&[1, 0, 1]]);
        assert_eq!(union_nontarget(&single, 0).unwrap(), vec![false; 3]);
        let three = acts(&[&[1, 1, 0], &[0, 1, 1], &[0, 0, 1]]);
        assert_eq!(union_nontarget(&three, 0).unwrap(), vec![false, true, true]);
        let full = acts(&[&[1, 1], &[1, 1]]);
        assert_eq!(union_nontarget(&full, 1).unwrap(), vec![true, true]);
        assert!(matches!(
            union_nontarget(&three, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn guide_concat_places_rows() {
        let feat = FeatureMatrix::new(80, 2, (0..160).map(|v| v as f64).collect()).unwrap();
        let g = guide_concat(&feat, &[true, false], &[false, true]).unwrap();
        assert_eq!(g.rows(), 82);
        assert_eq!(g.row(80), &[1.0, 0.0]);
        assert_eq!(g.row(81), &[0.0, 1.0]);
        assert_eq!(strip_guides(&g).unwrap(), feat);
        assert!(guide_concat(&feat, &[true], &[false, true]).is_err());
    }

    #[test]
    fn downsample_examples() {
        let z = [true, false, true, false];
        assert_eq!(downsample_activity(&z, 4), z.to_vec());
        assert_eq!(
            downsample_activity(&[true, true, false, false], 2),
            vec![true, false]
        );
        assert_eq!(downsample_activity(&[true; 7], 3), vec![true; 3]);
    }

    #[test]
    fn half_coverage_rule() {
        // hop 160: [0,80) covers exactly half of frame 0; [400,470) covers 70 of frame 2.
        let z = activity_from_intervals(&[(0, 80), (400, 470)], 4, 160);
        assert_eq!(z, vec![true, false, false, false]);
        let z = activity_from_intervals(&[(100, 500)], 4, 160);
        assert_eq!(z, vec![false, true, true, false]);
    }

    #[test]
    fn sidecar_round_trip() {
        let a = acts(&[&[1, 0, 1], &[0, 1, 1]]);
        let text = a.to_sidecar();
        assert_eq!(text, "s0\t101\ns1\t011\n");
        assert_eq!(ActivityMatrix::from_sidecar(&text).unwrap(), a);
        assert!(ActivityMatrix::from_sidecar("s0\t10x\n").is_err());
        assert!(ActivityMatrix::from_sidecar("s0\t10\ns1\t1\n").is_err());
    }
}
