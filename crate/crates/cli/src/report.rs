//! Mixture statistics and attention strips.
//!
//! CSV files are the artifacts; each SVG is drawn from its CSV after it has
//! been written.
//!
//! | file | columns |
//! |------|---------|
//! | `mixtures.csv` | `mixture,overlap,solo_s` |
//! | `overlap_hist.csv` | `lower,upper,count`; the last row `100,100` counts fully overlapped targets |
//! | `solo_hist.csv` | `lower_s,upper_s,count` in 0.5 s bins |
//! | `attention.csv` | `mixture,frame,target,nontarget,weight` |

use std::fmt::Write as _;
use std::path::Path;

use gse_core::dsp::{load_wav, union_nontarget, ActivityMatrix, HOP_S, SAMPLE_RATE};
use gse_core::mixture::{overlap_ratio, read_manifest, single_speaker_duration};
use gse_core::model::{load_checkpoint, Extractor};
use gse_core::{Error, Result};

const SOLO_BIN_S: f64 = 0.5;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn num(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::InvalidInput(format!("bad number {s:?} in report CSV")))
}

/// Counts per 10 % bin, plus a final bin for exactly 100 %.
pub fn overlap_histogram(overlaps: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut bins: Vec<(f64, f64, usize)> = (0..10)
        .map(|b| (10.0 * b as f64, 10.0 * (b + 1) as f64, 0))
        .collect();
    bins.push((100.0, 100.0, 0));
    for &o in overlaps {
        let b = if o >= 100.0 {
            10
        } else {
            ((o / 10.0) as usize).min(9)
        };
        bins[b].2 += 1;
    }
    bins
}

pub fn solo_histogram(solo_s: &[f64]) -> Vec<(f64, f64, usize)> {
    let max = solo_s.iter().copied().fold(0.0, f64::max);
    let n = ((max / SOLO_BIN_S).floor() as usize + 1).max(1);
    let mut bins: Vec<(f64, f64, usize)> = (0..n)
        .map(|b| (SOLO_BIN_S * b as f64, SOLO_BIN_S * (b + 1) as f64, 0))
        .collect();
    for &s in solo_s {
        bins[((s / SOLO_BIN_S).floor() as usize).min(n - 1)].2 += 1;
    }
    bins
}

fn histogram_csv(header: &str, bins: &[(f64, f64, usize)]) -> String {
    let mut s = format!("{header}\n");
    for (lo, hi, c) in bins {
        let _ = writeln!(s, "{lo},{hi},{c}");
    }
    s
}

fn bar_svg(title: &str, rows: &[Vec<String>]) -> Result<String> {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let counts: Vec<f64> = rows.iter().map(|r| num(&r[2])).collect::<Result<_>>()?;
    let max = counts.iter().copied().fold(1.0, f64::max);
    let bw = (w - 2.0 * pad) / counts.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"14\">{title}</text>\n"
    );
    for (i, (row, c)) in rows.iter().zip(&counts).enumerate() {
        let bh = (h - 2.0 * pad) * c / max;
        let x = pad + bw * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"steelblue\"/>",
            h - pad - bh,
            bw - 2.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"9\">{}</text>",
            h - pad + 12.0,
            row[0]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn strips_svg(rows: &[Vec<String>]) -> Result<String> {
    let mut by_mix: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    for r in rows {
        let v = [num(&r[2])?, num(&r[3])?, num(&r[4])?];
        match by_mix.last_mut() {
            Some((m, frames)) if *m == r[0] => frames.push(v),
            _ => by_mix.push((r[0].clone(), vec![v])),
        }
    }
    let (w, strip, gap) = (800.0, 12.0, 30.0);
    let h = by_mix.len() as f64 * (3.0 * strip + gap) + 10.0;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for (k, (m, frames)) in by_mix.iter().enumerate() {
        let y0 = 10.0 + k as f64 * (3.0 * strip + gap);
        let _ = writeln!(
            s,
            "<text x=\"0\" y=\"{:.1}\" font-size=\"10\">{m}</text>",
            y0 + 8.0
        );
        let peak = frames
            .iter()
            .map(|f| f[2])
            .fold(f64::MIN_POSITIVE, f64::max);
        let fw = (w - 80.0) / frames.len().max(1) as f64;
        for (t, f) in frames.iter().enumerate() {
            let x = 80.0 + fw * t as f64;
            for (row, (value, color)) in [
                (f[0], "seagreen"),
                (f[1], "firebrick"),
                (f[2] / peak, "navy"),
            ]
            .into_iter()
            .enumerate()
            {
                if value > 0.0 {
                    let _ = writeln!(
                        s,
                        "<rect x=\"{x:.2}\" y=\"{:.1}\" width=\"{:.2}\" height=\"{strip}\" fill=\"{color}\" fill-opacity=\"{value:.3}\"/>",
                        y0 + row as f64 * strip,
                        fw.max(0.5)
                    );
                }
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

pub fn report(
    manifest: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    strips: usize,
) -> Result<String> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    std::fs::create_dir_all(out).map_err(io(out))?;
    let ex = checkpoint
        .map(|p| Extractor::new(load_checkpoint(p)?, SAMPLE_RATE))
        .transpose()?;
    let mut table = String::from("mixture,overlap,solo_s\n");
    let mut attention = String::from("mixture,frame,target,nontarget,weight\n");
    let (mut overlaps, mut solos) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        let acts = ActivityMatrix::read_sidecar(base.join(&r.activity_path))?;
        let n = acts.index_of(&r.target_speaker).ok_or_else(|| {
            Error::InvalidInput(format!("{}: target not in activity", r.mixture_id))
        })?;
        let o = overlap_ratio(&acts, n)?;
        let solo = single_speaker_duration(&acts, n, HOP_S)?;
        let _ = writeln!(table, "{},{o:.4},{solo:.2}", r.mixture_id);
        overlaps.push(o);
        solos.push(solo);
        if let Some(ex) = ex.as_ref().filter(|_| i < strips) {
            let mel = ex.features(&load_wav(base.join(&r.wav_path))?)?;
            let acts = acts.slice_columns(0, mel.cols().min(acts.cols()))?;
            let mel = mel.slice_columns(0, acts.cols())?;
            let (_, a) = ex.embed_features_with_attention(&mel, Some((&acts, n)))?;
            let nt = union_nontarget(&acts, n)?;
            for t in 0..a.cols() {
                let w: f64 = (0..a.rows())
                    .map(|d| a.data()[d * a.cols() + t])
                    .sum::<f64>()
                    / a.rows() as f64;
                let _ = writeln!(
                    attention,
                    "{},{t},{},{},{w:.6e}",
                    r.mixture_id,
                    u8::from(acts.row(n)[t]),
                    u8::from(nt[t])
                );
            }
        }
    }
    write(&out.join("mixtures.csv"), &table)?;
    let oh = out.join("overlap_hist.csv");
    write(
        &oh,
        &histogram_csv("lower,upper,count", &overlap_histogram(&overlaps)),
    )?;
    write(
        &out.join("overlap_hist.svg"),
        &bar_svg("Target overlap ratio (%)", &read_csv(&oh)?)?,
    )?;
    let sh = out.join("solo_hist.csv");
    write(
        &sh,
        &histogram_csv("lower_s,upper_s,count", &solo_histogram(&solos)),
    )?;
    write(
        &out.join("solo_hist.svg"),
        &bar_svg("Single-speaker duration of target (s)", &read_csv(&sh)?)?,
    )?;
    if ex.is_some() {
        let ap = out.join("attention.csv");
        write(&ap, &attention)?;
        write(&out.join("attention.svg"), &strips_svg(&read_csv(&ap)?)?)?;
    }
    let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    let full = overlaps.iter().filter(|&&o| o >= 100.0).count();
    Ok(format!(
        "mixtures={} mean_overlap={mean:.2} full_overlap={full}",
        records.len()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histograms_count_every_item() {
        let o = [0.0, 9.99, 10.0, 55.0, 99.9, 100.0, 100.0];
        let h = overlap_histogram(&o);
        assert_eq!(h.len(), 11);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), o.len());
        assert_eq!((h[0].2, h[1].2, h[5].2, h[9].2, h[10].2), (2, 1, 1, 1, 2));
        let s = solo_histogram(&[0.0, 0.49, 0.5, 2.2]);
        assert_eq!(s.len(), 5);
        assert_eq!(
            s.iter().map(|b| b.2).collect::<Vec<_>>(),
            vec![2, 1, 0, 0, 1]
        );
        assert_eq!(solo_histogram(&[]).len(), 1);
    }

    #[test]
    fn svg_has_one_bar_per_row() {
        let rows = vec![
            vec!["0".to_string(), "10".to_string(), "3".to_string()],
            vec!["10".to_string(), "20".to_string(), "0".to_string()],
        ];
        let svg = bar_svg("t", &rows).unwrap();
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(bar_svg("t", &[vec!["a".into(), "b".into(), "x".into()]]).is_err());
    }
}
