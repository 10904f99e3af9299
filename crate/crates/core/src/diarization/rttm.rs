use std::path::Path;

use crate::error::{Error, Result};

use super::{Annotation, Turn};

fn fmt_ms(ms: u64) -> String {
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

fn turn_line(t: &Turn) -> String {
    format!(
        "SPEAKER {} 1 {} {} <NA> <NA> {} <NA> <NA>",
        t.file_id,
        fmt_ms(t.onset_ms),
        fmt_ms(t.duration_ms),
        t.speaker
    )
}

fn parse_ms(field: &str, line: usize) -> Result<u64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad time {field:?}"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            line,
            msg: format!("time {field:?} must be finite and non-negative"),
        });
    }
    Ok((v * 1000.0).round() as u64)
}

/// Parses one `SPEAKER` line; returns the turn and any extra fields.
fn parse_turn(line: &str, n: usize) -> Result<(Turn, Vec<&str>)> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 10 || f[0] != "SPEAKER" {
        return Err(Error::Parse {
            line: n,
            msg: "expected a 10-field SPEAKER line".into(),
        });
    }
    let onset_ms = parse_ms(f[3], n)?;
    let duration_ms = parse_ms(f[4], n)?;
    let turn = Turn::new(f[1], onset_ms, duration_ms, f[7]).map_err(|_| Error::Parse {
        line: n,
        msg: "turn duration must be positive".into(),
    })?;
    Ok((turn, f[10..].to_vec()))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with(';') && !l.starts_with('#'))
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Annotation> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let turns = lines(&text)
        .map(|(n, l)| parse_turn(l, n).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Annotation::new(turns))
}

pub fn write_rttm(path: impl AsRef<Path>, annotation: &Annotation) -> Result<()> {
    let path = path.as_ref();
    let text: String = annotation
        .turns()
        .iter()
        .map(|t| turn_line(t) + "\n")
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A local diarization turn tagged with the window it belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalTurn {
    pub window: usize,
    pub turn: Turn,
}

/// RTTM with the window index as an eleventh column.
pub fn read_local_rttm(path: impl AsRef<Path>) -> Result<Vec<LocalTurn>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = lines(&text)
        .map(|(n, l)| {
            let (turn, extra) = parse_turn(l, n)?;
            let window =
                extra
                    .first()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line: n,
                        msg: "missing window index column".into(),
                    })?;
            Ok(LocalTurn { window, turn })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        (a.window, a.turn.onset_ms, &a.turn.speaker).cmp(&(
            b.window,
            b.turn.onset_ms,
            &b.turn.speaker,
        ))
    });
    Ok(out)
}

pub fn write_local_rttm(path: impl AsRef<Path>, turns: &[LocalTurn]) -> Result<()> {
    let path = path.as_ref();
    let text: String = turns
        .iter()
        .map(|t| format!("{} {}\n", turn_line(&t.turn), t.window))
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
