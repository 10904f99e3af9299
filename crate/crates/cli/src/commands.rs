use std::path::Path;

use indexmap::IndexMap;

use gse_core::diarization::{
    cluster_and_stitch, der, embed_windows, jer, make_conversation, oracle_local, read_local_rttm,
    read_rttm, windows_from_local, write_local_rttm, write_rttm, Annotation, ConversationConfig,
    DiarizationMode,
};
use gse_core::dsp::{load_wav, save_wav, ActivityMatrix, SAMPLE_RATE};
use gse_core::mixture::{
    overlap_ratio, read_manifest, rebuild_mixture, synth_corpus, write_manifest, Corpus,
    ManifestRecord,
};
use gse_core::model::{load_checkpoint, save_checkpoint, Extractor};
use gse_core::rng::stream_rng;
use gse_core::train::{mode_name, train_baseline, train_guided};
use gse_core::verification::{
    eer, make_trials, min_dcf, read_scores, read_trials, score_trials, write_scores, write_trials,
    DcfParams, ScoreSet,
};
use gse_core::{Error, Result};

use crate::config::RunConfig;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Evaluation half of the corpus at `dir`.
fn held_out(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    Corpus::read_dir(dir)?
        .split(cfg.train_utts)
        .map(|(_, held)| held)
}

fn extractor(path: &Path) -> Result<Extractor> {
    Extractor::new(load_checkpoint(path)?, SAMPLE_RATE)
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let corpus = synth_corpus(cfg.speakers, cfg.utts_per_speaker, cfg.train.seed)?;
    corpus.write_dir(out)?;
    let seconds: f64 = corpus
        .utterances()
        .iter()
        .map(|u| u.clip.duration_s())
        .sum();
    Ok(format!(
        "speakers={} utterances={} seconds={seconds:.2}",
        corpus.num_speakers(),
        corpus.utterances().len()
    ))
}

pub fn mix_trials(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<String> {
    let held = held_out(cfg, corpus_dir)?;
    let set = make_trials(&held, cfg.trials, cfg.interferers, cfg.train.seed)?;
    let mix_dir = out.join("mixtures");
    create_dir(&mix_dir)?;
    let mut records = Vec::with_capacity(set.mixtures.len());
    let mut overlap = 0.0;
    for (id, mix) in &set.mixtures {
        let wav = format!("mixtures/{id}.wav");
        let act = format!("mixtures/{id}.act");
        save_wav(out.join(&wav), &mix.clip)?;
        mix.acts.write_sidecar(out.join(&act))?;
        records.push(ManifestRecord::from_mixture(id, mix, &wav, &act)?);
        overlap += overlap_ratio(&mix.acts, mix.target.expect("trial mixtures have a target"))?;
    }
    write_manifest(out.join("manifest.tsv"), &records)?;
    write_trials(out.join("trials.txt"), &set.trials)?;
    let mean = if records.is_empty() {
        0.0
    } else {
        overlap / records.len() as f64
    };
    Ok(format!(
        "trials={} mixtures={} mean_overlap={mean:.2}",
        set.trials.len(),
        records.len()
    ))
}

pub fn mix_conversations(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<String> {
    let held = held_out(cfg, corpus_dir)?;
    let conv_cfg = ConversationConfig {
        duration_s: cfg.conversation_s,
        overlap_prob: cfg.overlap_prob,
        ..ConversationConfig::default()
    };
    create_dir(out)?;
    let mut turns = Vec::new();
    let mut overlap = 0.0;
    for c in 0..cfg.conversations {
        let id = format!("conv{c:03}");
        let conv = make_conversation(
            &held,
            &conv_cfg,
            &id,
            &mut stream_rng(cfg.train.seed, c as u64),
        )?;
        save_wav(out.join(format!("{id}.wav")), &conv.clip)?;
        let duration_ms = (conv.clip.len() / 16) as u64;
        write_local_rttm(
            out.join(format!("{id}.local.rttm")),
            &oracle_local(&conv.reference, duration_ms),
        )?;
        overlap += conv.reference.overlap_ratio();
        turns.extend(conv.reference.turns().iter().cloned());
    }
    write_rttm(out.join("reference.rttm"), &Annotation::new(turns))?;
    Ok(format!(
        "conversations={} overlap_ratio={:.2}",
        cfg.conversations,
        overlap / cfg.conversations.max(1) as f64
    ))
}

pub fn train(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<String> {
    let (train_part, _) = Corpus::read_dir(corpus_dir)?.split(cfg.train_utts)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(out.to_path_buf());
    create_dir(out)?;
    write_text(&out.join("train.conf"), &tc.to_text())?;
    let report = if tc.mode.is_baseline() {
        train_baseline(&train_part, &tc)?
    } else {
        train_guided(&train_part, &tc)?
    };
    save_checkpoint(out.join("model.gse"), &report.params)?;
    let mut log = String::from("iteration\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        log.push_str(&format!("{i}\t{l:.6}\n"));
    }
    write_text(&out.join("losses.tsv"), &log)?;
    Ok(format!(
        "mode={} iterations={} final_loss={:.6} params={}",
        mode_name(tc.mode),
        report.losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.params.num_parameters()
    ))
}

pub fn extract(
    checkpoint: &Path,
    wav: &Path,
    activity: Option<&Path>,
    target: Option<&str>,
    out: &Path,
) -> Result<String> {
    let ex = extractor(checkpoint)?;
    let clip = load_wav(wav)?;
    let v = if ex.mode().is_baseline() {
        ex.extract(&clip, None)?
    } else {
        let (Some(act), Some(target)) = (activity, target) else {
            return Err(Error::Config(
                "guided extraction needs --activity and --target".into(),
            ));
        };
        let acts = ActivityMatrix::read_sidecar(act)?;
        let n = acts.index_of(target).ok_or_else(|| {
            Error::InvalidInput(format!("speaker {target} not in {}", act.display()))
        })?;
        ex.extract(&clip, Some((&acts, n)))?
    };
    let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    write_text(out, &(line.join(" ") + "\n"))?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(format!("dim={} norm={norm:.6}", v.len()))
}

fn metrics(trials: &Path, scores: &[f64]) -> Result<String> {
    let labels: Vec<bool> = read_trials(trials)?.iter().map(|t| t.target).collect();
    let set = ScoreSet::from_labels(&labels, scores)?;
    Ok(format!(
        "trials={} eer={:.4} mindcf={:.4}",
        labels.len(),
        eer(&set)?,
        min_dcf(&set, &DcfParams::default())?
    ))
}

pub fn verify_scores(trials: &Path, scores: &Path) -> Result<String> {
    metrics(trials, &read_scores(scores)?)
}

pub fn verify_model(
    cfg: &RunConfig,
    trials: &Path,
    scores: &Path,
    checkpoint: &Path,
    corpus_dir: &Path,
    manifest: &Path,
) -> Result<String> {
    let ex = extractor(checkpoint)?;
    let corpus = Corpus::read_dir(corpus_dir)?;
    let mut mixtures = IndexMap::new();
    for r in read_manifest(manifest)? {
        mixtures.insert(r.mixture_id.clone(), rebuild_mixture(&r, &corpus)?);
    }
    let list = read_trials(trials)?;
    let s = score_trials(&list, &mixtures, &corpus, &ex, cfg.policy)?;
    write_scores(scores, &s)?;
    metrics(trials, &s)
}

pub fn diarize(
    cfg: &RunConfig,
    checkpoint: &Path,
    wav: &Path,
    local: &Path,
    out: &Path,
    file_id: Option<String>,
) -> Result<String> {
    let ex = extractor(checkpoint)?;
    let clip = load_wav(wav)?;
    let file_id = file_id.unwrap_or_else(|| {
        wav.file_stem()
            .map_or(String::new(), |s| s.to_string_lossy().into_owned())
    });
    let turns: Vec<_> = read_local_rttm(local)?
        .into_iter()
        .filter(|t| t.turn.file_id == file_id)
        .collect();
    let duration_ms = (clip.len() / 16) as u64;
    let windows = windows_from_local(&turns, duration_ms)?;
    let mode = if ex.mode().is_baseline() {
        DiarizationMode::BaselineSolo
    } else {
        DiarizationMode::Guided
    };
    let results = embed_windows(&ex, &clip, &windows, mode)?;
    let hyp = cluster_and_stitch(&results, &cfg.cluster, &file_id)?;
    write_rttm(out, &hyp)?;
    let tracks: usize = results
        .iter()
        .map(|r| r.tracks.iter().filter(|t| t.embedding.is_some()).count())
        .sum();
    Ok(format!(
        "windows={} tracks={tracks} speakers={}",
        windows.len(),
        hyp.speaker_intervals().len()
    ))
}

/// Per-file DER and JER; the summary holds their macro averages.
pub fn score(reference: &Path, hyp: &Path, csv: Option<&Path>) -> Result<String> {
    let r = read_rttm(reference)?;
    let h = read_rttm(hyp)?;
    let files = r.file_ids();
    if files.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let mut table = String::from("file,der,jer\n");
    let (mut d_sum, mut j_sum) = (0.0, 0.0);
    for f in &files {
        let (rf, hf) = (r.for_file(f), h.for_file(f));
        let (d, j) = (der(&rf, &hf)?, jer(&rf, &hf)?);
        table.push_str(&format!("{f},{d:.4},{j:.4}\n"));
        d_sum += d;
        j_sum += j;
    }
    if let Some(p) = csv {
        write_text(p, &table)?;
    }
    let n = files.len() as f64;
    Ok(format!(
        "files={} der={:.4} jer={:.4}",
        files.len(),
        d_sum / n,
        j_sum / n
    ))
}
