use std::path::Path;
use std::process::{Command, Output};

fn gse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gse"))
        .current_dir(dir)
        .env_remove("GSE_SEED")
        .args(args)
        .output()
        .expect("gse runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "speakers=6",
    "--set",
    "utts_per_speaker=3",
    "--set",
    "train_utts=1",
    "--set",
    "trials=12",
];

fn small(dir: &Path, args: &[&str]) -> String {
    let mut all = args.to_vec();
    all.extend_from_slice(&SMALL);
    stdout(&gse(dir, &all))
}

#[test]
fn separated_scores_give_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small(d, &["synth-data", "--out", "corpus"]);
    let summary = small(d, &["mix", "--corpus", "corpus", "--out", "trials"]);
    assert!(summary.starts_with("trials=12 "), "{summary}");
    let trials = std::fs::read_to_string(d.join("trials/trials.txt")).unwrap();
    let scores: String = trials
        .lines()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{}\n", if l.starts_with('1') { 0.9 } else { 0.1 }))
        .collect();
    std::fs::write(d.join("s.txt"), scores).unwrap();
    let out = stdout(&gse(
        d,
        &[
            "verify",
            "--trials",
            "trials/trials.txt",
            "--scores",
            "s.txt",
        ],
    ));
    assert_eq!(out.trim(), "trials=12 eer=0.0000 mindcf=0.0000");
}

#[test]
fn scoring_a_reference_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("ref.rttm"),
        "SPEAKER a 1 0.000 2.000 <NA> <NA> x <NA> <NA>\n\
         SPEAKER a 1 1.500 1.000 <NA> <NA> y <NA> <NA>\n\
         SPEAKER b 1 0.000 1.000 <NA> <NA> x <NA> <NA>\n",
    )
    .unwrap();
    let out = stdout(&gse(
        d,
        &[
            "score", "--ref", "ref.rttm", "--hyp", "ref.rttm", "--csv", "t.csv",
        ],
    ));
    assert_eq!(out.trim(), "files=2 der=0.0000 jer=0.0000");
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert_eq!(csv, "file,der,jer\na,0.0000,0.0000\nb,0.0000,0.0000\n");
}

#[test]
fn report_histograms_cover_every_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small(d, &["synth-data", "--out", "corpus"]);
    small(d, &["mix", "--corpus", "corpus", "--out", "trials"]);
    let out = small(
        d,
        &[
            "report",
            "--manifest",
            "trials/manifest.tsv",
            "--out",
            "rep",
        ],
    );
    let mixtures: usize = out
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("mixtures="))
        .unwrap()
        .parse()
        .unwrap();
    for name in ["overlap_hist.csv", "solo_hist.csv"] {
        let csv = std::fs::read_to_string(d.join("rep").join(name)).unwrap();
        let total: usize = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, mixtures, "{name}");
    }
    assert!(d.join("rep/overlap_hist.svg").exists());
    assert!(!d.join("rep/attention.csv").exists());
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(gse(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        gse(d, &["synth-data", "--out", "c", "--set", "bogus=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gse(d, &["synth-data", "--out", "c", "--set", "speakers=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        gse(
            d,
            &["score", "--ref", "missing.rttm", "--hyp", "missing.rttm"]
        )
        .status
        .code(),
        Some(2)
    );
    std::fs::write(
        d.join("bad.rttm"),
        "SPEAKER a 1 x 1 <NA> <NA> s <NA> <NA>\n",
    )
    .unwrap();
    assert_eq!(
        gse(d, &["score", "--ref", "bad.rttm", "--hyp", "bad.rttm"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(gse(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus_bytes = |sub: &str, extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gse"));
        cmd.current_dir(d).env_remove("GSE_SEED");
        if let Some(s) = env {
            cmd.env("GSE_SEED", s);
        }
        let mut args = vec!["synth-data", "--out", sub];
        args.extend_from_slice(extra);
        args.extend_from_slice(&SMALL);
        assert!(cmd.args(&args).output().unwrap().status.success());
        let mut files: Vec<_> = std::fs::read_dir(d.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let flag = corpus_bytes("a", &["--seed", "3"], Some("5"));
    let set = corpus_bytes("b", &["--set", "seed=3"], Some("5"));
    let env = corpus_bytes("c", &[], Some("3"));
    let other = corpus_bytes("d", &[], Some("5"));
    assert_eq!(flag, set);
    assert_eq!(flag, env);
    assert_ne!(flag, other);
}
