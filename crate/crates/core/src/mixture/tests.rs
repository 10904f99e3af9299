use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::{logmel, LogMelConfig, HOP_S};

fn corpus() -> &'static Corpus {
    use std::sync::OnceLock;
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| synth_corpus(6, 3, 11).unwrap())
}

fn flat_utt(speaker: &str, len: usize) -> Utterance {
    Utterance {
        clip: AudioClip::new(vec![0.1; len], SAMPLE_RATE).unwrap(),
        speaker_id: speaker.into(),
        utterance_id: format!("{speaker}_u000"),
    }
}

fn acts(rows: Vec<Vec<u8>>) -> ActivityMatrix {
    let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
    ActivityMatrix::new(
        ids,
        rows.into_iter()
            .map(|r| r.into_iter().map(|b| b == 1).collect())
            .collect(),
    )
    .unwrap()
}

#[test]
fn corpus_is_deterministic_and_seed_dependent() {
    let a = synth_corpus(2, 1, 5).unwrap();
    let b = synth_corpus(2, 1, 5).unwrap();
    let c = synth_corpus(2, 1, 6).unwrap();
    assert_eq!(a.utterances(), b.utterances());
    assert_ne!(a.utterances()[0].clip, c.utterances()[0].clip);
}

#[test]
fn utterance_durations_are_bounded() {
    for u in corpus().utterances() {
        let d = u.clip.duration_s();
        assert!((3.0..=8.0).contains(&d), "{d}");
    }
    assert_eq!(corpus().num_speakers(), 6);
    assert_eq!(corpus().of_speaker(2).count(), 3);
    assert!(synth_corpus(1, 3, 0).is_err());
}

#[test]
fn speakers_have_different_long_term_spectra() {
    let cfg = LogMelConfig::default();
    let spectrum = |k: usize| {
        let mut acc = vec![0.0; 80];
        let mut n = 0;
        for u in corpus().of_speaker(k) {
            let f = logmel(&u.clip, &cfg).unwrap();
            for r in 0..80 {
                acc[r] += f.row(r).iter().sum::<f64>();
            }
            n += f.cols();
        }
        acc.into_iter().map(|v| v / n as f64).collect::<Vec<f64>>()
    };
    let (a, b) = (spectrum(0), spectrum(1));
    let dist: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    assert!(dist > 0.5, "{dist}");
}

#[test]
fn gain_examples() {
    assert_eq!(db_to_gain(0.0), 1.0);
    assert!((db_to_gain(-5.0) - 0.56234).abs() < 1e-5);
    assert!((db_to_gain(5.0) * db_to_gain(-5.0) - 1.0).abs() < 1e-12);
}

#[test]
fn training_mixture_follows_recipe() {
    let cfg = TrainingMixConfig::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = make_training_mixture(corpus(), &cfg, &mut rng).unwrap();
        let ids = m.speaker_ids();
        assert_eq!(ids.len(), 3);
        assert!(ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2]);
        for (i, p) in m.placements.iter().enumerate() {
            assert!((48_000..=96_000).contains(&p.len));
            for q in &m.placements[..i] {
                assert!(p.start.abs_diff(q.start) >= 8000);
            }
        }
        assert_eq!(m.placements.iter().map(|p| p.start).min(), Some(0));
        assert_eq!(m.placements[0].gain, 1.0);
        let total = m.placements.iter().map(Placement::end).max().unwrap();
        assert_eq!(m.clip.len(), total);
        assert_eq!(
            activity_from_placements(&m.placements, total).unwrap(),
            m.acts
        );
    }
}

#[test]
fn training_gains_track_sampled_levels() {
    let cfg = TrainingMixConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = make_training_mixture(corpus(), &cfg, &mut rng).unwrap();
    let level = |p: &Placement| {
        let u = corpus().get(&p.utterance_id).unwrap();
        p.gain * rms(&crop_circular(u.clip.samples(), p.offset, p.len))
    };
    for p in &m.placements[1..] {
        let db = 20.0 * (level(p) / level(&m.placements[0])).log10();
        assert!(db.abs() <= 5.0 + 1e-4, "{db}");
    }
}

#[test]
fn mixture_is_exact_sum_of_placed_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = make_training_mixture(corpus(), &TrainingMixConfig::default(), &mut rng).unwrap();
    let mut expect = vec![0.0f32; m.clip.len()];
    for p in &m.placements {
        let u = corpus().get(&p.utterance_id).unwrap();
        let crop = crop_circular(u.clip.samples(), p.offset, p.len);
        for (i, s) in crop.iter().enumerate() {
            expect[p.start + i] += p.gain as f32 * s;
        }
    }
    assert_eq!(m.clip.samples(), &expect[..]);
}

#[test]
fn short_utterance_crop_wraps() {
    assert_eq!(
        crop_circular(&[1.0, 2.0, 3.0], 1, 5),
        vec![2.0, 3.0, 1.0, 2.0, 3.0]
    );
}

#[test]
fn zero_delays_start_everyone_together() {
    let u: Vec<Utterance> = ["a", "b", "c", "d"]
        .iter()
        .map(|s| flat_utt(s, 16_000))
        .collect();
    let order: Vec<&Utterance> = u.iter().collect();
    let m = place_sequential(&order, &[0, 0, 0], 2).unwrap();
    assert!(m.placements.iter().all(|p| p.start == 0));
    assert_eq!(overlap_ratio(&m.acts, 2).unwrap(), 100.0);
    assert_eq!(single_speaker_duration(&m.acts, 2, HOP_S).unwrap(), 0.0);
}

#[test]
fn full_delays_chain_without_overlap() {
    let u: Vec<Utterance> = ["a", "b", "c", "d"]
        .iter()
        .map(|s| flat_utt(s, 16_000))
        .collect();
    let order: Vec<&Utterance> = u.iter().collect();
    let m = place_sequential(&order, &[1000, 1000, 1000], 1).unwrap();
    let starts: Vec<usize> = m.placements.iter().map(|p| p.start).collect();
    assert_eq!(starts, vec![0, 16_000, 32_000, 48_000]);
    assert_eq!(overlap_ratio(&m.acts, 1).unwrap(), 0.0);
    let solo = single_speaker_duration(&m.acts, 1, HOP_S).unwrap();
    assert!((solo - 1.0).abs() <= HOP_S + 1e-9, "{solo}");
}

#[test]
fn one_vs_many_rejects_speaker_collision() {
    let u = corpus().of_speaker(0).next().unwrap();
    let other = corpus().of_speaker(0).nth(1).unwrap();
    let x = corpus().of_speaker(1).next().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(make_one_vs_many(u, &[other, x], &mut rng).is_err());
}

#[test]
fn one_vs_many_places_target_in_chain() {
    let c = corpus();
    let test = c.of_speaker(0).next().unwrap();
    let inter: Vec<&Utterance> = (1..4).map(|k| c.of_speaker(k).next().unwrap()).collect();
    let mut slots = [0usize; 4];
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = make_one_vs_many(test, &inter, &mut rng).unwrap();
        let t = m.target.unwrap();
        slots[t] += 1;
        assert_eq!(m.speaker_ids()[t], test.speaker_id);
        for n in 1..4 {
            let (prev, cur) = (&m.placements[n - 1], &m.placements[n]);
            assert!(cur.start >= prev.start && cur.start <= prev.start + prev.len);
        }
    }
    assert!(slots.iter().all(|&n| n > 0), "{slots:?}");
}

#[test]
fn one_vs_many_overlap_statistics() {
    let c = corpus();
    let mut sum = 0.0;
    let mut full = 0;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..n {
        use rand::seq::index::sample;
        let spk = sample(&mut rng, c.num_speakers(), 4).into_vec();
        let pick = |k: usize, rng: &mut ChaCha8Rng| {
            let utts: Vec<&Utterance> = c.of_speaker(k).collect();
            utts[rng.gen_range(0..utts.len())]
        };
        let test = pick(spk[0], &mut rng);
        let inter: Vec<&Utterance> = spk[1..].iter().map(|&k| pick(k, &mut rng)).collect();
        let (order, delays, slot) = plan_one_vs_many(test, &inter, &mut rng).unwrap();
        let placements = sequential_placements(&order, &delays).unwrap();
        let total = placements.iter().map(Placement::end).max().unwrap();
        let a = activity_from_placements(&placements, total).unwrap();
        let r = overlap_ratio(&a, slot).unwrap();
        sum += r;
        full += (r == 100.0) as usize;
    }
    let mean = sum / n as f64;
    assert!((40.0..=75.0).contains(&mean), "mean overlap {mean}");
    assert!(full > 0);
}

#[test]
fn overlap_examples() {
    let a = acts(vec![vec![1, 1, 1, 1], vec![0, 1, 1, 0]]);
    assert_eq!(overlap_ratio(&a, 0).unwrap(), 50.0);
    let b = acts(vec![vec![1, 1, 0, 0], vec![0, 1, 1, 0]]);
    assert!((single_speaker_duration(&b, 0, 0.01).unwrap() - 0.01).abs() < 1e-15);
    let silent = acts(vec![vec![0; 3], vec![1; 3]]);
    assert!(matches!(
        overlap_ratio(&silent, 0),
        Err(Error::EmptyTargetActivity)
    ));
}

#[test]
fn noise_matches_requested_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clean = corpus().utterances()[0].clip.samples().to_vec();
    let mut noisy = clean.clone();
    add_white_noise(&mut noisy, 10.0, &mut rng);
    let noise: Vec<f32> = noisy.iter().zip(&clean).map(|(a, b)| a - b).collect();
    let snr = 20.0 * (rms(&clean) / rms(&noise)).log10();
    assert!((snr - 10.0).abs() < 0.1, "{snr}");
}

#[test]
fn manifest_round_trip_rebuilds_mixture() {
    let c = corpus();
    let test = c.of_speaker(2).next().unwrap();
    let inter: Vec<&Utterance> = [0, 3, 5]
        .iter()
        .map(|&k| c.of_speaker(k).nth(1).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = make_one_vs_many(test, &inter, &mut rng).unwrap();
    let rec =
        ManifestRecord::from_mixture("mix0001", &m, "wav/mix0001.wav", "act/mix0001.act").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    write_manifest(&path, std::slice::from_ref(&rec)).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, vec![rec]);
    assert_eq!(rebuild_mixture(&back[0], c).unwrap(), m);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 5);
}

#[test]
fn corpus_directory_round_trip() {
    let c = synth_corpus(2, 1, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write_dir(dir.path()).unwrap();
    let back = Corpus::read_dir(dir.path()).unwrap();
    assert_eq!(back.utterances(), c.utterances());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn activity_regenerates_from_placements(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = make_training_mixture(corpus(), &TrainingMixConfig::default(), &mut rng).unwrap();
        prop_assert_eq!(activity_from_placements(&m.placements, m.clip.len()).unwrap(), m.acts.clone());
        for t in 0..3 {
            let r = overlap_ratio(&m.acts, t).unwrap();
            let d = single_speaker_duration(&m.acts, t, HOP_S).unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
            prop_assert!(d >= 0.0);
            if r == 100.0 {
                prop_assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn mixtures_reproduce_from_seed(seed in any::<u64>()) {
        let cfg = TrainingMixConfig::default();
        let a = make_training_mixture(corpus(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = make_training_mixture(corpus(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
