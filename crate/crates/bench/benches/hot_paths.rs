use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use gse_core::autodiff::{Tape, Tensor};
use gse_core::diarization::{der, Annotation, Turn};
use gse_core::dsp::{logmel, AudioClip, LogMelConfig, SAMPLE_RATE};
use gse_core::rng::stream_rng;
use gse_core::verification::{eer, min_dcf, DcfParams, ScoreSet};

fn bench_logmel(c: &mut Criterion) {
    let mut rng = stream_rng(1, 0);
    let samples: Vec<f32> = (0..3 * SAMPLE_RATE as usize)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
    let cfg = LogMelConfig::default();
    c.bench_function("logmel_3s", |b| {
        b.iter(|| logmel(black_box(&clip), &cfg).unwrap())
    });
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = stream_rng(2, 0);
    let (cin, cout, k, t) = (82, 64, 5, 300);
    let mut rand = |n: usize| {
        (0..n)
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect::<Vec<f64>>()
    };
    let w = Tensor::new(vec![cout, cin, k], rand(cout * cin * k)).unwrap();
    let x = Tensor::matrix(cin, t, rand(cin * t)).unwrap();
    c.bench_function("conv1d_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let xv = tape.param(x.clone());
            let y = tape.conv1d(wv, None, xv, 2).unwrap();
            let l = tape.sum(y).unwrap();
            tape.backward(l).unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = stream_rng(3, 0);
    let mut draw = |n: usize, shift: f64| {
        (0..n)
            .map(|_| rng.gen_range(0.0..1.0) + shift)
            .collect::<Vec<f64>>()
    };
    let scores = ScoreSet::new(draw(500, 0.3), draw(4500, 0.0));
    c.bench_function("eer_5000", |b| b.iter(|| eer(black_box(&scores)).unwrap()));
    let p = DcfParams::default();
    c.bench_function("min_dcf_5000", |b| {
        b.iter(|| min_dcf(black_box(&scores), &p).unwrap())
    });

    let mut rng = stream_rng(4, 0);
    let mut annotation = |prefix: &str| {
        let turns = (0..200)
            .map(|i| {
                let spk = format!("{prefix}{}", rng.gen_range(0..4));
                Turn::new(
                    "f",
                    i * 1500 + rng.gen_range(0..500),
                    rng.gen_range(500..2500),
                    &spk,
                )
                .unwrap()
            })
            .collect();
        Annotation::new(turns)
    };
    let (r, h) = (annotation("r"), annotation("h"));
    c.bench_function("der_200_turns", |b| {
        b.iter(|| der(black_box(&r), black_box(&h)).unwrap())
    });
}

criterion_group!(benches, bench_logmel, bench_conv, bench_metrics);
criterion_main!(benches);
