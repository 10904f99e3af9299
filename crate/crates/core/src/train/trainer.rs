use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::dsp::{AudioClip, FeatureMatrix, LogMel, LogMelConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mixture::{
    add_white_noise, crop_circular, make_training_mixture, Corpus, TrainingMixConfig,
};
use crate::model::{
    forward, prepare_guided_input, save_checkpoint, BnStats, ModelParams, ParamVars,
};
use crate::rng::{derive_seed, stream_rng};

use super::{lr_at, Adam, TrainConfig};

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Model input: 80 mel rows, plus two guide rows for guided models.
    pub x: FeatureMatrix,
    /// Target activity per feature frame, for masked models.
    pub z: Option<Vec<bool>>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    bn: Vec<BnStats>,
}

fn run_sample(
    params: &ModelParams,
    names: &[String],
    s: &TrainSample,
    cfg: &TrainConfig,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, true);
    let out = forward(&mut tape, params, &vars, &s.x, s.z.as_deref())?;
    let w = vars.get("aam.weight")?;
    let loss = tape.aam_loss(out.embedding, w, s.label, cfg.aam.margin, cfg.aam.scale)?;
    let mut g = tape.backward(loss)?;
    let grads = names
        .iter()
        .map(|n| Ok(g.take(vars.get(n)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleResult {
        loss: tape.value(loss).item(),
        grads,
        bn: out.bn_stats,
    })
}

fn bn_stats_only(params: &ModelParams, s: &TrainSample) -> Result<Vec<BnStats>> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let (_, stats) = crate::model::encode(&mut tape, params, &vars, &s.x)?;
    Ok(stats)
}

/// Mean and population variance of one layer pooled over all frames.
fn pooled_moments(stats: &[&BnStats]) -> (Vec<f64>, Vec<f64>) {
    let d = stats[0].sum.len();
    let n: usize = stats.iter().map(|s| s.frames).sum();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for c in 0..d {
        let s: f64 = stats.iter().map(|b| b.sum[c]).sum();
        let sq: f64 = stats.iter().map(|b| b.sum_sq[c]).sum();
        mean[c] = s / n as f64;
        var[c] = (sq / n as f64 - mean[c] * mean[c]).max(0.0);
    }
    (mean, var)
}

/// Sets each batch-norm layer's running statistics to the population
/// statistics of `samples`, one layer at a time so later layers see
/// already-normalized inputs.
pub fn calibrate_batch_norm(params: &mut ModelParams, samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    for layer in 0..params.num_bn_layers() {
        let all = samples
            .par_iter()
            .map(|s| bn_stats_only(params, s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&BnStats> = all.iter().map(|s| &s[layer]).collect();
        let (mean, var) = pooled_moments(&refs);
        params.set_bn_stats(layer, &mean, &var)?;
    }
    Ok(())
}

fn update_bn(params: &mut ModelParams, results: &[SampleResult], momentum: f64) -> Result<()> {
    for layer in 0..params.num_bn_layers() {
        let refs: Vec<&BnStats> = results.iter().map(|r| &r.bn[layer]).collect();
        let (mean, var) = pooled_moments(&refs);
        let bn = format!("enc.{layer}.bn");
        let old_m = params
            .tensor(&format!("{bn}.running_mean"))?
            .data()
            .to_vec();
        let old_v = params.tensor(&format!("{bn}.running_var"))?.data().to_vec();
        let ema = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - momentum) * o + momentum * n)
                .collect()
        };
        params.set_bn_stats(layer, &ema(&old_m, &mean), &ema(&old_v, &var))?;
    }
    Ok(())
}

fn maybe_noise(samples: &mut [f32], cfg: &TrainConfig, rng: &mut ChaCha8Rng) {
    if rng.gen::<f64>() < cfg.noise_prob {
        let snr = if cfg.snr_max_db > cfg.snr_min_db {
            rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db)
        } else {
            cfg.snr_min_db
        };
        add_white_noise(samples, snr, rng);
    }
}

fn label_of(corpus: &Corpus, speaker: &str) -> Result<usize> {
    corpus
        .speaker_index(speaker)
        .ok_or_else(|| Error::InvalidInput(format!("unknown speaker {speaker}")))
}

/// Guided batch: every speaker of every mixture serves once as the target.
fn guided_batch(
    corpus: &Corpus,
    cfg: &TrainConfig,
    logmel: &LogMel,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    let mix_cfg = TrainingMixConfig::default();
    let mut out = Vec::with_capacity(cfg.mixtures_per_batch * mix_cfg.speakers);
    for _ in 0..cfg.mixtures_per_batch {
        let mix = make_training_mixture(corpus, &mix_cfg, rng)?;
        let mut samples = mix.clip.into_samples();
        maybe_noise(&mut samples, cfg, rng);
        let mel = logmel.compute(&AudioClip::new(samples, SAMPLE_RATE)?)?;
        let acts = mix.acts.slice_columns(0, mel.cols())?;
        for n in 0..acts.num_speakers() {
            let (x, z) = prepare_guided_input(&mel, Some((&acts, n)), cfg.mode)?;
            out.push(TrainSample {
                x,
                z,
                label: label_of(corpus, &acts.speaker_ids()[n])?,
            });
        }
    }
    Ok(out)
}

/// Baseline batch: three single-speaker crops per mixture slot, so both
/// systems see the same number of examples per step.
fn baseline_batch(
    corpus: &Corpus,
    cfg: &TrainConfig,
    logmel: &LogMel,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    let n = cfg.mixtures_per_batch * TrainingMixConfig::default().speakers;
    let len = (cfg.crop_s * SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..corpus.num_speakers());
        let utts: Vec<_> = corpus.of_speaker(k).collect();
        let u = utts[rng.gen_range(0..utts.len())];
        let offset = rng.gen_range(0..u.clip.len().max(1));
        let mut crop = crop_circular(u.clip.samples(), offset, len);
        maybe_noise(&mut crop, cfg, rng);
        let x = logmel.compute(&AudioClip::new(crop, SAMPLE_RATE)?)?;
        out.push(TrainSample {
            x,
            z: None,
            label: k,
        });
    }
    Ok(out)
}

/// Trains a guided extractor on on-the-fly mixtures of `corpus`.
pub fn train_guided(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.mode.is_baseline() {
        return Err(Error::Config("train_guided needs a guided mode".into()));
    }
    train(corpus, cfg, guided_batch)
}

/// Trains the unguided extractor on single-speaker crops of `corpus`.
pub fn train_baseline(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    if !cfg.mode.is_baseline() {
        return Err(Error::Config("train_baseline needs mode = baseline".into()));
    }
    train(corpus, cfg, baseline_batch)
}

type BatchFn = fn(&Corpus, &TrainConfig, &LogMel, &mut ChaCha8Rng) -> Result<Vec<TrainSample>>;

fn train(corpus: &Corpus, cfg: &TrainConfig, make_batch: BatchFn) -> Result<TrainReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(corpus, cfg, make_batch))
}

fn train_inner(corpus: &Corpus, cfg: &TrainConfig, make_batch: BatchFn) -> Result<TrainReport> {
    let logmel = LogMel::new(LogMelConfig::default(), SAMPLE_RATE)?;
    let mut params = ModelParams::init(
        cfg.model_config(corpus.num_speakers()),
        cfg.mode,
        derive_seed(cfg.seed, INIT_STREAM),
    )?;
    let names = params.trainable_names();
    let mut adam = Adam::default();
    let sched = &cfg.schedule;
    let mut losses = Vec::with_capacity(sched.total_iters());
    let mut epoch_losses = Vec::new();
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for iter in 0..sched.total_iters() {
        let mut rng = stream_rng(derive_seed(cfg.seed, BATCH_STREAM), iter as u64);
        let batch = make_batch(corpus, cfg, &logmel, &mut rng)?;
        if iter == 0 {
            calibrate_batch_norm(&mut params, &batch)?;
        }
        let results = batch
            .par_iter()
            .map(|s| run_sample(&params, &names, s, cfg))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / results.len() as f64;
        let mut grads: Vec<(String, Tensor)> = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let mut acc = results[0].grads[i].clone();
            for r in &results[1..] {
                for (a, g) in acc.data_mut().iter_mut().zip(r.grads[i].data()) {
                    *a += g;
                }
            }
            acc.data_mut().iter_mut().for_each(|a| *a *= scale);
            grads.push((name.clone(), acc));
        }
        let loss = results.iter().map(|r| r.loss).sum::<f64>() * scale;
        adam.step(&mut params, &grads, lr_at(iter, sched)?)?;
        update_bn(&mut params, &results, cfg.bn_momentum)?;
        losses.push(loss);
        if (iter + 1) % sched.iters_per_epoch == 0 {
            let epoch = (iter + 1) / sched.iters_per_epoch;
            let tail = &losses[losses.len() - sched.iters_per_epoch..];
            epoch_losses.push(tail.iter().sum::<f64>() / tail.len() as f64);
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(
                    Path::new(dir).join(format!("epoch_{epoch:03}.gse")),
                    &params,
                )?;
            }
        }
    }
    Ok(TrainReport {
        params,
        losses,
        epoch_losses,
    })
}
