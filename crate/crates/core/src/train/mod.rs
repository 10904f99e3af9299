//! Training objective, optimizer, learning-rate schedule and the baseline and
//! guided training loops.

mod config;
mod trainer;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub use config::{mode_name, parse_key_values, parse_mode, TrainConfig};
pub use trainer::{calibrate_batch_norm, train_baseline, train_guided, TrainReport, TrainSample};

/// Additive angular margin softmax settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) || self.scale <= 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= margin < pi/2 and scale > 0, got {} and {}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

/// Batch-mean AAM loss of `embeddings` (each E×1) against class rows.
pub fn aam_loss(
    tape: &mut Tape,
    embeddings: &[Var],
    weights: Var,
    labels: &[usize],
    cfg: &AamConfig,
) -> Result<Var> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::InvalidInput(
            "one label per embedding required".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for (&e, &y) in embeddings.iter().zip(labels) {
        let l = tape.aam_loss(e, weights, y, cfg.margin, cfg.scale)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / embeddings.len() as f64)
}

/// Cyclical schedule: each cycle warms up linearly from 0 to its peak, then
/// follows a half cosine down to 0; peaks decay geometrically per cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub cycles: usize,
    pub epochs_per_cycle: usize,
    pub warmup_iters: usize,
    pub peak_lr: f64,
    pub cycle_decay: f64,
    pub iters_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn paper(iters_per_epoch: usize) -> Self {
        Self {
            cycles: 4,
            epochs_per_cycle: 20,
            warmup_iters: 1000,
            peak_lr: 0.001,
            cycle_decay: 0.75,
            iters_per_epoch,
        }
    }

    pub fn cycle_len(&self) -> usize {
        self.epochs_per_cycle * self.iters_per_epoch
    }

    pub fn total_iters(&self) -> usize {
        self.cycles * self.cycle_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || self.epochs_per_cycle == 0 || self.iters_per_epoch == 0 {
            return Err(Error::Config("schedule lengths must be positive".into()));
        }
        if self.warmup_iters == 0 || self.warmup_iters >= self.cycle_len() {
            return Err(Error::Config(format!(
                "warm-up of {} iterations must be positive and shorter than a cycle of {}",
                self.warmup_iters,
                self.cycle_len()
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.cycle_decay > 0.0) {
            return Err(Error::Config(
                "peak_lr and cycle_decay must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        lr_at(iter, self)
    }
}

pub fn lr_at(iter: usize, cfg: &ScheduleConfig) -> Result<f64> {
    let total = cfg.total_iters();
    if iter >= total {
        return Err(Error::ScheduleExhausted { iter, total });
    }
    let len = cfg.cycle_len();
    let (cycle, i) = (iter / len, iter % len);
    let peak = cfg.peak_lr * cfg.cycle_decay.powi(cycle as i32);
    let w = cfg.warmup_iters;
    Ok(if i <= w {
        peak * i as f64 / w as f64
    } else {
        let progress = (i - w) as f64 / (len - w) as f64;
        0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
    })
}

/// Adam with bias correction, state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> i32 {
        self.step
    }

    /// First and second moment estimates of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update; every gradient is checked before anything changes.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.tensor(name)?;
            if !g.same_shape(p) {
                return Err(Error::shape("adam_step", format!("gradient for {name}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
