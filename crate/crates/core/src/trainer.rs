//! Joint training of the schedule and the denoiser.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{stack_batch, PairedSample};
use crate::denoiser::{BoundDenoiser, DenoiserConfig, DenoiserModel};
use crate::error::{CvdmError, Result};
use crate::io::{config_digest, Checkpoint};
use crate::losses::{loss_terms, LossBreakdown, LossConfig, LossDraws};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::schedule::{csv_err, LearnedSchedule, ScheduleConfig, ScheduleModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub condition_channels: usize,
    pub target_channels: usize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            condition_channels: 2,
            target_channels: 1,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

/// Schedule and denoiser sharing one parameter store.
#[derive(Debug, Clone)]
pub struct CvdmModel {
    pub config: ModelConfig,
    pub schedule: ScheduleModel,
    pub denoiser: DenoiserModel,
    pub params: ParamStore,
}

impl CvdmModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.condition_channels == 0 || config.target_channels == 0 {
            return Err(CvdmError::Config("channel counts must be positive".into()));
        }
        let mut r = rng::stream(seed, "init", 0);
        let mut params = ParamStore::default();
        let schedule = ScheduleModel::new(
            &mut params,
            &config.schedule,
            config.condition_channels,
            config.target_channels,
            &mut r,
        )?;
        let denoiser = DenoiserModel::new(
            &mut params,
            &config.denoiser,
            config.condition_channels,
            config.target_channels,
            &mut r,
        )?;
        Ok(Self {
            config: config.clone(),
            schedule,
            denoiser,
            params,
        })
    }

    pub fn schedule(&self) -> LearnedSchedule<'_> {
        self.schedule.bind(&self.params)
    }

    pub fn denoiser(&self) -> BoundDenoiser<'_> {
        self.denoiser.bind(&self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaPolicy {
    Fixed {
        value: f64,
    },
    /// `α = scale · mean(L̂_∞) / mean(L_γ)` over the first `warmup_steps` steps, then frozen.
    AutoBalance {
        scale: f64,
        warmup_steps: u64,
    },
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::AutoBalance {
            scale: 1e-3,
            warmup_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AlphaState {
    pub sum_inf: f64,
    pub sum_gamma: f64,
    pub count: u64,
    pub frozen: Option<f64>,
}

impl AlphaState {
    /// α for the current step given its unweighted term values.
    pub fn next(&mut self, policy: &AlphaPolicy, l_inf_hat: f64, l_gamma: f64) -> f64 {
        match *policy {
            AlphaPolicy::Fixed { value } => value,
            AlphaPolicy::AutoBalance {
                scale,
                warmup_steps,
            } => {
                if let Some(a) = self.frozen {
                    return a;
                }
                self.sum_inf += l_inf_hat;
                self.sum_gamma += l_gamma;
                self.count += 1;
                let a = if self.sum_gamma > 0.0 {
                    scale * self.sum_inf / self.sum_gamma
                } else {
                    0.0
                };
                if self.count >= warmup_steps {
                    self.frozen = Some(a);
                }
                a
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub alpha: AlphaPolicy,
    pub seed: u64,
    /// Write a checkpoint every this many steps; `0` only at the end.
    pub checkpoint_every: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            alpha: AlphaPolicy::default(),
            seed: 0,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || !(self.optimizer.learning_rate >= 0.0) {
            return Err(CvdmError::Config(
                "iterations and batch_size must be >= 1 and learning_rate >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Digest of every setting that affects the parameter trajectory. The
/// iteration budget and checkpoint cadence are excluded so a run can be extended.
pub fn training_digest(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    config_digest(&serde_json::json!({
        "model": model,
        "seed": train.seed,
        "batch_size": train.batch_size,
        "optimizer": train.optimizer,
        "alpha": train.alpha,
        "loss": train.loss,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub l_beta: f64,
    pub kl_prior: f64,
    pub l_inf_hat: f64,
    pub l_gamma: f64,
    pub total: f64,
    pub alpha: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CvdmModel,
    pub optimizer: Adam,
    pub alpha: AlphaState,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    digest: String,
}

impl Trainer {
    pub fn new(model: CvdmModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.optimizer, &model.params)?;
        let digest = training_digest(&model.config, &config)?;
        Ok(Self {
            model,
            optimizer,
            alpha: AlphaState::default(),
            config,
            step: 0,
            digest,
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Dataset indices for step `step` (0-based): consecutive slices of
    /// per-epoch permutations, each seeded by the epoch number.
    pub fn batch_indices(&self, step: u64, dataset_len: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        let n = dataset_len as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|p| {
                let epoch = p / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..dataset_len).collect();
                    perm.shuffle(&mut rng::stream(self.config.seed, "epoch", epoch));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("set above").1[(p % n) as usize]
            })
            .collect()
    }

    /// One joint update; returns the breakdown evaluated before the update.
    pub fn train_step(&mut self, data: &[PairedSample]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(CvdmError::Config("empty training set".into()));
        }
        let idx = self.batch_indices(self.step, data.len());
        let (x, y) = stack_batch(data, &idx)?;
        let draws = LossDraws::sample(&mut rng::stream(self.config.seed, "draws", self.step), y.shape());
        let (breakdown, grads) = {
            let g = Graph::new();
            let schedule = self.model.schedule();
            let denoiser = self.model.denoiser();
            let terms = loss_terms(&schedule, &denoiser, &g, &x, &y, &draws, &self.config.loss)?;
            let alpha = self
                .alpha
                .next(&self.config.alpha, terms.l_inf_hat.item(), terms.l_gamma.item());
            let breakdown = terms.breakdown(alpha);
            let bad = breakdown.non_finite_terms();
            if !bad.is_empty() {
                return Err(CvdmError::NonFinite(format!(
                    "step {}: non-finite {} in {breakdown:?}",
                    self.step + 1,
                    bad.join(", ")
                )));
            }
            let grads = g.backward(terms.total(alpha)?)?;
            let aligned: Vec<Tensor> = self
                .model
                .params
                .ids()
                .map(|id| {
                    grads
                        .param(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(self.model.params.get(id).shape()))
                })
                .collect();
            (breakdown, aligned)
        };
        self.optimizer.step(&mut self.model.params, grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs until `config.iterations` steps are complete. With `out`, appends
    /// rows to `out/train_log.csv` and writes checkpoints there.
    pub fn train_loop(&mut self, data: &[PairedSample], out: Option<&Path>) -> Result<Vec<LossBreakdown>> {
        let start = Instant::now();
        let mut writer = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = self.step == 0 || !path.exists();
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)?;
                Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.config.iterations {
            let b = self.train_step(data)?;
            if let Some(w) = writer.as_mut() {
                w.serialize(TrainLogRow {
                    step: self.step,
                    l_beta: b.l_beta,
                    kl_prior: b.kl_prior,
                    l_inf_hat: b.l_inf_hat,
                    l_gamma: b.l_gamma,
                    total: b.total,
                    alpha: b.alpha,
                    wall_time: start.elapsed().as_secs_f64(),
                })
                .map_err(csv_err)?;
            }
            if self.step % 100 == 0 || self.step == 1 {
                log::info!(
                    "step {} total {:.5} l_beta {:.3e} kl {:.3e} l_inf {:.4} l_gamma {:.3e} alpha {:.3e}",
                    self.step,
                    b.total,
                    b.l_beta,
                    b.kl_prior,
                    b.l_inf_hat,
                    b.l_gamma,
                    b.alpha
                );
            }
            history.push(b);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.config.iterations {
                    self.checkpoint()?.save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some(dir) = out {
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            let ck = self.checkpoint()?;
            ck.save(&checkpoint_path(dir, self.step))?;
            ck.save(&dir.join("final.ckpt"))?;
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            step: self.step,
            config_digest: self.digest.clone(),
            seed: self.config.seed,
            optimizer_step: self.optimizer.step,
            alpha: serde_json::to_value(self.alpha)?,
            config: serde_json::json!({ "model": self.model.config, "train": self.config }),
            names: self.model.params.names().to_vec(),
            params: self.model.params.values().to_vec(),
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        })
    }

    /// Rebuilds a trainer from a checkpoint made with the same settings.
    pub fn resume(ck: &Checkpoint, model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let mut model = CvdmModel::new(model_config, config.seed)?;
        let digest = training_digest(model_config, &config)?;
        if digest != ck.config_digest {
            return Err(CvdmError::Checkpoint(format!(
                "checkpoint digest {} does not match the configuration ({digest})",
                ck.config_digest
            )));
        }
        model.params.load_from(&ck.names, ck.params.clone())?;
        let mut trainer = Self::new(model, config)?;
        trainer.step = ck.step;
        trainer.alpha = serde_json::from_value(ck.alpha.clone())?;
        trainer.optimizer.step = ck.optimizer_step;
        let (m, v) = ck
            .moments
            .clone()
            .ok_or_else(|| CvdmError::Checkpoint("checkpoint has no optimizer state".into()))?;
        if m.len() != trainer.optimizer.m.len() || v.len() != trainer.optimizer.v.len() {
            return Err(CvdmError::Checkpoint("optimizer state layout differs".into()));
        }
        trainer.optimizer.m = m;
        trainer.optimizer.v = v;
        Ok(trainer)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

/// Loads model parameters from a checkpoint, checking the layout.
pub fn load_model(ck: &Checkpoint, model_config: &ModelConfig) -> Result<CvdmModel> {
    let mut model = CvdmModel::new(model_config, ck.seed)?;
    model.params.load_from(&ck.names, ck.params.clone())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_balance_freezes_after_warmup() {
        let policy = AlphaPolicy::AutoBalance {
            scale: 1e-3,
            warmup_steps: 3,
        };
        let mut s = AlphaState::default();
        assert!((s.next(&policy, 2.0, 1.0) - 2e-3).abs() < 1e-18);
        assert!((s.next(&policy, 4.0, 1.0) - 3e-3).abs() < 1e-18);
        let frozen = s.next(&policy, 6.0, 1.0);
        assert!((frozen - 4e-3).abs() < 1e-18);
        assert_eq!(s.next(&policy, 100.0, 1e-9), frozen);
        let mut z = AlphaState::default();
        assert_eq!(z.next(&policy, 1.0, 0.0), 0.0);
        assert_eq!(
            AlphaState::default().next(&AlphaPolicy::Fixed { value: 0.25 }, 9.0, 9.0),
            0.25
        );
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let model = CvdmModel::new(
            &ModelConfig {
                schedule: ScheduleConfig {
                    hidden: 4,
                    ..ScheduleConfig::default()
                },
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let t = Trainer::new(
            model,
            TrainConfig {
                batch_size: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|s| t.batch_indices(s, 12)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_ne!(t.batch_indices(0, 12), t.batch_indices(4, 12));
    }
}
