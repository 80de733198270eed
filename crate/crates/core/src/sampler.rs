//! Ancestral sampling of `y` given `x` with a discretised schedule.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::denoiser::NoisePredictor;
use crate::error::{CvdmError, Result};
use crate::rng;
use crate::schedule::{Schedule, ScheduleExt, EPS_CLIP, EPS_SIGMA};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaMode {
    /// `β_t = β(t/T, x)/T`, `γ_t` the running product of `1 − β`.
    #[default]
    LearnedOverT,
    /// `β_t = 1 − γ(t_i)/γ(t_{i−1})` and `γ_t` straight from the schedule.
    RatioExact,
    /// Schedule-free baseline: `β` linear from `start` to `end`, uniform over elements.
    FixedLinear { start: f64, end: f64 },
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::LearnedOverT => write!(f, "learned"),
            BetaMode::RatioExact => write!(f, "ratio"),
            BetaMode::FixedLinear { start, end } => write!(f, "linear:{start}:{end}"),
        }
    }
}

/// Parses `learned`, `ratio` or `linear:START:END`.
impl FromStr for BetaMode {
    type Err = CvdmError;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "learned" => BetaMode::LearnedOverT,
            "ratio" => BetaMode::RatioExact,
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| CvdmError::Config(format!("bad number {v:?} in beta mode {s:?}")))
                };
                match parts.as_slice() {
                    ["linear", a, b] => BetaMode::FixedLinear {
                        start: parse(a)?,
                        end: parse(b)?,
                    },
                    _ => {
                        return Err(CvdmError::Config(format!(
                            "beta mode {s:?}: expected learned, ratio or linear:START:END"
                        )))
                    }
                }
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl BetaMode {
    pub fn validate(&self) -> Result<()> {
        if let BetaMode::FixedLinear { start, end } = *self {
            if !(0.0 < start && start <= end && end < 1.0) {
                return Err(CvdmError::Config(format!(
                    "linear schedule needs 0 < start <= end < 1, got {start}..{end}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub beta_mode: BetaMode,
    pub seed: u64,
    pub n_samples: usize,
    /// Chains evaluated together in one denoiser batch.
    pub chunk: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_mode: BetaMode::LearnedOverT,
            seed: 0,
            n_samples: 1,
            chunk: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.n_samples == 0 || self.chunk == 0 {
            return Err(CvdmError::Config("steps, n_samples and chunk must be >= 1".into()));
        }
        self.beta_mode.validate()
    }
}

/// Per-step coefficients; index `k` holds step `t = k + 1`.
#[derive(Debug, Clone)]
pub struct SamplingTables {
    pub beta: Vec<Tensor>,
    pub gamma: Vec<Tensor>,
}

impl SamplingTables {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

pub fn sampling_tables(
    schedule: &dyn Schedule,
    x: &Tensor,
    target_shape: &[usize],
    steps: usize,
    mode: BetaMode,
) -> Result<SamplingTables> {
    mode.validate()?;
    if steps == 0 {
        return Err(CvdmError::Config("sampling needs T >= 1".into()));
    }
    let tf = steps as f64;
    let (beta, gamma) = match mode {
        BetaMode::LearnedOverT => {
            let lambda = schedule.lambda_map(x)?;
            let ts: Vec<f64> = (1..=steps).map(|i| i as f64 / tf).collect();
            let tau = schedule.tau_at(&ts)?;
            let beta: Vec<Tensor> = tau
                .iter()
                .map(|&tv| lambda.map(|l| (tv * l / tf).clamp(EPS_CLIP, 1.0 - EPS_CLIP)))
                .collect();
            (beta.clone(), running_product(&beta)?)
        }
        BetaMode::RatioExact => {
            let table = schedule.discretize(steps, x, crate::schedule::BetaDefinition::Ratio)?;
            (table.beta_hat, table.gamma[1..].to_vec())
        }
        BetaMode::FixedLinear { start, end } => {
            let beta: Vec<Tensor> = (0..steps)
                .map(|k| {
                    let frac = if steps == 1 { 0.0 } else { k as f64 / (tf - 1.0) };
                    Tensor::full(target_shape, start + (end - start) * frac)
                })
                .collect();
            (beta.clone(), running_product(&beta)?)
        }
    };
    if beta[0].shape() != target_shape {
        return Err(CvdmError::Shape(format!(
            "schedule map {:?} vs target {:?}",
            beta[0].shape(),
            target_shape
        )));
    }
    Ok(SamplingTables { beta, gamma })
}

fn running_product(beta: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(beta.len());
    for b in beta {
        let next = match out.last() {
            Some(prev) => prev.zip_map(b, |g, bb| g * (1.0 - bb))?,
            None => b.map(|bb| 1.0 - bb),
        };
        out.push(next);
    }
    Ok(out)
}

/// One reverse update `z_{t−1} = (z_t − β/√(1 − γ)·ε̂)/√(1 − β) + √β·ε`.
pub fn ancestral_step(z: f64, eps_hat: f64, beta: f64, gamma: f64, noise: f64) -> f64 {
    let alpha = 1.0 - beta;
    (z - beta / (1.0 - gamma).max(EPS_SIGMA).sqrt() * eps_hat) / alpha.sqrt() + beta.sqrt() * noise
}

/// Runs independent chains for a batch of conditions `x: [B, C_x, H, W]`.
/// Chain `b` draws its noise from the stream `(seed, "chain", chain_ids[b])`.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains(
    x: &Tensor,
    denoiser: &dyn NoisePredictor,
    schedule: &dyn Schedule,
    target_channels: usize,
    steps: usize,
    mode: BetaMode,
    seed: u64,
    chain_ids: &[u64],
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 || xs[0] != chain_ids.len() {
        return Err(CvdmError::Shape(format!(
            "{} chain ids for conditions {:?}",
            chain_ids.len(),
            xs
        )));
    }
    let shape = [xs[0], target_channels, xs[2], xs[3]];
    let tables = sampling_tables(schedule, x, &shape, steps, mode)?;
    let per = target_channels * xs[2] * xs[3];
    let mut rngs: Vec<_> = chain_ids.iter().map(|&c| rng::stream(seed, "chain", c)).collect();
    let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| {
        let mut data = Vec::with_capacity(per * rngs.len());
        for r in rngs.iter_mut() {
            data.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
        }
        Tensor::new(&shape, data).expect("shape")
    };
    let mut z = draw(&mut rngs);
    for k in (0..steps).rev() {
        let (beta, gamma) = (&tables.beta[k], &tables.gamma[k]);
        let eps_hat = {
            let g = Graph::no_grad();
            denoiser
                .predict_noise(&g, g.constant(z.clone()), g.constant(gamma.clone()), g.constant(x.clone()))?
                .value()
        };
        let noise = if k == 0 { Tensor::zeros(&shape) } else { draw(&mut rngs) };
        let data: Vec<f64> = (0..z.numel())
            .map(|i| {
                ancestral_step(
                    z.data()[i],
                    eps_hat.data()[i],
                    beta.data()[i],
                    gamma.data()[i],
                    noise.data()[i],
                )
            })
            .collect();
        z = Tensor::new(&shape, data)?;
        if !z.is_finite() {
            return Err(CvdmError::NonFinite(format!("latent became non-finite at step t = {}", k + 1)));
        }
    }
    Ok(z)
}

/// A single draw for one condition `x: [1, C_x, H, W]` (chain 0).
pub fn sample(
    x: &Tensor,
    denoiser: &dyn NoisePredictor,
    schedule: &dyn Schedule,
    target_channels: usize,
    config: &SamplerConfig,
) -> Result<Tensor> {
    config.validate()?;
    sample_chains(x, denoiser, schedule, target_channels, config.steps, config.beta_mode, config.seed, &[0])
}

#[derive(Debug, Clone)]
pub struct SampleStack {
    /// `[N, C_y, H, W]`.
    pub samples: Tensor,
    pub mean: Tensor,
    /// Unbiased per-element variance (zero when `N = 1`).
    pub variance: Tensor,
}

/// `config.n_samples` chains for one condition, with mean and variance maps.
pub fn sample_batch(
    x: &Tensor,
    denoiser: &dyn NoisePredictor,
    schedule: &dyn Schedule,
    target_channels: usize,
    config: &SamplerConfig,
) -> Result<SampleStack> {
    config.validate()?;
    if x.shape().first() != Some(&1) {
        return Err(CvdmError::Shape(format!("expected one condition [1, C, H, W], got {:?}", x.shape())));
    }
    let mut parts = Vec::new();
    let ids: Vec<u64> = (0..config.n_samples as u64).collect();
    for chunk in ids.chunks(config.chunk) {
        let xb = Tensor::concat(&vec![x; chunk.len()], 0)?;
        parts.push(sample_chains(
            &xb,
            denoiser,
            schedule,
            target_channels,
            config.steps,
            config.beta_mode,
            config.seed,
            chunk,
        )?);
    }
    let samples = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?;
    let (mean, variance) = mean_variance(&samples)?;
    Ok(SampleStack {
        samples,
        mean,
        variance,
    })
}

/// Per-element mean and unbiased variance over the leading axis.
pub fn mean_variance(samples: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = samples.shape()[0];
    let mut shape = samples.shape().to_vec();
    shape[0] = 1;
    let per = samples.numel() / n.max(1);
    let mut mean = vec![0.0; per];
    let mut m2 = vec![0.0; per];
    // Welford
    for s in 0..n {
        let row = &samples.data()[s * per..(s + 1) * per];
        for i in 0..per {
            let d = row[i] - mean[i];
            mean[i] += d / (s + 1) as f64;
            m2[i] += d * (row[i] - mean[i]);
        }
    }
    let var = m2.iter().map(|v| if n > 1 { v / (n - 1) as f64 } else { 0.0 }).collect();
    Ok((Tensor::new(&shape, mean)?, Tensor::new(&shape, var)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::IdealDenoiser;
    use crate::schedule::AnalyticSchedule;

    #[test]
    fn one_step_arithmetic() {
        let z = ancestral_step(0.5, 0.2, 0.25, 0.6, 0.0);
        let expected = (0.5 - 0.25 / 0.4f64.sqrt() * 0.2) / 0.75f64.sqrt();
        assert!((z - expected).abs() < 1e-15);
        assert!((z - 0.486_06).abs() < 1e-5);
    }

    #[test]
    fn beta_mode_parsing() {
        assert_eq!("learned".parse::<BetaMode>().unwrap(), BetaMode::LearnedOverT);
        assert_eq!("ratio".parse::<BetaMode>().unwrap(), BetaMode::RatioExact);
        assert_eq!(
            "linear:0.0001:0.03".parse::<BetaMode>().unwrap(),
            BetaMode::FixedLinear {
                start: 1e-4,
                end: 0.03
            }
        );
        assert!("linear:0.5:0.1".parse::<BetaMode>().is_err());
        assert!("linear:0:0.1".parse::<BetaMode>().is_err());
        assert!("cosine".parse::<BetaMode>().is_err());
        let m = BetaMode::FixedLinear { start: 0.1, end: 0.2 };
        assert_eq!(m.to_string().parse::<BetaMode>().unwrap(), m);
    }

    #[test]
    fn table_modes() {
        let s = AnalyticSchedule::linear(5.0);
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let shape = [1, 1, 2, 2];
        let r = sampling_tables(&s, &x, &shape, 50, BetaMode::RatioExact).unwrap();
        let mut prod = 1.0;
        for k in 0..50 {
            prod *= 1.0 - r.beta[k].data()[0];
            let exact = (-5.0 * (k + 1) as f64 / 50.0).exp();
            assert!((r.gamma[k].data()[0] - exact).abs() <= 1e-12 * exact);
            assert!((prod - exact).abs() <= 1e-10 * exact);
        }
        let l = sampling_tables(&s, &x, &shape, 50, BetaMode::LearnedOverT).unwrap();
        assert!((l.beta[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((l.gamma[1].data()[0] - 0.81).abs() < 1e-15);
        let f = sampling_tables(&s, &x, &shape, 500, BetaMode::FixedLinear { start: 1e-4, end: 0.03 }).unwrap();
        assert_eq!(f.beta[0].data()[0], 1e-4);
        assert!((f.beta[499].data()[0] - 0.03).abs() < 1e-15);
        assert!(f.gamma[499].data()[0] > 0.0 && f.gamma[499].data()[0] < 1e-2);
    }

    #[test]
    fn repeated_seed_gives_zero_variance_and_nonnegative_maps() {
        let s = AnalyticSchedule::linear(8.0);
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let y = Tensor::new(&[1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let den = IdealDenoiser { target: y };
        let cfg = SamplerConfig {
            steps: 20,
            ..SamplerConfig::default()
        };
        let a = sample(&x, &den, &s, 1, &cfg).unwrap();
        let b = sample(&x, &den, &s, 1, &cfg).unwrap();
        let (_, var) = mean_variance(&Tensor::concat(&[&a, &b], 0).unwrap()).unwrap();
        assert!(var.data().iter().all(|&v| v == 0.0));
        let stack = sample_batch(
            &x,
            &den,
            &s,
            1,
            &SamplerConfig {
                n_samples: 5,
                chunk: 2,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(stack.samples.shape(), &[5, 1, 2, 2]);
        assert!(stack.variance.data().iter().all(|&v| v >= 0.0));
        // chunking does not change chain streams
        let single = sample_chains(&x, &den, &s, 1, 20, BetaMode::LearnedOverT, 0, &[3]).unwrap();
        assert_eq!(single.data(), &stack.samples.data()[12..16]);
    }
}
