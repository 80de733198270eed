//! Forward corruption, Markov transitions, the Gaussian posterior of one
//! reverse step, and the noise/target reparametrisation.
//!
//! The functions take `γ` maps directly so they work with any schedule; the
//! `*_at` variants evaluate a [`Schedule`] first.

use crate::error::{CvdmError, Result};
use crate::schedule::{BetaDefinition, Schedule, ScheduleExt, EPS_CLIP, EPS_GAMMA, EPS_SIGMA};
use crate::tensor::Tensor;

/// A noisy latent `z_t` at time `t`, optionally with its `γ(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: f64,
    pub gamma: Option<Tensor>,
}

impl LatentState {
    pub fn new(z: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CvdmError::Domain(format!("time {t} outside [0, 1]")));
        }
        if !z.is_finite() {
            return Err(CvdmError::NonFinite("latent contains non-finite values".into()));
        }
        Ok(Self { z, t, gamma: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu_b: Tensor,
    pub sigma_b: Tensor,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CvdmError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `z_t = √γ·y + √(1 − γ)·ε`.
pub fn sample_forward(y: &Tensor, gamma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape(y, eps, "noise vs target")?;
    same_shape(y, gamma, "gamma vs target")?;
    let data = y
        .data()
        .iter()
        .zip(gamma.data())
        .zip(eps.data())
        .map(|((&y, &g), &e)| g.sqrt() * y + (1.0 - g).sqrt() * e)
        .collect();
    Tensor::new(y.shape(), data)
}

pub fn sample_forward_at(
    schedule: &dyn Schedule,
    y: &Tensor,
    x: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    sample_forward(y, &schedule.gamma(t, x)?, eps)
}

/// `β̂ = 1 − γ_i/γ_{i−1}`, clamped into `[0, 1 − ε_clip]`.
pub fn beta_ratio(gamma_prev: &Tensor, gamma_cur: &Tensor) -> Result<Tensor> {
    gamma_prev.zip_map(gamma_cur, |gp, gc| (1.0 - gc / gp).clamp(0.0, 1.0 - EPS_CLIP))
}

/// `(√(1 − β̂), β̂)` of the transition `q(z_{t_i} | z_{t_{i−1}})`.
pub fn transition_params(gamma_prev: &Tensor, gamma_cur: &Tensor) -> Result<(Tensor, Tensor)> {
    let beta = beta_ratio(gamma_prev, gamma_cur)?;
    Ok((beta.map(|b| (1.0 - b).sqrt()), beta))
}

/// Transition into step `i` of a `T`-step grid on `t_i = i/T`.
pub fn transition_params_at(
    schedule: &dyn Schedule,
    i: usize,
    steps: usize,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if i == 0 || i > steps {
        return Err(CvdmError::Domain(format!("transition index {i} outside 1..={steps}")));
    }
    let table = schedule.discretize(steps, x, BetaDefinition::Ratio)?;
    let beta = table.beta_hat[i - 1].clone();
    Ok((beta.map(|b| (1.0 - b).sqrt()), beta))
}

/// Mean and variance of `q(z_{t_{i−1}} | z_{t_i}, y)`.
pub fn posterior_params(
    z: &Tensor,
    y: &Tensor,
    gamma_prev: &Tensor,
    gamma_cur: &Tensor,
) -> Result<PosteriorParams> {
    same_shape(z, y, "latent vs target")?;
    same_shape(z, gamma_cur, "latent vs gamma")?;
    let beta = beta_ratio(gamma_prev, gamma_cur)?;
    let n = z.numel();
    let mut mu = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for k in 0..n {
        let (gp, gc, b) = (gamma_prev.data()[k], gamma_cur.data()[k], beta.data()[k]);
        let sc = 1.0 - gc;
        if sc < EPS_SIGMA {
            return Err(CvdmError::Singularity(format!(
                "σ(t_i) = {sc:e} below {EPS_SIGMA:e} at element {k}"
            )));
        }
        let sp = 1.0 - gp;
        mu.push((1.0 - b).sqrt() * sp / sc * z.data()[k] + gp.sqrt() * b / sc * y.data()[k]);
        var.push((b * sp / sc).max(0.0));
    }
    Ok(PosteriorParams {
        mu_b: Tensor::new(z.shape(), mu)?,
        sigma_b: Tensor::new(z.shape(), var)?,
    })
}

pub fn posterior_params_at(
    schedule: &dyn Schedule,
    z: &Tensor,
    i: usize,
    steps: usize,
    y: &Tensor,
    x: &Tensor,
) -> Result<PosteriorParams> {
    if i == 0 || i > steps {
        return Err(CvdmError::Domain(format!("posterior index {i} outside 1..={steps}")));
    }
    let gp = schedule.gamma((i - 1) as f64 / steps as f64, x)?;
    let gc = schedule.gamma(i as f64 / steps as f64, x)?;
    posterior_params(z, y, &gp, &gc)
}

/// `ŷ = (z_t − √(1 − γ)·ε̂)/√γ`.
pub fn predict_y_from_eps(z: &Tensor, gamma: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(z, eps_hat, "latent vs predicted noise")?;
    same_shape(z, gamma, "latent vs gamma")?;
    if let Some(g) = gamma.data().iter().find(|&&g| g < EPS_GAMMA) {
        return Err(CvdmError::Singularity(format!(
            "γ = {g:e} below {EPS_GAMMA:e}: target not recoverable"
        )));
    }
    let data = z
        .data()
        .iter()
        .zip(gamma.data())
        .zip(eps_hat.data())
        .map(|((&z, &g), &e)| (z - (1.0 - g).sqrt() * e) / g.sqrt())
        .collect();
    Tensor::new(z.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn forward_sample_arithmetic() {
        let z = sample_forward(&s(2.0), &s(0.64), &s(0.5)).unwrap();
        assert!((z.item() - 1.9).abs() < 1e-15);
        assert_eq!(sample_forward(&s(0.7), &s(1.0), &s(3.0)).unwrap().item(), 0.7);
        assert!(sample_forward(&s(1.0), &s(0.5), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn transition_arithmetic() {
        let (m, b) = transition_params(&s(0.8), &s(0.6)).unwrap();
        assert!((b.item() - 0.25).abs() < 1e-15);
        assert!((m.item() - 0.75f64.sqrt()).abs() < 1e-15);
        let (m, b) = transition_params(&s(0.4), &s(0.4)).unwrap();
        assert_eq!((m.item(), b.item()), (1.0, 0.0));
    }

    #[test]
    fn posterior_arithmetic() {
        let p = posterior_params(&s(0.5), &s(1.0), &s(0.8), &s(0.6)).unwrap();
        assert!((p.mu_b.item() - 0.775_523_345_3).abs() < 1e-9);
        assert!((p.sigma_b.item() - 0.125).abs() < 1e-15);
        // degenerate step
        let p = posterior_params(&s(0.3), &s(1.0), &s(0.6), &s(0.6)).unwrap();
        assert_eq!((p.mu_b.item(), p.sigma_b.item()), (0.3, 0.0));
        assert!(matches!(
            posterior_params(&s(0.3), &s(1.0), &s(1.0), &s(1.0)),
            Err(CvdmError::Singularity(_))
        ));
    }

    #[test]
    fn noiseless_pair_posterior_mean() {
        let (gp, gc, y): (f64, f64, f64) = (0.8, 0.6, 1.3);
        let z = gc.sqrt() * y;
        let p = posterior_params(&s(z), &s(y), &s(gp), &s(gc)).unwrap();
        assert!((p.mu_b.item() - gp.sqrt() * y).abs() < 1e-14);
    }

    #[test]
    fn predict_y_arithmetic() {
        let y = predict_y_from_eps(&s(1.0), &s(0.25), &s(0.4)).unwrap();
        assert!((y.item() - 1.307_179_676_972_449).abs() < 1e-14);
        assert_eq!(predict_y_from_eps(&s(0.9), &s(1.0), &s(7.0)).unwrap().item(), 0.9);
        assert!(matches!(
            predict_y_from_eps(&s(0.9), &s(1e-9), &s(0.0)),
            Err(CvdmError::Singularity(_))
        ));
    }
}
