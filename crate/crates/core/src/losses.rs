//! The training objective: ODE residual with boundary penalties, prior KL,
//! simplified diffusion loss and the curvature regulariser on `γ`.
//!
//! Every term is a squared norm: summed over elements, averaged over the batch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Jet, Var};
use crate::denoiser::NoisePredictor;
use crate::error::{CvdmError, Result};
use crate::schedule::{beta_from, gamma_jet, time_column, Schedule, EPS_SIGMA};
use crate::tensor::Tensor;

/// Step used by the finite-difference curvature estimate.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMethod {
    #[default]
    Autodiff,
    /// Central second difference with step [`FD_STEP`].
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub curvature: CurvatureMethod,
    /// Multiply the diffusion term by `−SNR'/SNR`. Off by default.
    pub snr_weight: bool,
}

/// Scalar values of every term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_beta: f64,
    pub kl_prior: f64,
    pub l_inf_hat: f64,
    pub l_gamma: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    /// Names of the terms that are not finite.
    pub fn non_finite_terms(&self) -> Vec<&'static str> {
        [
            ("l_beta", self.l_beta),
            ("kl_prior", self.kl_prior),
            ("l_inf_hat", self.l_inf_hat),
            ("l_gamma", self.l_gamma),
            ("total", self.total),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Per-sample randomness of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    /// One time per batch element.
    pub t: Vec<f64>,
    /// Standard normal noise shaped like the target batch.
    pub eps: Tensor,
}

impl LossDraws {
    pub fn sample(rng: &mut impl Rng, target_shape: &[usize]) -> Self {
        let b = target_shape[0];
        let t = (0..b).map(|_| rng.random::<f64>()).collect();
        let eps = Tensor::from_fn(target_shape, |_| rng.sample(StandardNormal));
        Self { t, eps }
    }
}

/// Graph nodes of the four terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g> {
    pub l_beta: Var<'g>,
    pub kl_prior: Var<'g>,
    pub l_inf_hat: Var<'g>,
    pub l_gamma: Var<'g>,
}

impl<'g> LossTerms<'g> {
    pub fn total(&self, alpha: f64) -> Result<Var<'g>> {
        let base = self.l_beta.add(self.kl_prior)?.add(self.l_inf_hat)?;
        if alpha == 0.0 {
            return Ok(base);
        }
        base.add(self.l_gamma.scale(alpha)?)
    }

    pub fn breakdown(&self, alpha: f64) -> LossBreakdown {
        let (l_beta, kl_prior, l_inf_hat, l_gamma) = (
            self.l_beta.item(),
            self.kl_prior.item(),
            self.l_inf_hat.item(),
            self.l_gamma.item(),
        );
        let mut total = l_beta + kl_prior + l_inf_hat;
        if alpha != 0.0 {
            total += alpha * l_gamma;
        }
        LossBreakdown {
            l_beta,
            kl_prior,
            l_inf_hat,
            l_gamma,
            total,
            alpha,
        }
    }
}

fn batch_mean_of_sums(v: Var<'_>) -> Result<Var<'_>> {
    let b = v.shape()[0] as f64;
    v.sum()?.scale(1.0 / b)
}

/// `γ(t, x)` as a jet for one time per batch element.
pub fn gamma_at<'g>(schedule: &dyn Schedule, g: &'g Graph, lambda: Var<'g>, t: &[f64]) -> Result<Jet<'g>> {
    let rho = schedule.rho(g, Jet::variable(time_column(g, t)))?;
    gamma_jet(lambda, rho)
}

fn gamma_value<'g>(schedule: &dyn Schedule, g: &'g Graph, lambda: Var<'g>, t: f64) -> Result<Var<'g>> {
    let b = lambda.shape()[0];
    let rho = schedule.rho(g, Jet::constant(time_column(g, &vec![t; b])))?;
    Ok(gamma_jet(lambda, rho)?.v)
}

/// `‖∂γ/∂t + βγ‖²`.
pub fn ode_residual<'g>(gamma: Jet<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    batch_mean_of_sums(gamma.d1.add(beta.mul(gamma.v)?)?.square()?)
}

/// `‖γ(0, x) − 1‖² + ‖γ(1, x)‖²`.
pub fn boundary_penalty<'g>(schedule: &dyn Schedule, g: &'g Graph, lambda: Var<'g>) -> Result<Var<'g>> {
    let g0 = gamma_value(schedule, g, lambda, 0.0)?;
    let g1 = gamma_value(schedule, g, lambda, 1.0)?;
    batch_mean_of_sums(g0.offset(-1.0)?.square()?)?.add(batch_mean_of_sums(g1.square()?)?)
}

/// `L_β` for one time per batch element.
pub fn loss_beta<'g>(schedule: &dyn Schedule, g: &'g Graph, x: Var<'g>, t: &[f64]) -> Result<Var<'g>> {
    check_times(t, x.shape()[0])?;
    let lambda = schedule.lambda(g, x)?;
    let gamma = gamma_at(schedule, g, lambda, t)?;
    let beta = beta_from(lambda, schedule.tau(g, time_column(g, t))?)?;
    ode_residual(gamma, beta)?.add(boundary_penalty(schedule, g, lambda)?)
}

/// Closed-form `KL(N(√γ₁·y, σ₁) ‖ N(0, 1))` per element, summed, averaged over batch.
pub fn kl_prior<'g>(schedule: &dyn Schedule, g: &'g Graph, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let lambda = schedule.lambda(g, x)?;
    kl_from_lambda(schedule, g, lambda, y)
}

fn kl_from_lambda<'g>(schedule: &dyn Schedule, g: &'g Graph, lambda: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let g1 = gamma_value(schedule, g, lambda, 1.0)?;
    let sigma = g1.rsub(1.0)?;
    let min = sigma.with_value(|s| s.data().iter().copied().fold(f64::INFINITY, f64::min));
    if min < EPS_SIGMA {
        return Err(CvdmError::Singularity(format!(
            "σ(1, x) = {min:e} below {EPS_SIGMA:e} in the prior KL"
        )));
    }
    let per = sigma
        .add(g1.mul(y.square()?)?)?
        .offset(-1.0)?
        .sub(sigma.ln()?)?
        .scale(0.5)?;
    batch_mean_of_sums(per)
}

/// Scalar reference `KL(N(μ, v) ‖ N(0, 1))`.
pub fn kl_standard_normal(mean: f64, var: f64) -> f64 {
    0.5 * (var + mean * mean - 1.0 - var.ln())
}

/// `½‖ε − ε̂(z_t, γ, x)‖²` summed over elements, averaged over the batch.
/// `weight`, when given, multiplies the squared error elementwise.
pub fn diffusion_hat<'g>(
    denoiser: &dyn NoisePredictor,
    g: &'g Graph,
    gamma: Var<'g>,
    x: Var<'g>,
    y: Var<'g>,
    eps: &Tensor,
    weight: Option<Var<'g>>,
) -> Result<Var<'g>> {
    let e = g.constant(eps.clone());
    let z = gamma.sqrt()?.mul(y)?.add(gamma.rsub(1.0)?.sqrt()?.mul(e)?)?;
    let e_hat = denoiser.predict_noise(g, z, gamma, x)?;
    let mut err = e.sub(e_hat)?.square()?;
    if let Some(w) = weight {
        err = err.mul(w)?;
    }
    batch_mean_of_sums(err.scale(0.5)?)
}

pub fn loss_diffusion_hat<'g>(
    schedule: &dyn Schedule,
    denoiser: &dyn NoisePredictor,
    g: &'g Graph,
    x: Var<'g>,
    y: Var<'g>,
    draws: &LossDraws,
) -> Result<Var<'g>> {
    check_times(&draws.t, x.shape()[0])?;
    let lambda = schedule.lambda(g, x)?;
    let gamma = gamma_at(schedule, g, lambda, &draws.t)?;
    diffusion_hat(denoiser, g, gamma.v, x, y, &draws.eps, None)
}

/// `‖∂²γ/∂t²‖²` from a jet.
pub fn curvature_penalty<'g>(gamma: Jet<'g>) -> Result<Var<'g>> {
    batch_mean_of_sums(gamma.d2.square()?)
}

fn curvature_fd<'g>(schedule: &dyn Schedule, g: &'g Graph, lambda: Var<'g>, t: &[f64]) -> Result<Var<'g>> {
    let h = FD_STEP;
    let centre: Vec<f64> = t.iter().map(|&v| v.clamp(h, 1.0 - h)).collect();
    let at = |offset: f64| -> Result<Var<'g>> {
        let ts: Vec<f64> = centre.iter().map(|v| v + offset).collect();
        let rho = schedule.rho(g, Jet::constant(time_column(g, &ts)))?;
        Ok(gamma_jet(lambda, rho)?.v)
    };
    let (gp, g0, gm) = (at(h)?, at(0.0)?, at(-h)?);
    batch_mean_of_sums(gp.sub(g0.scale(2.0)?)?.add(gm)?.scale(1.0 / (h * h))?.square()?)
}

/// `L_γ` for one time per batch element.
pub fn loss_gamma_reg<'g>(
    schedule: &dyn Schedule,
    g: &'g Graph,
    x: Var<'g>,
    t: &[f64],
    method: CurvatureMethod,
) -> Result<Var<'g>> {
    check_times(t, x.shape()[0])?;
    let lambda = schedule.lambda(g, x)?;
    match method {
        CurvatureMethod::Autodiff => curvature_penalty(gamma_at(schedule, g, lambda, t)?),
        CurvatureMethod::FiniteDifference => curvature_fd(schedule, g, lambda, t),
    }
}

fn check_times(t: &[f64], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(CvdmError::Shape(format!("{} times for batch of {batch}", t.len())));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CvdmError::Domain(format!("time {bad} outside [0, 1]")));
    }
    Ok(())
}

/// All four terms on one graph, sharing the condition network and time jets.
pub fn loss_terms<'g>(
    schedule: &dyn Schedule,
    denoiser: &dyn NoisePredictor,
    g: &'g Graph,
    x: &Tensor,
    y: &Tensor,
    draws: &LossDraws,
    config: &LossConfig,
) -> Result<LossTerms<'g>> {
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    check_times(&draws.t, x.shape()[0])?;
    let lambda = schedule.lambda(g, xv)?;
    if lambda.shape() != y.shape() {
        return Err(CvdmError::Shape(format!(
            "schedule map {:?} vs target {:?}",
            lambda.shape(),
            y.shape()
        )));
    }
    let gamma = gamma_at(schedule, g, lambda, &draws.t)?;
    let beta = beta_from(lambda, schedule.tau(g, time_column(g, &draws.t))?)?;
    let l_beta = ode_residual(gamma, beta)?.add(boundary_penalty(schedule, g, lambda)?)?;
    let kl_prior = kl_from_lambda(schedule, g, lambda, yv)?;
    let weight = if config.snr_weight {
        // −SNR'/SNR = −γ'/(γ(1 − γ))
        let sigma = gamma.v.rsub(1.0)?.offset(EPS_SIGMA)?;
        Some(gamma.d1.neg()?.div(gamma.v.mul(sigma)?)?)
    } else {
        None
    };
    let l_inf_hat = diffusion_hat(denoiser, g, gamma.v, xv, yv, &draws.eps, weight)?;
    let l_gamma = match config.curvature {
        CurvatureMethod::Autodiff => curvature_penalty(gamma)?,
        CurvatureMethod::FiniteDifference => curvature_fd(schedule, g, lambda, &draws.t)?,
    };
    Ok(LossTerms {
        l_beta,
        kl_prior,
        l_inf_hat,
        l_gamma,
    })
}

/// Evaluates the objective without gradients.
pub fn loss_total(
    schedule: &dyn Schedule,
    denoiser: &dyn NoisePredictor,
    x: &Tensor,
    y: &Tensor,
    alpha: f64,
    draws: &LossDraws,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let g = Graph::no_grad();
    Ok(loss_terms(schedule, denoiser, &g, x, y, draws, config)?.breakdown(alpha))
}

/// Element-averaged health measures of a schedule over conditions `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDiagnostics {
    /// Mean of `γ` over the interior grid points and all elements.
    pub mean_gamma: f64,
    /// Mean of `(∂γ/∂t + βγ)²` over the interior grid points and all elements.
    pub mean_residual: f64,
    pub mean_gamma_end: f64,
    /// `γ` non-increasing along the grid for every element.
    pub monotone: bool,
}

/// Evaluates on `t_k = k/points`, `k = 0..=points`.
pub fn schedule_diagnostics(schedule: &dyn Schedule, x: &Tensor, points: usize) -> Result<ScheduleDiagnostics> {
    if points < 2 {
        return Err(CvdmError::Domain("need at least two grid intervals".into()));
    }
    let g = Graph::no_grad();
    let lambda = schedule.lambda(&g, g.constant(x.clone()))?;
    let b = x.shape()[0];
    let (mut gamma_sum, mut residual_sum) = (0.0, 0.0);
    let mut prev: Option<Tensor> = None;
    let mut monotone = true;
    let mut end = 0.0;
    for k in 0..=points {
        let t = k as f64 / points as f64;
        let ts = vec![t; b];
        let gamma = gamma_at(schedule, &g, lambda, &ts)?;
        let beta = beta_from(lambda, schedule.tau(&g, time_column(&g, &ts))?)?;
        let value = gamma.v.value();
        if k > 0 && k < points {
            gamma_sum += value.mean();
            residual_sum += gamma.d1.add(beta.mul(gamma.v)?)?.square()?.value().mean();
        }
        if let Some(p) = &prev {
            monotone &= p.data().iter().zip(value.data()).all(|(a, b)| b <= a);
        }
        if k == points {
            end = value.mean();
        }
        prev = Some(value);
    }
    let n = (points - 1) as f64;
    Ok(ScheduleDiagnostics {
        mean_gamma: gamma_sum / n,
        mean_residual: residual_sum / n,
        mean_gamma_end: end,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{IdealDenoiser, ZeroDenoiser};
    use crate::schedule::AnalyticSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x_of(b: usize) -> Tensor {
        Tensor::zeros(&[b, 1, 1, 1])
    }

    fn midpoints(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
    }

    fn eval(f: impl for<'g> FnOnce(&'g Graph) -> Result<Var<'g>>) -> f64 {
        let g = Graph::no_grad();
        f(&g).unwrap().item()
    }

    #[test]
    fn l_beta_matched_fixture_is_boundary_only() {
        let s = AnalyticSchedule::linear(10.0);
        let t = midpoints(64);
        let v = eval(|g| loss_beta(&s, g, g.constant(x_of(64)), &t));
        assert!((v - (-20f64).exp()).abs() < 1e-15);
        let r = eval(|g| {
            let l = s.lambda(g, g.constant(x_of(64)))?;
            let gam = gamma_at(&s, g, l, &t)?;
            let beta = beta_from(l, s.tau(g, time_column(g, &t))?)?;
            ode_residual(gam, beta)
        });
        assert!(r < 1e-20);
    }

    #[test]
    fn l_beta_mismatched_fixture() {
        let s = AnalyticSchedule::mismatched(10.0, 5.0);
        let n = 4000;
        let t = midpoints(n);
        let v = eval(|g| loss_beta(&s, g, g.constant(x_of(n)), &t));
        let expected = 1.25 * (1.0 - (-20f64).exp()) + (-20f64).exp();
        assert!((v - expected).abs() < 1e-4 * expected, "{v}");
    }

    #[test]
    fn l_beta_constant_schedule() {
        let s = AnalyticSchedule::linear(0.0);
        let v = eval(|g| loss_beta(&s, g, g.constant(x_of(3)), &[0.1, 0.5, 0.9]));
        assert_eq!(v, 1.0);
    }

    #[test]
    fn curvature_fixtures() {
        // γ = 1 − t²
        let t = midpoints(16);
        let v = eval(|g| {
            let tj = Jet::variable(time_column(g, &t));
            curvature_penalty(tj.mul(tj)?.scale(-1.0)?.offset(1.0)?)
        });
        assert!((v - 4.0).abs() < 1e-12);

        let s = AnalyticSchedule::linear(10.0);
        let n = 4000;
        let t = midpoints(n);
        let ad = eval(|g| loss_gamma_reg(&s, g, g.constant(x_of(n)), &t, CurvatureMethod::Autodiff));
        let expected = 500.0 * (1.0 - (-20f64).exp());
        assert!((ad - expected).abs() < 1e-3 * expected, "{ad}");
        let fd = eval(|g| loss_gamma_reg(&s, g, g.constant(x_of(n)), &t, CurvatureMethod::FiniteDifference));
        assert!((fd - ad).abs() < 0.01 * ad, "{fd} vs {ad}");

        let flat = AnalyticSchedule::linear(0.0);
        let v = eval(|g| loss_gamma_reg(&flat, g, g.constant(x_of(4)), &[0.1, 0.2, 0.3, 0.4], CurvatureMethod::Autodiff));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kl_values() {
        assert!((kl_standard_normal(0.1, 0.9) - 7.680_257_828_9e-3).abs() < 1e-12);
        // γ(1) = 0.01 so σ = 0.99 and μ = 0.1·y
        let s = AnalyticSchedule::linear(-(0.01f64).ln());
        let y = Tensor::new(&[1, 1, 1, 2], vec![1.0, -2.0]).unwrap();
        let x = Tensor::zeros(&[1, 1, 1, 2]);
        let v = eval(|g| kl_prior(&s, g, g.constant(x.clone()), g.constant(y.clone())));
        let expected = kl_standard_normal(0.1, 0.99) + kl_standard_normal(0.2, 0.99);
        assert!((v - expected).abs() < 1e-14);
        // γ(1) ≈ 0 gives KL ≈ 0
        let s = AnalyticSchedule::linear(50.0);
        let v = eval(|g| kl_prior(&s, g, g.constant(x.clone()), g.constant(y.clone())));
        assert!(v.abs() < 1e-20);
        let flat = AnalyticSchedule::linear(0.0);
        let err = {
            let g = Graph::no_grad();
            kl_prior(&flat, &g, g.constant(x.clone()), g.constant(y.clone())).map(|v| v.item())
        };
        assert!(matches!(err, Err(CvdmError::Singularity(_))));
    }

    #[test]
    fn kl_decreases_as_gamma_one_vanishes() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let y = Tensor::full(&[1, 1, 1, 1], 0.7);
        let mut prev = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let s = AnalyticSchedule::linear(c);
            let v = eval(|g| kl_prior(&s, g, g.constant(x.clone()), g.constant(y.clone())));
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
    }

    #[test]
    fn diffusion_term_fixtures() {
        let s = AnalyticSchedule::linear(3.0);
        let x = Tensor::zeros(&[1, 1, 1, 2]);
        let y = Tensor::new(&[1, 1, 1, 2], vec![0.4, -0.1]).unwrap();
        let draws = LossDraws {
            t: vec![0.6],
            eps: Tensor::new(&[1, 1, 1, 2], vec![0.3, -0.1]).unwrap(),
        };
        let ideal = IdealDenoiser { target: y.clone() };
        let v = eval(|g| loss_diffusion_hat(&s, &ideal, g, g.constant(x.clone()), g.constant(y.clone()), &draws));
        assert!(v.abs() < 1e-28);
        let v = eval(|g| loss_diffusion_hat(&s, &ZeroDenoiser, g, g.constant(x.clone()), g.constant(y.clone()), &draws));
        assert!((v - 0.05).abs() < 1e-15);
        // fixed ε̂ = [0, 0.1]
        let g = Graph::no_grad();
        let gamma = g.constant(Tensor::full(&[1, 1, 1, 2], 0.5));
        struct Fixed;
        impl NoisePredictor for Fixed {
            fn predict_noise<'g>(&self, g: &'g Graph, _z: Var<'g>, _gm: Var<'g>, _x: Var<'g>) -> Result<Var<'g>> {
                Ok(g.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.1])?))
            }
        }
        let v = diffusion_hat(&Fixed, &g, gamma, g.constant(x.clone()), g.constant(y.clone()), &draws.eps, None)
            .unwrap()
            .item();
        assert!((v - 0.065).abs() < 1e-15);
    }

    #[test]
    fn total_with_ideal_denoiser_is_boundary_plus_kl() {
        let s = AnalyticSchedule::linear(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::from_fn(&[4, 1, 2, 2], |i| (i as f64 * 0.3).sin());
        let x = Tensor::zeros(&[4, 1, 2, 2]);
        let draws = LossDraws::sample(&mut rng, y.shape());
        let ideal = IdealDenoiser { target: y.clone() };
        let cfg = LossConfig::default();
        let b = loss_total(&s, &ideal, &x, &y, 0.0, &draws, &cfg).unwrap();
        let e10 = (-10f64).exp();
        let e20 = e10 * e10;
        let kl: f64 = y
            .data()
            .iter()
            .map(|&v| kl_standard_normal(e10.sqrt() * v, 1.0 - e10))
            .sum::<f64>()
            / 4.0;
        // boundary term γ(1)² = e^-20 on each of the four elements
        assert!((b.total - (4.0 * e20 + kl)).abs() < 1e-15 * b.total);
        assert_eq!(b.total, b.l_beta + b.kl_prior + b.l_inf_hat);
        let b2 = loss_total(&s, &ideal, &x, &y, 0.0, &draws, &cfg).unwrap();
        assert_eq!(b.total.to_bits(), b2.total.to_bits());
        let with = loss_total(&s, &ideal, &x, &y, 0.5, &draws, &cfg).unwrap();
        assert_eq!(with.total, b.total + 0.5 * with.l_gamma);
    }

    #[test]
    fn snr_weight_matches_closed_form() {
        // ρ = c·t: −SNR'/SNR = c/(1 − γ)
        let c = 2.0;
        let s = AnalyticSchedule::linear(c);
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let y = Tensor::full(&[1, 1, 1, 1], 0.5);
        let draws = LossDraws {
            t: vec![0.4],
            eps: Tensor::full(&[1, 1, 1, 1], 0.9),
        };
        let cfg = LossConfig {
            snr_weight: true,
            ..LossConfig::default()
        };
        let b = loss_total(&s, &ZeroDenoiser, &x, &y, 0.0, &draws, &cfg).unwrap();
        let gamma = (-c * 0.4f64).exp();
        let expected = 0.5 * 0.81 * c / (1.0 - gamma + EPS_SIGMA);
        assert!((b.l_inf_hat - expected).abs() < 1e-12);
    }
}
