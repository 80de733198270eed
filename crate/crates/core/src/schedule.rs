//! Learned variance schedules.
//!
//! A schedule factors into a time part and a condition part:
//! `γ(t, x) = exp(−λ(x)·ρ(t))` and `β(t, x) = τ(t)·λ(x)`, with `ρ`
//! nondecreasing and `ρ(0) = 0`, `τ ≥ 0`, `λ > 0` elementwise. When
//! `ρ' = τ` the pair satisfies `∂γ/∂t = −β·γ`.
//!
//! Everything here is expressed on an autodiff [`Graph`] so the same code path
//! serves training (parameter gradients, time derivatives through [`Jet`]s)
//! and inference (a no-grad graph, see [`ScheduleExt`]).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inv, Graph, Jet, Var};
use crate::error::{CvdmError, Result};
use crate::nn::{MonotoneNet, OutputActivation, UNet, UNetConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Slope added to `ρ` so it is strictly increasing.
pub const EPS_MONO: f64 = 1e-4;
/// Upper clamp margin for discretised `β̂`, keeping `1 − β̂ > 0`.
pub const EPS_CLIP: f64 = 1e-5;
/// Floor for `σ = 1 − γ` wherever it divides.
pub const EPS_SIGMA: f64 = 1e-8;
/// Floor for `γ` wherever `√γ` divides.
pub const EPS_GAMMA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// One schedule per output element.
    #[default]
    Pixelwise,
    /// The condition map is averaged to a single value per sample and channel.
    Global,
}

/// The three factors of a schedule, evaluated on a graph.
pub trait Schedule {
    /// `λ(x)` for a batch `x: [B, C_x, H, W]`, shaped `[B, C_y, H, W]`.
    fn lambda<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    /// `ρ(t)` for `t: [B, 1]`, propagated as a jet.
    fn rho<'g>(&self, g: &'g Graph, t: Jet<'g>) -> Result<Jet<'g>>;

    /// `τ(t)` for `t: [B, 1]`.
    fn tau<'g>(&self, g: &'g Graph, t: Var<'g>) -> Result<Var<'g>>;
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(CvdmError::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `γ` together with its first two time derivatives, elementwise `[B, C, H, W]`.
pub fn gamma_jet<'g>(lambda: Var<'g>, rho: Jet<'g>) -> Result<Jet<'g>> {
    let b = rho.v.shape()[0];
    rho.reshape(&[b, 1, 1, 1])?
        .mul_const(lambda)?.scale(-1.0)?.exp()
}

/// `β = τ·λ` with `τ: [B, 1]` broadcast over `λ: [B, C, H, W]`.
pub fn beta_from<'g>(lambda: Var<'g>, tau: Var<'g>) -> Result<Var<'g>> {
    let b = tau.shape()[0];
    lambda.mul(tau.reshape(&[b, 1, 1, 1])?)
}

/// Batch of identical times as a `[B, 1]` constant.
pub fn time_column<'g>(g: &'g Graph, t: &[f64]) -> Var<'g> {
    g.constant(Tensor::new(&[t.len(), 1], t.to_vec()).expect("column"))
}

/// Closed-form fixture: `ρ(t) = a·t + b·t²`, `τ(t) = c + e·t`, constant `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSchedule {
    pub rho_linear: f64,
    pub rho_quadratic: f64,
    pub tau_constant: f64,
    pub tau_linear: f64,
    /// Broadcast against `[C_y, H, W]`; a single value means uniform `λ`.
    pub lambda: Tensor,
}

impl AnalyticSchedule {
    /// `ρ(t) = c·t`, `τ ≡ c`, `λ ≡ 1`: satisfies `ρ' = τ`.
    pub fn linear(c: f64) -> Self {
        Self {
            rho_linear: c,
            rho_quadratic: 0.0,
            tau_constant: c,
            tau_linear: 0.0,
            lambda: Tensor::scalar(1.0),
        }
    }

    /// `ρ(t) = a·t + b·t²` with the matching `τ = a + 2b·t`.
    pub fn quadratic(a: f64, b: f64) -> Self {
        Self {
            rho_linear: a,
            rho_quadratic: b,
            tau_constant: a,
            tau_linear: 2.0 * b,
            lambda: Tensor::scalar(1.0),
        }
    }

    /// `ρ(t) = rho_slope·t` but an unrelated constant `τ`.
    pub fn mismatched(rho_slope: f64, tau: f64) -> Self {
        Self {
            tau_constant: tau,
            ..Self::linear(rho_slope)
        }
    }

    pub fn with_lambda(mut self, lambda: Tensor) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn satisfies_ode(&self) -> bool {
        self.rho_linear == self.tau_constant && 2.0 * self.rho_quadratic == self.tau_linear
    }
}

impl Schedule for AnalyticSchedule {
    fn lambda<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let xs = x.shape();
        let shape = if self.lambda.numel() == 1 {
            vec![xs[0], 1, xs[2], xs[3]]
        } else {
            let mut s = vec![xs[0]];
            s.extend_from_slice(self.lambda.shape());
            if s.len() != 4 || s[2] != xs[2] || s[3] != xs[3] {
                return Err(CvdmError::Shape(format!(
                    "fixture lambda {:?} does not fit condition {:?}",
                    self.lambda.shape(),
                    xs
                )));
            }
            s
        };
        g.constant(self.lambda.clone()).broadcast_to(&shape)
    }

    fn rho<'g>(&self, _g: &'g Graph, t: Jet<'g>) -> Result<Jet<'g>> {
        let linear = t.scale(self.rho_linear)?;
        if self.rho_quadratic == 0.0 {
            return Ok(linear);
        }
        linear.add(t.mul(t)?.scale(self.rho_quadratic)?)
    }

    fn tau<'g>(&self, _g: &'g Graph, t: Var<'g>) -> Result<Var<'g>> {
        t.scale(self.tau_linear)?.offset(self.tau_constant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    /// Width of the sigmoid layer in the monotone time networks.
    pub hidden: usize,
    /// Initial `λ·ρ'` scale around `t = 0.5`.
    pub init_rate: f64,
    pub lambda_net: UNetConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Pixelwise,
            hidden: 1024,
            init_rate: 3.0,
            lambda_net: UNetConfig {
                levels: 3,
                base_filters: 4,
                instance_norm: true,
                padding: crate::tensor::Padding::Zero,
            },
        }
    }
}

/// Learnable schedule: two monotone time networks and a positive condition U-Net.
#[derive(Debug, Clone)]
pub struct ScheduleModel {
    rho_net: MonotoneNet,
    tau_net: MonotoneNet,
    lambda_net: UNet,
    mode: ScheduleMode,
}

impl ScheduleModel {
    pub fn new(
        store: &mut ParamStore,
        config: &ScheduleConfig,
        condition_channels: usize,
        target_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.hidden == 0 || config.init_rate <= 0.0 {
            return Err(CvdmError::Config(
                "schedule hidden width and init_rate must be positive".into(),
            ));
        }
        let rho_net = MonotoneNet::new(store, "schedule.rho", config.hidden, config.init_rate, rng);
        let tau_net = MonotoneNet::new(store, "schedule.tau", config.hidden, config.init_rate, rng);
        let lambda_net = UNet::new(
            store,
            "schedule.lambda",
            &config.lambda_net,
            condition_channels,
            target_channels,
            OutputActivation::Softplus,
            true,
            rng,
        )?;
        // zero head weights: λ starts uniform at 1
        store.get_mut(lambda_net.head_bias()).data_mut().fill(softplus_inv(1.0));
        Ok(Self {
            rho_net,
            tau_net,
            lambda_net,
            mode: config.mode,
        })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn bind<'a>(&'a self, params: &'a ParamStore) -> LearnedSchedule<'a> {
        LearnedSchedule {
            model: self,
            params,
        }
    }
}

/// A [`ScheduleModel`] paired with its parameter values.
#[derive(Debug, Clone, Copy)]
pub struct LearnedSchedule<'a> {
    pub model: &'a ScheduleModel,
    pub params: &'a ParamStore,
}

impl Schedule for LearnedSchedule<'_> {
    fn lambda<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let map = self.model.lambda_net.forward(g, self.params, x)?;
        match self.model.mode {
            ScheduleMode::Pixelwise => Ok(map),
            ScheduleMode::Global => {
                let s = map.shape();
                let hw = (s[2] * s[3]) as f64;
                map.reduce_to(&[s[0], s[1], 1, 1])?
                    .scale(1.0 / hw)?
                    .broadcast_to(&s)
            }
        }
    }

    /// `ρ(t) = t·softplus(m(t)) + ε·t`.
    fn rho<'g>(&self, g: &'g Graph, t: Jet<'g>) -> Result<Jet<'g>> {
        let m = self.model.rho_net.forward(g, self.params, t)?.softplus()?;
        t.mul(m)?.add(t.scale(EPS_MONO)?)
    }

    /// `τ(t) = t·softplus(m(t))`.
    fn tau<'g>(&self, g: &'g Graph, t: Var<'g>) -> Result<Var<'g>> {
        let m = self
            .model
            .tau_net
            .forward(g, self.params, Jet::constant(t))?
            .v
            .softplus()?;
        t.mul(m)
    }
}

/// Which discretisation of `β` to expose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaDefinition {
    /// `β̂_i = 1 − γ(t_i)/γ(t_{i−1})`, exact telescoping.
    Ratio,
    /// `β̂_i = β(t_i)/T`, the continuum approximation.
    OverT,
}

/// Per-step tables of a discretised schedule on `t_i = i/T`.
#[derive(Debug, Clone)]
pub struct DiscreteSchedule {
    pub steps: usize,
    /// `β̂_i` for `i = 1..=T` (index 0 holds step 1), clamped into `[0, 1 − ε_clip]`.
    pub beta_hat: Vec<Tensor>,
    /// Running product `∏_{j≤i}(1 − β̂_j)` for `i = 0..=T`.
    pub gamma_hat: Vec<Tensor>,
    /// Schedule `γ(t_i)` for `i = 0..=T`.
    pub gamma: Vec<Tensor>,
}

/// Inference helpers on plain tensors, available for every [`Schedule`].
pub trait ScheduleExt: Schedule {
    fn lambda_map(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok(self.lambda(&g, g.constant(x.clone()))?.value())
    }

    /// `(ρ, ρ', ρ'')` at each time.
    fn rho_at(&self, ts: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
        for &t in ts {
            check_time(t)?;
        }
        let g = Graph::no_grad();
        let jet = self.rho(&g, Jet::variable(time_column(&g, ts)))?;
        let (v, d1, d2) = (jet.v.value(), jet.d1.value(), jet.d2.value());
        Ok((0..ts.len())
            .map(|i| (v.data()[i], d1.data()[i], d2.data()[i]))
            .collect())
    }

    fn tau_at(&self, ts: &[f64]) -> Result<Vec<f64>> {
        for &t in ts {
            check_time(t)?;
        }
        let g = Graph::no_grad();
        Ok(self.tau(&g, time_column(&g, ts))?.value().into_data())
    }

    /// `γ(t, x) = exp(−λ(x)ρ(t))`.
    fn gamma(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let rho = self.rho_at(&[t])?[0].0;
        Ok(self.lambda_map(x)?.map(|l| (-l * rho).exp()))
    }

    /// `β(t, x) = τ(t)λ(x)`.
    fn beta(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let tau = self.tau_at(&[t])?[0];
        Ok(self.lambda_map(x)?.map(|l| tau * l))
    }

    /// `σ = 1 − γ`, computed without cancellation.
    fn sigma(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let rho = self.rho_at(&[t])?[0].0;
        Ok(self.lambda_map(x)?.map(|l| -(-l * rho).exp_m1()))
    }

    /// `SNR = γ/σ`; fails where `σ` drops below [`EPS_SIGMA`].
    fn snr(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let gamma = self.gamma(t, x)?;
        let sigma = self.sigma(t, x)?;
        if sigma.data().iter().any(|&s| s < EPS_SIGMA) {
            return Err(CvdmError::Singularity(format!(
                "σ({t}, x) below {EPS_SIGMA}: SNR unbounded"
            )));
        }
        gamma.zip_map(&sigma, |g, s| g / s)
    }

    fn discretize(&self, steps: usize, x: &Tensor, definition: BetaDefinition) -> Result<DiscreteSchedule> {
        if steps == 0 {
            return Err(CvdmError::Config("discretisation needs T >= 1".into()));
        }
        let lambda = self.lambda_map(x)?;
        let ts: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        let rho = self.rho_at(&ts)?;
        let tau = self.tau_at(&ts)?;
        let gamma: Vec<Tensor> = rho
            .iter()
            .map(|&(r, _, _)| lambda.map(|l| (-l * r).exp()))
            .collect();
        let mut beta_hat = Vec::with_capacity(steps);
        let mut gamma_hat = vec![Tensor::ones(lambda.shape())];
        for i in 1..=steps {
            let b = match definition {
                // 1 − exp(−λ(ρ_i − ρ_{i−1})) without cancellation
                BetaDefinition::Ratio => {
                    let dr = rho[i].0 - rho[i - 1].0;
                    lambda.map(|l| -(-l * dr).exp_m1())
                }
                BetaDefinition::OverT => lambda.map(|l| tau[i] * l / steps as f64),
            }
            .map(|v| v.clamp(0.0, 1.0 - EPS_CLIP));
            let next = gamma_hat[i - 1].zip_map(&b, |g, bb| g * (1.0 - bb))?;
            gamma_hat.push(next);
            beta_hat.push(b);
        }
        Ok(DiscreteSchedule {
            steps,
            beta_hat,
            gamma_hat,
            gamma,
        })
    }

    /// Pixelwise `∫₀¹ β(s, x) ds = λ(x)∫₀¹τ`, by composite Simpson on `nodes` intervals.
    fn integrated_beta(&self, x: &Tensor, nodes: usize) -> Result<Tensor> {
        let n = nodes.max(2) + nodes % 2;
        let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let tau = self.tau_at(&ts)?;
        let h = 1.0 / n as f64;
        let integral = tau
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * v
            })
            .sum::<f64>()
            * h
            / 3.0;
        Ok(self.lambda_map(x)?.map(|l| l * integral))
    }
}

impl<S: Schedule + ?Sized> ScheduleExt for S {}

/// One row of a schedule report: spatial means of `γ` and `β` at time `t`,
/// overall and inside / outside an optional region mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleReportRow {
    pub t: f64,
    pub mean_gamma: f64,
    pub mean_beta: f64,
    pub region_gamma: Option<f64>,
    pub region_beta: Option<f64>,
    pub background_gamma: Option<f64>,
    pub background_beta: Option<f64>,
}

/// Schedule statistics on `points` evenly spaced times covering `[0, 1]`.
/// `x` is a single condition `[1, C, H, W]`; `mask` is nonzero inside the region.
pub fn schedule_report(
    schedule: &dyn Schedule,
    x: &Tensor,
    mask: Option<&Tensor>,
    points: usize,
) -> Result<Vec<ScheduleReportRow>> {
    if points < 2 {
        return Err(CvdmError::Config("schedule report needs >= 2 points".into()));
    }
    let lambda = schedule.lambda_map(x)?;
    if let Some(m) = mask {
        if m.numel() != lambda.numel() {
            return Err(CvdmError::Shape(format!(
                "mask {:?} vs schedule map {:?}",
                m.shape(),
                lambda.shape()
            )));
        }
    }
    let ts: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let rho = schedule.rho_at(&ts)?;
    let tau = schedule.tau_at(&ts)?;
    let masked_mean = |vals: &[f64], inside: bool| -> Option<f64> {
        let m = mask?;
        let (s, n) = vals
            .iter()
            .zip(m.data())
            .filter(|(_, &mv)| (mv != 0.0) == inside)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let gamma: Vec<f64> = lambda.data().iter().map(|l| (-l * rho[i].0).exp()).collect();
            let beta: Vec<f64> = lambda.data().iter().map(|l| l * tau[i]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            ScheduleReportRow {
                t,
                mean_gamma: mean(&gamma),
                mean_beta: mean(&beta),
                region_gamma: masked_mean(&gamma, true),
                region_beta: masked_mean(&beta, true),
                background_gamma: masked_mean(&gamma, false),
                background_beta: masked_mean(&beta, false),
            }
        })
        .collect())
}

pub fn write_schedule_report(path: &Path, rows: &[ScheduleReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> CvdmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CvdmError::Io(io),
        other => CvdmError::Config(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x1() -> Tensor {
        Tensor::zeros(&[1, 1, 1, 1])
    }

    #[test]
    fn gamma_fixture_values() {
        let s = AnalyticSchedule::linear(10.0);
        assert_eq!(s.gamma(0.0, &x1()).unwrap().item(), 1.0);
        let g = s.gamma(0.5, &x1()).unwrap().item();
        // e^{-5}
        assert!((g - 6.737_946_999_085_467e-3).abs() < 1e-15);
        let two = s.with_lambda(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let g = two.gamma(1.0, &Tensor::zeros(&[1, 1, 1, 2])).unwrap();
        assert!((g.data()[0] - 4.539_992_976_248_485e-5).abs() < 1e-17);
        assert!((g.data()[1] - 2.061_153_622_438_558e-9).abs() < 1e-20);
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        let s = AnalyticSchedule::linear(10.0);
        assert!(matches!(s.gamma(1.5, &x1()), Err(CvdmError::Domain(_))));
        assert!(matches!(s.beta(-0.1, &x1()), Err(CvdmError::Domain(_))));
    }

    #[test]
    fn beta_and_log_derivative() {
        let s = AnalyticSchedule::linear(10.0);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(s.beta(t, &x1()).unwrap().item(), 10.0);
        }
        let h = 1e-5;
        let gp = s.gamma(0.3 + h, &x1()).unwrap().item();
        let gm = s.gamma(0.3 - h, &x1()).unwrap().item();
        let g0 = s.gamma(0.3, &x1()).unwrap().item();
        let rate = -(gp - gm) / (2.0 * h) / g0;
        assert!((rate - 10.0).abs() < 1e-6);
    }

    #[test]
    fn sigma_and_snr() {
        let s = AnalyticSchedule::linear(10.0);
        assert_eq!(s.sigma(0.0, &x1()).unwrap().item(), 0.0);
        let snr = s.snr(0.5, &x1()).unwrap().item();
        let e5 = (-5f64).exp();
        assert!((snr - e5 / (1.0 - e5)).abs() < 1e-15);
        assert!((snr - 6.7836e-3).abs() < 1e-7);
        assert!(matches!(s.snr(0.0, &x1()), Err(CvdmError::Singularity(_))));
        // γ = 1/2 at ρ = ln 2
        let half = AnalyticSchedule::linear(2f64.ln());
        assert!((half.snr(1.0, &x1()).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discretize_both_definitions() {
        let s = AnalyticSchedule::linear(10.0);
        let ratio = s.discretize(10, &x1(), BetaDefinition::Ratio).unwrap();
        let over = s.discretize(10, &x1(), BetaDefinition::OverT).unwrap();
        let e1 = 1.0 - (-1f64).exp();
        assert!((ratio.beta_hat[4].item() - e1).abs() < 1e-14);
        assert!((ratio.beta_hat[4].item() - 0.6321).abs() < 1e-4);
        assert_eq!(over.beta_hat[4].item(), 1.0 - EPS_CLIP);

        let fine_r = s.discretize(1000, &x1(), BetaDefinition::Ratio).unwrap();
        let fine_o = s.discretize(1000, &x1(), BetaDefinition::OverT).unwrap();
        for (r, o) in fine_r.beta_hat.iter().zip(&fine_o.beta_hat) {
            assert!((r.item() - o.item()).abs() <= 5e-5);
        }
        for (gh, g) in fine_r.gamma_hat.iter().zip(&fine_r.gamma) {
            assert!((gh.item() - g.item()).abs() <= 1e-10 * g.item());
        }
    }

    #[test]
    fn ode_residual_vanishes_for_matched_fixture() {
        for s in [AnalyticSchedule::linear(10.0), AnalyticSchedule::quadratic(1.0, 3.0)] {
            let h = 1e-5;
            for i in 1..20 {
                let t = i as f64 / 20.0;
                let dg = (s.gamma(t + h, &x1()).unwrap().item() - s.gamma(t - h, &x1()).unwrap().item())
                    / (2.0 * h);
                let r = dg + s.beta(t, &x1()).unwrap().item() * s.gamma(t, &x1()).unwrap().item();
                assert!(r.abs() < 1e-6, "t={t} residual {r}");
            }
        }
    }

    #[test]
    fn gamma_equals_exp_of_integrated_beta() {
        let s = AnalyticSchedule::quadratic(2.0, 1.5);
        // composite Simpson on [0, t]
        for t in [0.2, 0.55, 1.0] {
            let n = 200;
            let h = t / n as f64;
            let ts: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
            let beta: Vec<f64> = ts.iter().map(|&u| s.beta(u, &x1()).unwrap().item()).collect();
            let integral = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * beta[i]
                })
                .sum::<f64>()
                * h
                / 3.0;
            let g = s.gamma(t, &x1()).unwrap().item();
            assert!((g - (-integral).exp()).abs() < 1e-6);
        }
    }

    fn learned(mode: ScheduleMode) -> (ParamStore, ScheduleModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::default();
        let cfg = ScheduleConfig {
            mode,
            hidden: 32,
            ..ScheduleConfig::default()
        };
        let model = ScheduleModel::new(&mut store, &cfg, 2, 1, &mut rng).unwrap();
        // perturb the λ head so λ varies across pixels
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("schedule.lambda.head.weight") {
                let t = store.get_mut(id);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.3 * ((i as f64) * 1.3).sin();
                }
            }
        }
        (store, model)
    }

    #[test]
    fn learned_schedule_boundary_and_monotonicity() {
        let (store, model) = learned(ScheduleMode::Pixelwise);
        let s = model.bind(&store);
        let x = Tensor::from_fn(&[1, 2, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0);
        assert!(s.gamma(0.0, &x).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(s.tau_at(&[0.0]).unwrap()[0], 0.0);
        assert!(s.lambda_map(&x).unwrap().data().iter().all(|&l| l > 0.0));
        let mut prev = s.gamma(0.0, &x).unwrap();
        for i in 1..=50 {
            let cur = s.gamma(i as f64 / 50.0, &x).unwrap();
            assert!(cur.data().iter().zip(prev.data()).all(|(c, p)| c <= p));
            prev = cur;
        }
    }

    #[test]
    fn global_mode_is_spatially_constant() {
        let (store, model) = learned(ScheduleMode::Global);
        let s = model.bind(&store);
        let x = Tensor::from_fn(&[1, 2, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0);
        let g = s.gamma(0.4, &x).unwrap();
        let first = g.data()[0];
        assert!(g.data().iter().all(|&v| (v - first).abs() < 1e-14));
        let (store_p, model_p) = learned(ScheduleMode::Pixelwise);
        let gp = model_p.bind(&store_p).gamma(0.4, &x).unwrap();
        assert!(gp.data().iter().any(|&v| (v - gp.data()[0]).abs() > 1e-6));
    }

    #[test]
    fn report_has_requested_rows() {
        let s = AnalyticSchedule::linear(3.0);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| (i < 8) as u8 as f64);
        let rows = schedule_report(&s, &x, Some(&mask), 101).unwrap();
        assert_eq!(rows.len(), 101);
        assert_eq!(rows[0].mean_gamma, 1.0);
        assert!((rows[100].t - 1.0).abs() < 1e-15);
        assert_eq!(rows[50].region_beta, Some(3.0));
    }
}
