//! Discrete-time versus continuous-time diffusion loss for analytic schedules.
//!
//! `L_T = ½ Σ_{i=2..T} (SNR(t_{i−1}) − SNR(t_i))·‖y − ŷ(z_{t_i}, t_i)‖²` on a
//! uniform grid over `[t_start, 1]` and `L_∞ = −½ ∫ SNR′(t)·‖y − ŷ‖² dt` over the
//! same interval, both averaged over shared noise draws.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CvdmError, Result};
use crate::parallel::map_indices;
use crate::rng::stream;

/// Value with first and second derivative in one scalar variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Dual2 {
    pub fn variable(v: f64) -> Self {
        Self { v, d1: 1.0, d2: 0.0 }
    }

    pub fn constant(v: f64) -> Self {
        Self { v, d1: 0.0, d2: 0.0 }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.scale(-1.0))
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            v: c * self.v,
            d1: c * self.d1,
            d2: c * self.d2,
        }
    }

    pub fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        Self {
            v: r,
            d1: -self.d1 * r * r,
            d2: (2.0 * self.d1 * self.d1 * r - self.d2) * r * r,
        }
    }

    pub fn div(self, o: Self) -> Self {
        self.mul(o.recip())
    }

    /// Applies `f` given `f(v), f′(v), f″(v)`.
    pub fn chain(self, f: f64, f1: f64, f2: f64) -> Self {
        Self {
            v: f,
            d1: f1 * self.d1,
            d2: f2 * self.d1 * self.d1 + f1 * self.d2,
        }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.v).exp());
        let s1 = s * (1.0 - s);
        self.chain(s, s1, s1 * (1.0 - 2.0 * s))
    }
}

/// Scalar schedules given through their log-SNR; `γ = sigmoid(log SNR)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SnrFixture {
    /// `SNR(t) = exp(a − b·t)`.
    LogLinear { a: f64, b: f64 },
    /// `SNR(t) = exp(s·(0.5 − t))`, i.e. `γ` a sigmoid of slope `s` centred at 0.5.
    Sigmoid { s: f64 },
}

impl SnrFixture {
    pub fn smooth() -> Self {
        SnrFixture::LogLinear { a: 3.0, b: 6.0 }
    }

    pub fn steep() -> Self {
        SnrFixture::Sigmoid { s: 20.0 }
    }

    pub fn name(&self) -> String {
        match self {
            SnrFixture::LogLinear { a, b } => format!("loglinear(a={a},b={b})"),
            SnrFixture::Sigmoid { s } => format!("sigmoid(s={s})"),
        }
    }

    fn log_snr(&self, t: Dual2) -> Dual2 {
        match *self {
            SnrFixture::LogLinear { a, b } => Dual2::constant(a).sub(t.scale(b)),
            SnrFixture::Sigmoid { s } => Dual2::constant(0.5 * s).sub(t.scale(s)),
        }
    }

    pub fn gamma(&self, t: f64) -> Dual2 {
        self.log_snr(Dual2::variable(t)).sigmoid()
    }

    /// `γ/(1 − γ)` with its first two time derivatives.
    pub fn snr(&self, t: f64) -> Dual2 {
        let g = self.gamma(t);
        g.div(Dual2::constant(1.0).sub(g))
    }
}

/// How the surrogate's error evolves in time; every profile vanishes at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorProfile {
    Constant,
    Linear,
    Sine,
}

impl ErrorProfile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            ErrorProfile::Constant => 1.0,
            ErrorProfile::Linear => t,
            ErrorProfile::Sine => (0.5 * std::f64::consts::PI * t).sin(),
        }
    }
}

/// `ŷ(z_t, t) = y + δ·g(t)·ε̃`, with `ε̃` the noise carried by `z_t`.
///
/// The constant profile is the one exception to `g(0) = 0`; it exists for the
/// telescoping identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogatePredictor {
    pub delta: f64,
    pub profile: ErrorProfile,
}

impl SurrogatePredictor {
    pub fn predict(&self, z: &[f64], y: &[f64], gamma: f64, t: f64) -> Vec<f64> {
        let (a, s) = (gamma.sqrt(), (1.0 - gamma).sqrt());
        let k = self.delta * self.profile.at(t);
        z.iter().zip(y).map(|(zi, yi)| yi + k * (zi - a * yi) / s).collect()
    }
}

/// Shared noise draws and target for one study.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub y: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
}

impl StudySetup {
    pub fn new(dim: usize, draws: usize, seed: u64) -> Self {
        let y = (0..dim).map(|i| ((i as f64) * 0.7).sin()).collect();
        let eps = (0..draws)
            .map(|k| {
                let mut rng = stream(seed, "convergence", k as u64);
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect();
        Self { y, eps }
    }

    /// Draw-averaged `‖y − ŷ(z_t, t)‖²`.
    pub fn squared_error(&self, fixture: &SnrFixture, surrogate: &SurrogatePredictor, t: f64) -> f64 {
        let g = fixture.gamma(t).v;
        let total: f64 = self
            .eps
            .iter()
            .map(|e| {
                let z: Vec<f64> = self.y.iter().zip(e).map(|(y, e)| g.sqrt() * y + (1.0 - g).sqrt() * e).collect();
                let y_hat = surrogate.predict(&z, &self.y, g, t);
                self.y.iter().zip(&y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        total / self.eps.len() as f64
    }
}

/// `t_i = t_start + (i − 1)(1 − t_start)/(T − 1)`, `i = 1..T`.
pub fn time_grid(steps: usize, t_start: f64) -> Vec<f64> {
    (0..steps)
        .map(|i| t_start + i as f64 * (1.0 - t_start) / (steps - 1) as f64)
        .collect()
}

pub fn discrete_diffusion_loss(
    steps: usize,
    t_start: f64,
    fixture: &SnrFixture,
    surrogate: &SurrogatePredictor,
    setup: &StudySetup,
) -> Result<f64> {
    if steps < 2 {
        return Err(CvdmError::Domain(format!("need T ≥ 2, got {steps}")));
    }
    let grid = time_grid(steps, t_start);
    let snr: Vec<f64> = grid.iter().map(|&t| fixture.snr(t).v).collect();
    if snr.iter().any(|v| !v.is_finite()) {
        return Err(CvdmError::NonFinite(format!("SNR on the grid starting at {t_start}")));
    }
    Ok(0.5
        * (1..steps)
            .map(|i| (snr[i - 1] - snr[i]) * setup.squared_error(fixture, surrogate, grid[i]))
            .sum::<f64>())
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

const GL_ORDER: usize = 16;

/// Composite Gauss–Legendre over `[a, b]` with `nodes` points in total.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, nodes: usize) -> f64 {
    let (x, w) = gauss_legendre(GL_ORDER);
    let panels = nodes.div_ceil(GL_ORDER).max(1);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            let mid = a + (p as f64 + 0.5) * h;
            x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + 0.5 * h * xi)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

pub const MIN_QUADRATURE_NODES: usize = 1024;

/// Quadrature of `L_∞`; errors when doubling the node count moves the value by more than `tol`.
pub fn continuous_diffusion_loss(
    t_start: f64,
    fixture: &SnrFixture,
    surrogate: &SurrogatePredictor,
    setup: &StudySetup,
    nodes: usize,
    tol: f64,
) -> Result<f64> {
    let nodes = nodes.max(MIN_QUADRATURE_NODES);
    let f = |t: f64| -0.5 * fixture.snr(t).d1 * setup.squared_error(fixture, surrogate, t);
    let coarse = integrate(f, t_start, 1.0, nodes);
    let fine = integrate(f, t_start, 1.0, 2 * nodes);
    if !fine.is_finite() || (fine - coarse).abs() > tol {
        return Err(CvdmError::Numerical(format!(
            "quadrature did not converge: {coarse} with {nodes} nodes, {fine} with {}",
            2 * nodes
        )));
    }
    Ok(fine)
}

/// `‖SNR″‖_{L²([t_start, 1])}`.
pub fn snr_second_l2(fixture: &SnrFixture, t_start: f64) -> f64 {
    integrate(|t| fixture.snr(t).d2.powi(2), t_start, 1.0, 4096).sqrt()
}

/// Moves `t_start` up by doublings until SNR and its derivatives are finite there.
pub fn safe_start(fixture: &SnrFixture, t_start: f64) -> Result<f64> {
    let mut t = t_start;
    while t < 1.0 {
        let s = fixture.snr(t);
        if s.v.is_finite() && s.d1.is_finite() && s.d2.is_finite() && fixture.gamma(t).v < 1.0 {
            return Ok(t);
        }
        t *= 2.0;
    }
    Err(CvdmError::NonFinite(format!("SNR is not finite anywhere above {t_start}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub l_t: f64,
    pub gap: f64,
    /// Estimate of `|L_T − L_∞|` from the first-order error terms.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schedule: String,
    pub snr_second_l2: f64,
    pub t_start: f64,
    /// True when `t_start` had to be moved to keep SNR finite.
    pub shifted: bool,
    pub l_inf: f64,
    pub rows: Vec<ConvergenceRow>,
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares fit of `ln y = intercept + slope·ln x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(CvdmError::Domain("log-log fit needs ≥ 2 positive pairs".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// `½[h·|g(t_s)| + h·TV(g) + (h/2)·Σ_i max_{[t_{i−1}, t_i]}|SNR″|·e(t_i)·h]`
/// with `g = SNR′·e` and `e` the draw-averaged squared error.
fn error_bound(steps: usize, t_start: f64, fixture: &SnrFixture, surrogate: &SurrogatePredictor, setup: &StudySetup) -> f64 {
    const SUB: usize = 16;
    let grid = time_grid(steps, t_start);
    let h = (1.0 - t_start) / (steps - 1) as f64;
    let g = |t: f64| fixture.snr(t).d1 * setup.squared_error(fixture, surrogate, t);
    let mut variation = 0.0;
    let mut curvature = 0.0;
    let mut prev = g(t_start);
    for i in 1..steps {
        let mut peak: f64 = 0.0;
        for k in 1..=SUB {
            let t = grid[i - 1] + h * k as f64 / SUB as f64;
            let gt = g(t);
            variation += (gt - prev).abs();
            prev = gt;
            peak = peak.max(fixture.snr(t).d2.abs());
        }
        peak = peak.max(fixture.snr(grid[i - 1]).d2.abs());
        curvature += peak * setup.squared_error(fixture, surrogate, grid[i]) * h;
    }
    0.5 * (h * g(t_start).abs() + h * variation + 0.5 * h * curvature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    pub fixtures: Vec<SnrFixture>,
    pub surrogate: SurrogatePredictor,
    pub steps: Vec<usize>,
    pub dim: usize,
    pub draws: usize,
    pub quadrature_nodes: usize,
    pub quadrature_tol: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            fixtures: vec![SnrFixture::smooth(), SnrFixture::steep()],
            surrogate: SurrogatePredictor {
                delta: 0.1,
                profile: ErrorProfile::Linear,
            },
            steps: vec![16, 32, 64, 128, 256],
            dim: 16,
            draws: 64,
            quadrature_nodes: 4096,
            quadrature_tol: 1e-8,
        }
    }
}

/// One report per fixture; `t_start = 1/max(T)` unless SNR forces a later start.
pub fn convergence_report(config: &ConvergenceConfig, seed: u64) -> Result<Vec<ConvergenceReport>> {
    let mut steps = config.steps.clone();
    steps.sort_unstable();
    steps.dedup();
    if steps.len() < 2 || steps[0] < 2 {
        return Err(CvdmError::Config("need at least two step counts, each ≥ 2".into()));
    }
    if config.fixtures.is_empty() || config.dim == 0 || config.draws == 0 {
        return Err(CvdmError::Config("need fixtures, dim > 0 and draws > 0".into()));
    }
    let setup = StudySetup::new(config.dim, config.draws, seed);
    let nominal = 1.0 / *steps.last().expect("non-empty") as f64;
    let surrogate = &config.surrogate;
    config
        .fixtures
        .iter()
        .map(|fixture| {
            let t_start = safe_start(fixture, nominal)?;
            if t_start != nominal {
                log::warn!("{}: grid start moved from {nominal} to {t_start}", fixture.name());
            }
            let l_inf = continuous_diffusion_loss(
                t_start,
                fixture,
                surrogate,
                &setup,
                config.quadrature_nodes,
                config.quadrature_tol,
            )?;
            let rows = map_indices(steps.len(), |k| -> Result<ConvergenceRow> {
                let l_t = discrete_diffusion_loss(steps[k], t_start, fixture, surrogate, &setup)?;
                Ok(ConvergenceRow {
                    steps: steps[k],
                    l_t,
                    gap: (l_t - l_inf).abs(),
                    bound: error_bound(steps[k], t_start, fixture, surrogate, &setup),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let xs: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.gap).collect();
            let (slope, intercept) = loglog_fit(&xs, &ys).unwrap_or((f64::NAN, f64::NAN));
            Ok(ConvergenceReport {
                schedule: fixture.name(),
                snr_second_l2: snr_second_l2(fixture, t_start),
                t_start,
                shifted: t_start != nominal,
                l_inf,
                rows,
                slope,
                intercept,
            })
        })
        .collect()
}

/// Whether the report with the larger `‖SNR″‖` has the larger gap at every shared `T`.
pub fn rougher_dominates(a: &ConvergenceReport, b: &ConvergenceReport) -> bool {
    let (rough, smooth) = if a.snr_second_l2 >= b.snr_second_l2 { (a, b) } else { (b, a) };
    let mut shared = 0;
    for r in &rough.rows {
        if let Some(s) = smooth.rows.iter().find(|s| s.steps == r.steps) {
            shared += 1;
            if r.gap <= s.gap {
                return false;
            }
        }
    }
    shared > 0
}

pub fn write_convergence_csv(reports: &[ConvergenceReport], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::schedule::csv_err)?;
    w.write_record(["schedule", "snr_second_l2", "t_start", "T", "L_T", "L_inf", "gap", "bound", "slope"])
        .map_err(crate::schedule::csv_err)?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.schedule.clone(),
                r.snr_second_l2.to_string(),
                r.t_start.to_string(),
                row.steps.to_string(),
                row.l_t.to_string(),
                r.l_inf.to_string(),
                row.gap.to_string(),
                row.bound.to_string(),
                r.slope.to_string(),
            ])
            .map_err(crate::schedule::csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
