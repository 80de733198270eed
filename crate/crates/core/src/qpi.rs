//! Synthetic phase-imaging pairs by Fresnel propagation, and a blur toy task.
//!
//! Fields live on a periodic grid; propagation multiplies the spectrum by the
//! Fresnel transfer function `exp(ikz)·exp(−iπλz(fx² + fy²))`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{PairedSample, SampleMeta};
use crate::error::{CvdmError, Result};
use crate::io::{config_digest, read_npy, write_npy};
use crate::parallel::map_indices;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const DERIVATIVE_FORMULA: &str = "(I_minus_d - I_d) / (2 d)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalConfig {
    /// Meters.
    pub wavelength: f64,
    /// Meters.
    pub defocus: f64,
    /// Meters.
    pub pixel_pitch: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            wavelength: 0.5e-6,
            defocus: 2e-6,
            pixel_pitch: 0.3e-6,
            height: 32,
            width: 32,
        }
    }
}

impl OpticalConfig {
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Checks positivity and that propagating by `±defocus` is adequately sampled.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("defocus", self.defocus),
            ("pixel_pitch", self.pixel_pitch),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CvdmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.height == 0 || self.width == 0 {
            return Err(CvdmError::Config("grid must be non-empty".into()));
        }
        self.check_sampling(self.defocus)
    }

    /// Transfer-function sampling: `N·Δx² ≥ λ|z|` along both axes.
    pub fn check_sampling(&self, z: f64) -> Result<()> {
        let n = self.height.min(self.width) as f64;
        let capacity = n * self.pixel_pitch * self.pixel_pitch;
        let need = self.wavelength * z.abs();
        if capacity < need {
            return Err(CvdmError::Sampling(format!(
                "N·dx² = {capacity:.3e} m² is below λ|z| = {need:.3e} m² (N = {n}, z = {z:e})"
            )));
        }
        Ok(())
    }
}

/// Row-major complex field on an `h × w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Field {
    /// `√I₀·e^{iφ}` from `[H, W]` maps.
    pub fn from_amplitude_phase(amplitude: &Tensor, phase: &Tensor) -> Result<Self> {
        if amplitude.rank() != 2 || amplitude.shape() != phase.shape() {
            return Err(CvdmError::Shape(format!(
                "amplitude {:?} and phase {:?} must be equal [H, W]",
                amplitude.shape(),
                phase.shape()
            )));
        }
        let data = amplitude
            .data()
            .iter()
            .zip(phase.data())
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        Ok(Self {
            height: amplitude.shape()[0],
            width: amplitude.shape()[1],
            data,
        })
    }

    pub fn intensity(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|c| c.norm_sqr()).collect())
            .expect("field shape")
    }
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(data);
    let mut column = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        col.process(&mut column);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed FFT frequency of bin `i` out of `n`, in cycles per sample.
fn frequency(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    k / n as f64
}

pub fn propagate_field(field: &Field, z: f64, optics: &OpticalConfig) -> Result<Field> {
    if z == 0.0 || !z.is_finite() {
        return Err(CvdmError::Domain(format!(
            "propagation distance must be finite and nonzero, got {z}"
        )));
    }
    if field.height != optics.height || field.width != optics.width {
        return Err(CvdmError::Shape(format!(
            "field {}x{} does not match optics grid {}x{}",
            field.height, field.width, optics.height, optics.width
        )));
    }
    optics.check_sampling(z)?;
    let (h, w) = (field.height, field.width);
    let mut data = field.data.clone();
    fft2(&mut data, h, w, false);
    let carrier = Complex64::from_polar(1.0, optics.wavenumber() * z);
    let dx = optics.pixel_pitch;
    for r in 0..h {
        let fy = frequency(r, h) / dx;
        for c in 0..w {
            let fx = frequency(c, w) / dx;
            let phase = -PI * optics.wavelength * z * (fx * fx + fy * fy);
            data[r * w + c] *= carrier * Complex64::from_polar(1.0, phase);
        }
    }
    fft2(&mut data, h, w, true);
    Ok(Field {
        height: h,
        width: w,
        data,
    })
}

/// `|√I₀e^{iφ} ∗ Fresnel kernel(z)|²` on the periodic grid.
pub fn fresnel_propagate(amplitude: &Tensor, phase: &Tensor, z: f64, optics: &OpticalConfig) -> Result<Tensor> {
    let field = Field::from_amplitude_phase(amplitude, phase)?;
    Ok(propagate_field(&field, z, optics)?.intensity())
}

/// `(I_{−d} − I_d)/(2d)` element-wise.
pub fn intensity_derivative(i_minus_d: &Tensor, i_d: &Tensor, d: f64) -> Result<Tensor> {
    if !(d > 0.0) {
        return Err(CvdmError::Domain(format!("defocus must be positive, got {d}")));
    }
    i_minus_d.zip_map(i_d, |m, p| (m - p) / (2.0 * d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLayout {
    /// Two channels `(I_d, I_{−d})`.
    #[default]
    Stacked,
    /// One channel, the finite-difference derivative map.
    Derivative,
}

impl ConditionLayout {
    pub fn channels(self) -> usize {
        match self {
            ConditionLayout::Stacked => 2,
            ConditionLayout::Derivative => 1,
        }
    }
}

pub const DEFAULT_XI_MAX: f64 = 0.2;

fn add_measurement_noise(i: &Tensor, xi: f64, rng: &mut impl Rng) -> Tensor {
    if xi == 0.0 {
        return i.clone();
    }
    let noise = Normal::new(xi, xi.sqrt()).expect("finite noise level");
    let data = i.data().iter().map(|v| v + noise.sample(rng)).collect();
    Tensor::new(i.shape(), data).expect("same shape")
}

/// One pair from a `[H, W]` source in `[0, 1]`: `φ = π·source`, `I₀ ≡ 1`.
///
/// `xi` forces the noise level; otherwise `ξ ∼ U[0, xi_max]` is drawn from `rng`.
pub fn make_pair(
    source: &Tensor,
    optics: &OpticalConfig,
    layout: ConditionLayout,
    xi: Option<f64>,
    xi_max: f64,
    rng: &mut impl Rng,
    source_id: &str,
) -> Result<PairedSample> {
    optics.validate()?;
    if source.shape() != [optics.height, optics.width] {
        return Err(CvdmError::Shape(format!(
            "source {:?} does not match optics grid {}x{}",
            source.shape(),
            optics.height,
            optics.width
        )));
    }
    if source.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CvdmError::Domain("source image must lie in [0, 1]".into()));
    }
    let xi = match xi {
        Some(v) if v >= 0.0 && v.is_finite() => v,
        Some(v) => return Err(CvdmError::Domain(format!("noise level must be nonnegative, got {v}"))),
        None => rng.random_range(0.0..=xi_max),
    };
    let phase = source.map(|v| PI * v);
    let amplitude = Tensor::ones(source.shape());
    let field = Field::from_amplitude_phase(&amplitude, &phase)?;
    let i_d = propagate_field(&field, optics.defocus, optics)?.intensity();
    let i_md = propagate_field(&field, -optics.defocus, optics)?.intensity();
    let i_d = add_measurement_noise(&i_d, xi, rng);
    let i_md = add_measurement_noise(&i_md, xi, rng);
    let (h, w) = (optics.height, optics.width);
    let x = match layout {
        ConditionLayout::Stacked => Tensor::stack(&[i_d, i_md])?,
        ConditionLayout::Derivative => intensity_derivative(&i_md, &i_d, optics.defocus)?.reshape(&[1, h, w])?,
    };
    PairedSample::new(
        x,
        source.reshape(&[1, h, w])?,
        SampleMeta {
            xi: Some(xi),
            source_id: source_id.to_string(),
        },
    )
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

/// Separable normalized Gaussian blur of a `[H, W]` map with periodic boundary.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(CvdmError::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    if image.rank() != 2 {
        return Err(CvdmError::Shape(format!("expected [H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let src = image.data();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[y * w + (x as isize + k as isize - r).rem_euclid(w as isize) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y as isize + k as isize - r).rem_euclid(h as isize) as usize * w + x])
                .sum();
        }
    }
    Tensor::new(&[h, w], out)
}

/// `x = blur(y) + N(0, noise_sigma²)` with `y` the source itself.
pub fn make_toy_blur_pair(
    source: &Tensor,
    kernel_sigma: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
    source_id: &str,
) -> Result<PairedSample> {
    let blurred = gaussian_blur(source, kernel_sigma)?;
    let x = if noise_sigma > 0.0 {
        let data = blurred
            .data()
            .iter()
            .map(|v| v + noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(blurred.shape(), data)?
    } else {
        blurred
    };
    let (h, w) = (source.shape()[0], source.shape()[1]);
    PairedSample::new(
        x.reshape(&[1, h, w])?,
        source.reshape(&[1, h, w])?,
        SampleMeta {
            xi: None,
            source_id: source_id.to_string(),
        },
    )
}

/// Sum of a few periodic Gaussian blobs, rescaled to `[0, 1]`.
pub fn procedural_source(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let blobs = rng.random_range(2..=6);
    let scale = h.min(w) as f64;
    let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(scale / 16.0..scale / 6.0),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let wrap = |d: f64, n: f64| {
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    let img = Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        params
            .iter()
            .map(|&(cy, cx, s, a)| {
                let (dy, dx) = (wrap(y - cy, h as f64), wrap(x - cx, w as f64));
                a * (-(dy * dy + dx * dx) / (2.0 * s * s)).exp()
            })
            .sum()
    });
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    img.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Every PNG or JPEG in `dir` (sorted by name) as a `[h, w]` grayscale map in `[0, 1]`.
pub fn load_grayscale_dir(dir: &Path, h: usize, w: usize) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CvdmError::Config(format!("no images found in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| CvdmError::Config(format!("{}: {e}", p.display())))?
                .to_luma32f();
            let img = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
            let data = img.pixels().map(|px| (px.0[0] as f64).clamp(0.0, 1.0)).collect();
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok((id, Tensor::new(&[h, w], data)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Qpi {
        #[serde(default)]
        layout: ConditionLayout,
        #[serde(default = "default_xi_max")]
        xi_max: f64,
    },
    ToyBlur {
        kernel_sigma: f64,
        noise_sigma: f64,
    },
}

fn default_xi_max() -> f64 {
    DEFAULT_XI_MAX
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Qpi {
            layout: ConditionLayout::Stacked,
            xi_max: DEFAULT_XI_MAX,
        }
    }
}

impl TaskConfig {
    pub fn condition_channels(&self) -> usize {
        match self {
            TaskConfig::Qpi { layout, .. } => layout.channels(),
            TaskConfig::ToyBlur { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Procedural { count: usize },
    Directory { path: PathBuf },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Procedural { count: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// Sample counts per split; rounding remainders go to the last nonzero split.
    pub fn counts(&self, n: usize) -> Result<Vec<(&'static str, usize)>> {
        let parts = [("train", self.train), ("val", self.val), ("test", self.test)];
        if parts.iter().any(|(_, f)| !(f.is_finite() && *f >= 0.0)) {
            return Err(CvdmError::Config("split fractions must be nonnegative".into()));
        }
        let total: f64 = parts.iter().map(|(_, f)| f).sum();
        if total <= 0.0 {
            return Err(CvdmError::Config("split fractions sum to zero".into()));
        }
        let mut counts: Vec<(&'static str, usize)> = parts
            .iter()
            .map(|&(name, f)| (name, (n as f64 * f / total).round() as usize))
            .collect();
        let last = parts.iter().rposition(|(_, f)| *f > 0.0).expect("some positive split");
        let others: usize = counts.iter().enumerate().filter(|(i, _)| *i != last).map(|(_, c)| c.1).sum();
        if others > n {
            return Err(CvdmError::Config(format!("cannot split {n} samples as requested")));
        }
        counts[last].1 = n - others;
        Ok(counts.into_iter().filter(|(_, c)| *c > 0).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub optics: OpticalConfig,
    pub task: TaskConfig,
    pub source: SourceConfig,
    pub splits: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub x_file: String,
    pub y_file: String,
    pub source_id: String,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub config: DatasetConfig,
    pub condition_channels: usize,
    pub target_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Phase interval that the target range `[0, 1]` maps onto.
    pub phase_range: [f64; 2],
    pub xi_distribution: Option<String>,
    /// Sign convention of the derivative map, which is the reverse of a forward difference.
    pub derivative_formula: Option<String>,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn build_sample(config: &DatasetConfig, seed: u64, index: usize, source: &Tensor, source_id: &str) -> Result<PairedSample> {
    let mut rng = stream(seed, "pair", index as u64);
    match &config.task {
        TaskConfig::Qpi { layout, xi_max } => {
            make_pair(source, &config.optics, *layout, None, *xi_max, &mut rng, source_id)
        }
        TaskConfig::ToyBlur {
            kernel_sigma,
            noise_sigma,
        } => make_toy_blur_pair(source, *kernel_sigma, *noise_sigma, &mut rng, source_id),
    }
}

/// Writes `<out>/<split>/<id>_{x,y}.npy` and `<out>/manifest.json`.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<Manifest> {
    let (h, w) = (config.optics.height, config.optics.width);
    match &config.task {
        TaskConfig::Qpi { xi_max, .. } => {
            config.optics.validate()?;
            if !(xi_max.is_finite() && *xi_max >= 0.0) {
                return Err(CvdmError::Config(format!("xi_max must be nonnegative, got {xi_max}")));
            }
        }
        TaskConfig::ToyBlur { kernel_sigma, noise_sigma } => {
            if h == 0 || w == 0 || !(*kernel_sigma > 0.0) || !(*noise_sigma >= 0.0) {
                return Err(CvdmError::Config("toy blur needs a non-empty grid, kernel_sigma > 0, noise_sigma ≥ 0".into()));
            }
        }
    }
    let sources: Vec<(String, Tensor)> = match &config.source {
        SourceConfig::Procedural { count } => map_indices(*count, |i| {
            (format!("blob{i:05}"), procedural_source(h, w, &mut stream(seed, "source", i as u64)))
        }),
        SourceConfig::Directory { path } => load_grayscale_dir(path, h, w)?,
    };
    if sources.is_empty() {
        return Err(CvdmError::Config("dataset has no sources".into()));
    }
    let samples: Vec<Result<PairedSample>> =
        map_indices(sources.len(), |i| build_sample(config, seed, i, &sources[i].1, &sources[i].0));
    let samples: Vec<PairedSample> = samples.into_iter().collect::<Result<_>>()?;

    std::fs::create_dir_all(out)?;
    let mut splits = BTreeMap::new();
    let mut next = 0;
    for (name, count) in config.splits.counts(samples.len())? {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        let mut entries = Vec::with_capacity(count);
        for (i, s) in samples[next..next + count].iter().enumerate() {
            let id = format!("{:05}", next + i);
            let (xf, yf) = (format!("{name}/{id}_x.npy"), format!("{name}/{id}_y.npy"));
            write_npy(&out.join(&xf), &s.x)?;
            write_npy(&out.join(&yf), &s.y)?;
            entries.push(ManifestEntry {
                id,
                x_file: xf,
                y_file: yf,
                source_id: s.meta.source_id.clone(),
                xi: s.meta.xi,
            });
        }
        next += count;
        splits.insert(name.to_string(), entries);
    }
    let qpi = matches!(config.task, TaskConfig::Qpi { .. });
    let derivative = matches!(
        config.task,
        TaskConfig::Qpi {
            layout: ConditionLayout::Derivative,
            ..
        }
    );
    let manifest = Manifest {
        format_version: 1,
        seed,
        config_digest: config_digest(config)?,
        config: config.clone(),
        condition_channels: config.task.condition_channels(),
        target_channels: 1,
        height: h,
        width: w,
        phase_range: [0.0, if qpi { PI } else { 1.0 }],
        xi_distribution: match &config.task {
            TaskConfig::Qpi { xi_max, .. } => Some(format!("xi ~ U[0, {xi_max}], noise ~ N(xi, xi)")),
            TaskConfig::ToyBlur { .. } => None,
        },
        derivative_formula: derivative.then(|| DERIVATIVE_FORMULA.to_string()),
        splits,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one split of a dataset written by [`generate_dataset`].
pub fn load_split(dir: &Path, split: &str) -> Result<(Manifest, Vec<PairedSample>)> {
    let manifest = read_manifest(dir)?;
    let entries = manifest
        .splits
        .get(split)
        .ok_or_else(|| CvdmError::Config(format!("dataset has no split {split:?}")))?;
    let samples = entries
        .iter()
        .map(|e| {
            let s = PairedSample::new(
                read_npy(&dir.join(&e.x_file))?,
                read_npy(&dir.join(&e.y_file))?,
                SampleMeta {
                    xi: e.xi,
                    source_id: e.source_id.clone(),
                },
            )?;
            if s.x.shape() != [manifest.condition_channels, manifest.height, manifest.width]
                || s.y.shape() != [manifest.target_channels, manifest.height, manifest.width]
            {
                return Err(CvdmError::Shape(format!("sample {} disagrees with the manifest", e.id)));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
