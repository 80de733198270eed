//! Image quality metrics and small statistics helpers.
//!
//! Images are tensors whose last two axes are `H, W`; leading axes are treated
//! as independent planes and plane scores are averaged.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CvdmError, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const MS_SSIM_SCALES: usize = 5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Dynamic range for the SSIM constants and the PSNR peak.
    pub data_range: f64,
    pub scales: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            scales: MS_SSIM_SCALES,
        }
    }
}

fn check_pair(y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.shape() != y_hat.shape() || y.rank() < 2 || y.numel() == 0 {
        return Err(CvdmError::Shape(format!(
            "metric inputs must share a non-empty [.., H, W] shape, got {:?} and {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    Ok(())
}

pub fn mae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.numel() as f64)
}

pub fn mse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.numel() as f64)
}

/// `10·log10(peak²/MSE)`; `+∞` for identical inputs.
pub fn psnr(y: &Tensor, y_hat: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(CvdmError::Domain(format!("peak must be positive, got {peak}")));
    }
    let m = mse(y, y_hat)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    /// Separable Gaussian filtering over the valid region.
    fn filter(&self, win: &[f64]) -> Plane {
        let n = win.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for r in 0..self.h {
            for c in 0..ow {
                rows[r * ow + c] = (0..n).map(|k| win[k] * self.data[r * self.w + c + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..n).map(|k| win[k] * rows[(r + k) * ow + c]).sum();
            }
        }
        Plane { h: oh, w: ow, data: out }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let at = |r: usize, c: usize| self.data[r * self.w + c];
        let data = (0..h * w)
            .map(|i| {
                let (r, c) = (2 * (i / w), 2 * (i % w));
                0.25 * (at(r, c) + at(r + 1, c) + at(r, c + 1) + at(r + 1, c + 1))
            })
            .collect();
        Plane { h, w, data }
    }
}

fn planes(t: &Tensor) -> Vec<Plane> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    t.data()
        .chunks(h * w)
        .map(|c| Plane { h, w, data: c.to_vec() })
        .collect()
}

/// Mean SSIM map and mean contrast-structure map of one plane pair.
fn ssim_parts(a: &Plane, b: &Plane, data_range: f64) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mu_a = a.filter(&win);
    let mu_b = b.filter(&win);
    let saa = a.zip(a, |x, y| x * y).filter(&win);
    let sbb = b.zip(b, |x, y| x * y).filter(&win);
    let sab = a.zip(b, |x, y| x * y).filter(&win);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = saa.data[i] - ma * ma;
        let vb = sbb.data[i] - mb * mb;
        let cov = sab.data[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let s = (2.0 * cov + c2) / (va + vb + c2);
        ssim += l * s;
        cs += s;
    }
    let n = mu_a.data.len() as f64;
    (ssim / n, cs / n)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5).
pub fn ssim(y: &Tensor, y_hat: &Tensor, data_range: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    let (pa, pb) = (planes(y), planes(y_hat));
    let (h, w) = (pa[0].h, pa[0].w);
    if h < WINDOW || w < WINDOW {
        return Err(CvdmError::Shape(format!("SSIM needs at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    Ok(pa.iter().zip(&pb).map(|(a, b)| ssim_parts(a, b, data_range).0).sum::<f64>() / pa.len() as f64)
}

/// Largest usable scale count not above `requested` for an `h × w` image.
pub fn usable_scales(h: usize, w: usize, requested: usize) -> usize {
    let mut m = 0;
    let (mut hh, mut ww) = (h, w);
    while m < requested && hh >= WINDOW && ww >= WINDOW {
        m += 1;
        hh /= 2;
        ww /= 2;
    }
    m
}

/// Multi-scale SSIM with equal weights `w_j = 1/M`.
///
/// Scale `j < M` contributes its mean contrast-structure term, the coarsest
/// scale its full SSIM mean; negative terms are clamped to zero. `M` shrinks
/// with a warning when the image is too small for the requested scale count.
pub fn ms_ssim(y: &Tensor, y_hat: &Tensor, config: &MetricConfig) -> Result<f64> {
    check_pair(y, y_hat)?;
    let (pa, pb) = (planes(y), planes(y_hat));
    let (h, w) = (pa[0].h, pa[0].w);
    let m = usable_scales(h, w, config.scales);
    if m == 0 {
        return Err(CvdmError::Shape(format!("MS-SSIM needs at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    if m < config.scales {
        log::warn!("image {h}x{w} supports {m} of {} MS-SSIM scales", config.scales);
    }
    let weight = 1.0 / m as f64;
    let mut total = 0.0;
    for (a, b) in pa.iter().zip(&pb) {
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut value = 1.0;
        for j in 0..m {
            let (full, cs) = ssim_parts(&a, &b, config.data_range);
            let term = if j + 1 == m { full } else { cs };
            value *= term.max(0.0).powf(weight);
            if j + 1 < m {
                a = a.downsample();
                b = b.downsample();
            }
        }
        total += value;
    }
    Ok(total / pa.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CvdmError::Shape(format!(
            "correlation needs two equal series of length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CvdmError::Numerical("correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return pearson(a, b);
    }
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean_difference: f64,
    pub sd_difference: f64,
    pub t_statistic: f64,
}

/// Paired t statistic of `a − b`.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedStats> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CvdmError::Shape("paired statistics need two equal series of length ≥ 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = if sd == 0.0 {
        if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY }
    } else {
        mean / (sd / n.sqrt())
    };
    Ok(PairedStats {
        n: d.len(),
        mean_difference: mean,
        sd_difference: sd,
        t_statistic: t,
    })
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    pub ms_ssim: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mae: f64,
    pub ms_ssim: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub config: MetricConfig,
    pub aggregate: AggregateMetrics,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn sample_metrics(id: &str, y: &Tensor, y_hat: &Tensor, config: &MetricConfig) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        mae: mae(y, y_hat)?,
        ms_ssim: ms_ssim(y, y_hat, config)?,
        ssim: ssim(y, y_hat, config.data_range)?,
        psnr: psnr(y, y_hat, config.data_range)?,
    })
}

impl MetricReport {
    /// Scores `(id, target, estimate)` triples; aggregates are plain means.
    pub fn evaluate(items: &[(String, Tensor, Tensor)], config: &MetricConfig) -> Result<Self> {
        if items.is_empty() {
            return Err(CvdmError::Config("nothing to evaluate".into()));
        }
        let per_sample = crate::parallel::map_indices(items.len(), |i| {
            let (id, y, y_hat) = &items[i];
            sample_metrics(id, y, y_hat, config)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            count: per_sample.len(),
            config: *config,
            aggregate: AggregateMetrics {
                mae: mean(|s| s.mae),
                ms_ssim: mean(|s| s.ms_ssim),
                ssim: mean(|s| s.ssim),
                psnr: mean(|s| s.psnr),
            },
            per_sample,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per sample followed by a `mean` row.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(crate::schedule::csv_err)?;
        w.write_record(["id", "mae", "ms_ssim", "ssim", "psnr"])
            .map_err(crate::schedule::csv_err)?;
        let a = &self.aggregate;
        let rows = self
            .per_sample
            .iter()
            .map(|s| (s.id.as_str(), s.mae, s.ms_ssim, s.ssim, s.psnr))
            .chain(std::iter::once(("mean", a.mae, a.ms_ssim, a.ssim, a.psnr)));
        for (id, m, ms, s, p) in rows {
            w.write_record([id.to_string(), m.to_string(), ms.to_string(), s.to_string(), p.to_string()])
                .map_err(crate::schedule::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
