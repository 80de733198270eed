//! Noise predictors `ε̂(z_t, γ(t, x), x)`.
//!
//! Time reaches the network only through the `γ` map, which is concatenated
//! with the condition and the latent along the channel axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CvdmError, Result};
use crate::nn::{OutputActivation, UNet, UNetConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub trait NoisePredictor {
    /// `z` and `gamma` are `[B, C_y, H, W]`, `x` is `[B, C_x, H, W]`.
    fn predict_noise<'g>(&self, g: &'g Graph, z: Var<'g>, gamma: Var<'g>, x: Var<'g>) -> Result<Var<'g>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub unet: UNetConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    net: UNet,
    condition_channels: usize,
    target_channels: usize,
}

impl DenoiserModel {
    /// The output layer starts at zero, so a fresh model predicts `ε̂ ≡ 0`.
    pub fn new(
        store: &mut ParamStore,
        config: &DenoiserConfig,
        condition_channels: usize,
        target_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = UNet::new(
            store,
            "denoiser",
            &config.unet,
            condition_channels + 2 * target_channels,
            target_channels,
            OutputActivation::Linear,
            true,
            rng,
        )?;
        Ok(Self {
            net,
            condition_channels,
            target_channels,
        })
    }

    pub fn bind<'a>(&'a self, params: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser {
            model: self,
            params,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub params: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict_noise<'g>(&self, g: &'g Graph, z: Var<'g>, gamma: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (zs, xs) = (z.shape(), x.shape());
        if xs.len() != 4
            || zs.len() != 4
            || xs[1] != self.model.condition_channels
            || zs[1] != self.model.target_channels
            || zs[0] != xs[0]
            || zs[2..] != xs[2..]
            || gamma.shape() != zs
        {
            return Err(CvdmError::Shape(format!(
                "denoiser expects x [B,{},H,W] and z, gamma [B,{},H,W]; got x {:?}, z {:?}, gamma {:?}",
                self.model.condition_channels,
                self.model.target_channels,
                xs,
                zs,
                gamma.shape()
            )));
        }
        let finite = |v: Var<'_>| v.with_value(|t| t.is_finite());
        if !finite(z) || !finite(x) {
            return Err(CvdmError::NonFinite("denoiser input".into()));
        }
        let input = Var::concat(&[x, gamma, z], 1)?;
        self.model.net.forward(g, self.params, input)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl NoisePredictor for ZeroDenoiser {
    fn predict_noise<'g>(&self, g: &'g Graph, z: Var<'g>, _gamma: Var<'g>, _x: Var<'g>) -> Result<Var<'g>> {
        Ok(g.constant(Tensor::zeros(&z.shape())))
    }
}

/// The exact noise for a known target: `ε̂ = (z − √γ·y*)/√(1 − γ)`.
#[derive(Debug, Clone)]
pub struct IdealDenoiser {
    /// Broadcast against the latent.
    pub target: Tensor,
}

impl NoisePredictor for IdealDenoiser {
    fn predict_noise<'g>(&self, g: &'g Graph, z: Var<'g>, gamma: Var<'g>, _x: Var<'g>) -> Result<Var<'g>> {
        let y = g.constant(self.target.clone());
        let signal = gamma.sqrt()?.mul(y)?;
        let noise_sd = gamma.rsub(1.0)?.sqrt()?;
        z.sub(signal)?.div(noise_sd)
    }
}

/// Evaluates a predictor on plain tensors.
pub fn predict_noise(
    denoiser: &dyn NoisePredictor,
    z: &Tensor,
    gamma: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let g = Graph::no_grad();
    let out = denoiser.predict_noise(&g, g.constant(z.clone()), g.constant(gamma.clone()), g.constant(x.clone()))?;
    Ok(out.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(norm: bool, pad: Padding) -> (ParamStore, DenoiserModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::default();
        let cfg = DenoiserConfig {
            unet: UNetConfig {
                levels: 3,
                base_filters: 4,
                instance_norm: norm,
                padding: pad,
            },
        };
        let m = DenoiserModel::new(&mut store, &cfg, 2, 1, &mut rng).unwrap();
        (store, m)
    }

    fn randomise_head(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("denoiser.head")).collect();
        for id in ids {
            for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.2 * ((i as f64) + 1.0).sin();
            }
        }
    }

    #[test]
    fn starts_at_zero_and_is_resolution_free() {
        let (store, m) = model(true, Padding::Zero);
        let before = store.numel();
        for size in [16, 32, 64] {
            let x = Tensor::from_fn(&[1, 2, size, size], |i| (i as f64 * 0.01).sin());
            let z = Tensor::from_fn(&[1, 1, size, size], |i| (i as f64 * 0.02).cos());
            let gamma = Tensor::full(&[1, 1, size, size], 0.4);
            let e = predict_noise(&m.bind(&store), &z, &gamma, &x).unwrap();
            assert_eq!(e.shape(), &[1, 1, size, size]);
            assert!(e.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(store.numel(), before);
    }

    #[test]
    fn cyclic_shift_equivariance() {
        // pooling makes the network equivariant to shifts by multiples of 4 only
        let (mut store, m) = model(true, Padding::Circular);
        randomise_head(&mut store);
        let (h, w) = (16, 16);
        let field = |c: usize, seed: f64| {
            Tensor::from_fn(&[1, c, h, w], move |i| ((i as f64) * 0.37 + seed).sin())
        };
        let (x, z, gamma) = (field(2, 0.0), field(1, 1.0), field(1, 2.0).map(|v| 0.5 + 0.4 * v));
        let shift = |t: &Tensor| {
            let s = t.shape().to_vec();
            Tensor::from_fn(&s, |i| {
                let (plane, rem) = (i / (h * w), i % (h * w));
                let (r, c) = (rem / w, rem % w);
                t.data()[plane * h * w + ((r + h - 4) % h) * w + (c + w - 8) % w]
            })
        };
        let bound = m.bind(&store);
        let a = shift(&predict_noise(&bound, &z, &gamma, &x).unwrap());
        let b = predict_noise(&bound, &shift(&z), &shift(&gamma), &shift(&x)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-10));
        assert!(a.max_abs() > 1e-3);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let (mut store, m) = model(true, Padding::Zero);
        randomise_head(&mut store);
        let bound = m.bind(&store);
        let x = Tensor::from_fn(&[1, 2, 8, 8], |i| (i as f64 * 0.21).cos());
        let gamma = Tensor::full(&[1, 1, 8, 8], 0.3);
        let eps = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 1.7).sin());
        let z0 = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.9).sin());
        let loss = |z: &Tensor| {
            let e = predict_noise(&bound, z, &gamma, &x).unwrap();
            e.zip_map(&eps, |a, b| (a - b) * (a - b)).unwrap().sum()
        };
        let g = Graph::new();
        let zv = g.input(z0.clone());
        let e = bound
            .predict_noise(&g, zv, g.constant(gamma.clone()), g.constant(x.clone()))
            .unwrap();
        let l = e.sub(g.constant(eps.clone())).unwrap().square().unwrap().sum().unwrap();
        let grad = g.backward(l).unwrap().wrt(zv).unwrap().clone();
        for k in [0, 9, 17, 26, 35, 44, 53, 63] {
            let (mut zp, mut zm) = (z0.clone(), z0.clone());
            zp.data_mut()[k] += 1e-6;
            zm.data_mut()[k] -= 1e-6;
            let fd = (loss(&zp) - loss(&zm)) / 2e-6;
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (store, m) = model(false, Padding::Zero);
        let x = Tensor::zeros(&[1, 2, 16, 16]);
        let z = Tensor::zeros(&[1, 1, 16, 8]);
        assert!(predict_noise(&m.bind(&store), &z, &z, &x).is_err());
        let bad = Tensor::full(&[1, 1, 16, 16], f64::NAN);
        let gamma = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(
            predict_noise(&m.bind(&store), &bad, &gamma, &x),
            Err(CvdmError::NonFinite(_))
        ));
    }

    #[test]
    fn ideal_denoiser_recovers_noise() {
        let y = Tensor::new(&[1, 1, 1, 2], vec![0.3, -0.8]).unwrap();
        let eps = Tensor::new(&[1, 1, 1, 2], vec![1.1, 0.2]).unwrap();
        let gamma = Tensor::full(&[1, 1, 1, 2], 0.36);
        let z = crate::diffusion::sample_forward(&y, &gamma, &eps).unwrap();
        let e = predict_noise(&IdealDenoiser { target: y.clone() }, &z, &gamma, &y).unwrap();
        assert!(e.data().iter().zip(eps.data()).all(|(a, b)| (a - b).abs() < 1e-14));
    }
}
