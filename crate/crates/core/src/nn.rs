//! Network building blocks: convolutional layers, the U-Net used by both the
//! condition network and the denoiser, and the positive-weight monotone network
//! for the time-dependent schedule factors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inv, Graph, Jet, Var};
use crate::error::{CvdmError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Padding, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: Padding,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let weight = if zero_init {
            store.add(format!("{name}.weight"), Tensor::zeros(&shape))
        } else {
            let fan_in = c_in * kernel * kernel;
            store.add_normal(format!("{name}.weight"), &shape, fan_in, 2f64.sqrt(), rng)
        };
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            padding,
        }
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        x.conv2d(w, Some(b), self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[c_in, c_out, 2, 2],
            c_in,
            2f64.sqrt(),
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.conv_transpose2x2(g.param(store, self.weight), Some(g.param(store, self.bias)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of resolution levels (each extra level halves the spatial size).
    pub levels: usize,
    pub base_filters: usize,
    pub instance_norm: bool,
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_filters: 8,
            instance_norm: true,
            padding: Padding::Zero,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_filters == 0 {
            return Err(CvdmError::Config(
                "U-Net needs at least one level and one filter".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

/// Encoder-decoder with mirrored skip connections. Each block is two rounds
/// of 3×3 convolution, softplus and (optionally) instance normalisation.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    encoder: Vec<Block>,
    up: Vec<ConvTranspose2x2>,
    decoder: Vec<Block>,
    head: Conv2d,
    output: OutputActivation,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &UNetConfig,
        c_in: usize,
        c_out: usize,
        output: OutputActivation,
        zero_head: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let pad = config.padding;
        let width = |l: usize| config.base_filters << l;
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 { c_in } else { width(l - 1) };
            encoder.push(Block {
                a: Conv2d::new(store, &format!("{name}.enc{l}.a"), cin, width(l), 3, pad, false, rng),
                b: Conv2d::new(store, &format!("{name}.enc{l}.b"), width(l), width(l), 3, pad, false, rng),
            });
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..config.levels - 1 {
            up.push(ConvTranspose2x2::new(
                store,
                &format!("{name}.up{l}"),
                width(l + 1),
                width(l),
                rng,
            ));
            decoder.push(Block {
                a: Conv2d::new(store, &format!("{name}.dec{l}.a"), 2 * width(l), width(l), 3, pad, false, rng),
                b: Conv2d::new(store, &format!("{name}.dec{l}.b"), width(l), width(l), 3, pad, false, rng),
            });
        }
        let head = Conv2d::new(store, &format!("{name}.head"), width(0), c_out, 1, pad, zero_head, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            up,
            decoder,
            head,
            output,
        })
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias_id()
    }

    fn block<'g>(&self, g: &'g Graph, store: &ParamStore, block: &Block, x: Var<'g>) -> Result<Var<'g>> {
        let mut h = x;
        for conv in [&block.a, &block.b] {
            h = conv.forward(g, store, h)?.softplus()?;
            if self.config.instance_norm {
                h = h.instance_norm()?;
            }
        }
        Ok(h)
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let m = self.config.size_multiple();
        if shape.len() != 4 || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(CvdmError::Shape(format!(
                "U-Net with {} levels needs NCHW input with H, W divisible by {m}, got {:?}",
                self.config.levels, shape
            )));
        }
        let mut skips = Vec::new();
        let mut h = x;
        for (l, block) in self.encoder.iter().enumerate() {
            h = self.block(g, store, block, h)?;
            if l + 1 < self.config.levels {
                skips.push(h);
                h = h.avg_pool2()?;
            }
        }
        for l in (0..self.config.levels - 1).rev() {
            let upsampled = self.up[l].forward(g, store, h)?;
            let joined = Var::concat(&[skips[l], upsampled], 1)?;
            h = self.block(g, store, &self.decoder[l], joined)?;
        }
        let out = self.head.forward(g, store, h)?;
        match self.output {
            OutputActivation::Linear => Ok(out),
            OutputActivation::Softplus => out.softplus(),
        }
    }
}

/// Scalar network `m(t)` that is nondecreasing in `t`: a residual block of
/// three dense layers (linear, sigmoid, linear) whose weights pass through a
/// softplus so they stay positive.
#[derive(Debug, Clone)]
pub struct MonotoneNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl MonotoneNet {
    /// `target` is the value `softplus(m(0.5))` the network starts at.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        target: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.add(format!("{name}.w1"), Tensor::full(&[1, 1], softplus_inv(1.0)));
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[1]));
        let w2 = store.add_normal(format!("{name}.w2"), &[1, hidden], 1, 1.0, rng);
        let b2 = store.add_normal(format!("{name}.b2"), &[hidden], 1, 1.0, rng);
        let w3 = store.add(
            format!("{name}.w3"),
            Tensor::full(&[hidden, 1], softplus_inv(1.0 / hidden as f64)),
        );
        let b3 = store.add(format!("{name}.b3"), Tensor::zeros(&[1]));
        let net = Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        };
        // shift the output bias so softplus(m(0.5)) == target
        let g = Graph::no_grad();
        let half = g.constant(Tensor::full(&[1, 1], 0.5));
        let m = net
            .forward(&g, store, Jet::constant(half))
            .expect("monotone net init")
            .v
            .item();
        store.get_mut(b3).data_mut()[0] = softplus_inv(target) - m;
        net
    }

    /// `t` has shape `[B, 1]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, t: Jet<'g>) -> Result<Jet<'g>> {
        let pos = |id| g.param(store, id).softplus();
        let l1 = t.affine(pos(self.w1)?, Some(g.param(store, self.b1)))?;
        let h = l1.affine(pos(self.w2)?, Some(g.param(store, self.b2)))?.sigmoid()?;
        let l3 = h.affine(pos(self.w3)?, Some(g.param(store, self.b3)))?;
        l1.add(l3)
    }
}
