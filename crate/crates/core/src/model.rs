//! Per-scale generator and discriminator.
//!
//! Both networks are a ladder of 3×3 convolution blocks: a head block
//! (conv, ReLU), body blocks (conv, batch norm, ReLU) and a tail conv. The
//! generator tail maps to image channels through `tanh` and is used as a
//! residual on top of the upsampled coarser image; the discriminator tail
//! maps to a one-channel patch score map with no output nonlinearity.
//!
//! The discriminator's tail conv is the embedding layer: it is the layer
//! perturbed by embedding-site attacks and the source of `W_σ`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::spectral::{spectral_norm_warm, ConvOperator, PowerIteration};
use crate::tensor::{Shape, Tensor};

const BN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
}

/// Architecture of one network in the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub role: Role,
    pub n_blocks: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub scale_index: usize,
    /// Downsamplings between this scale and the coarsest one.
    pub scale_gap: usize,
    pub image_channels: usize,
}

/// Width of every hidden block: doubles every four scales up from the
/// coarsest.
pub fn channels_for_gap(base_channels: usize, scale_gap: usize) -> usize {
    base_channels << (scale_gap / 4)
}

impl NetSpec {
    pub fn new(role: Role, scale_index: usize, coarsest: usize) -> Self {
        NetSpec {
            role,
            n_blocks: 5,
            base_channels: 32,
            kernel: 3,
            scale_index,
            scale_gap: coarsest - scale_index,
            image_channels: 3,
        }
    }

    pub fn with_blocks(mut self, n_blocks: usize) -> Self {
        self.n_blocks = n_blocks;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_image_channels(mut self, c: usize) -> Self {
        self.image_channels = c;
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn channels(&self) -> usize {
        channels_for_gap(self.base_channels, self.scale_gap)
    }

    pub fn out_channels(&self) -> usize {
        match self.role {
            Role::Generator => self.image_channels,
            Role::Discriminator => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 3 {
            return Err(Error::Config(format!(
                "a network needs a head, a body and a tail block, got {}",
                self.n_blocks
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Side of the square input patch that one output score depends on.
    pub fn receptive_field(&self) -> usize {
        1 + self.n_blocks * (self.kernel - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<BatchNormParams>,
}

/// Parameters of one network: weights `W_1 … W_d` in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub spec: NetSpec,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub spectral: f64,
    pub frobenius: f64,
}

impl NetParams {
    /// Random initialisation: conv weights `N(0, 0.02²)`, batch-norm gains
    /// `N(1, 0.02²)`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels();
        let k = spec.kernel;
        let d = spec.n_blocks;
        let blocks = (0..d)
            .map(|i| {
                let cin = if i == 0 { spec.image_channels } else { c };
                let cout = if i + 1 == d { spec.out_channels() } else { c };
                let norm = (i > 0 && i + 1 < d).then(|| BatchNormParams {
                    gamma: Tensor::randn([1, cout, 1, 1], INIT_STD, rng).map(|v| v + 1.0),
                    beta: Tensor::zeros([1, cout, 1, 1]),
                });
                ConvBlock {
                    weight: Tensor::randn([cout, cin, k, k], INIT_STD, rng),
                    bias: Tensor::zeros([1, cout, 1, 1]),
                    norm,
                }
            })
            .collect();
        Ok(NetParams { spec, blocks })
    }

    /// Layer count `d`.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn last_layer(&self) -> &ConvBlock {
        self.blocks.last().expect("networks have at least two blocks")
    }

    pub fn last_layer_mut(&mut self) -> &mut ConvBlock {
        self.blocks.last_mut().expect("networks have at least two blocks")
    }

    /// Unit count `h` of the embedding layer: channels entering the tail.
    pub fn embedding_units(&self) -> usize {
        self.last_layer().weight.shape()[1]
    }

    /// Shape of the tail-layer input for an image of `hw`.
    pub fn embedding_shape(&self, batch: usize, hw: (usize, usize)) -> Shape {
        [batch, self.embedding_units(), hw.0, hw.1]
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bias"), &b.bias));
            if let Some(n) = &b.norm {
                out.push((format!("block{i}.bn.gamma"), &n.gamma));
                out.push((format!("block{i}.bn.beta"), &n.beta));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`NetParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuild parameters for `spec` from tensors in serialization order.
    pub fn from_tensors(spec: NetSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let mut template = NetParams::init(spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let slots = template.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "tensor shape {:?} does not match architecture {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    /// SHA-256 over every tensor; equal hashes mean bitwise-equal params.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            t.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Put the parameters on a tape. With `trainable` they are tracked
    /// leaves, otherwise constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> NetVars {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                weight: leaf(&b.weight),
                bias: leaf(&b.bias),
                norm: b.norm.as_ref().map(|n| (leaf(&n.gamma), leaf(&n.beta))),
            })
            .collect();
        NetVars {
            spec: self.spec.clone(),
            blocks,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockVars {
    weight: Var,
    bias: Var,
    norm: Option<(Var, Var)>,
}

/// Parameters bound to a [`Graph`].
#[derive(Clone, Debug)]
pub struct NetVars {
    spec: NetSpec,
    blocks: Vec<BlockVars>,
}

impl NetVars {
    /// Vars in the order of [`NetParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weight);
            out.push(b.bias);
            if let Some((g, be)) = b.norm {
                out.push(g);
                out.push(be);
            }
        }
        out
    }
}

fn batch_norm(g: &Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let [n, c, h, w] = g.shape(x);
    let count = (n * h * w) as f64;
    let sum = g.sum_to(x, [1, c, 1, 1])?;
    let mean = g.scale(sum, 1.0 / count);
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered)?;
    let var = g.scale(g.sum_to(sq, [1, c, 1, 1])?, 1.0 / count);
    let std = g.sqrt(g.offset(var, BN_EPS));
    let normed = g.div(centered, std)?;
    g.add(g.mul(normed, gamma)?, beta)
}

/// Run the block ladder; `inject` is added to the tail input.
fn ladder(g: &Graph, net: &NetVars, x: Var, inject: Option<Var>) -> Result<Var> {
    let geom = ConvGeom::same(net.spec.kernel);
    let last = net.blocks.len() - 1;
    let mut h = x;
    for (i, b) in net.blocks.iter().enumerate() {
        if i == last {
            if let Some(eps) = inject {
                if g.shape(eps) != g.shape(h) {
                    return Err(Error::invalid(format!(
                        "embedding perturbation {:?} does not match embedding {:?}",
                        g.shape(eps),
                        g.shape(h)
                    )));
                }
                h = g.add(h, eps)?;
            }
        }
        h = g.conv2d(h, b.weight, geom)?;
        h = g.add(h, b.bias)?;
        if let Some((gamma, beta)) = b.norm {
            h = batch_norm(g, h, gamma, beta)?;
        }
        if i < last {
            h = g.relu(h);
        }
    }
    Ok(match net.spec.role {
        Role::Generator => g.tanh(h),
        Role::Discriminator => h,
    })
}

fn check_image(g: &Graph, net: &NetVars, x: Var) -> Result<()> {
    let c = g.shape(x)[1];
    if c != net.spec.image_channels {
        return Err(Error::invalid(format!(
            "network expects {} image channels, got {c}",
            net.spec.image_channels
        )));
    }
    Ok(())
}

/// `prev + ψ(z + prev)`, or `ψ(z)` at the coarsest scale (`prev = None`).
pub fn generator_forward_graph(g: &Graph, net: &NetVars, z: Var, prev: Option<Var>) -> Result<Var> {
    check_image(g, net, z)?;
    match prev {
        None => ladder(g, net, z, None),
        Some(p) => {
            if g.shape(p) != g.shape(z) {
                return Err(Error::invalid(format!(
                    "noise {:?} and upsampled image {:?} differ in shape",
                    g.shape(z),
                    g.shape(p)
                )));
            }
            let input = g.add(z, p)?;
            let residual = ladder(g, net, input, None)?;
            g.add(p, residual)
        }
    }
}

/// Patch score map `[N, 1, H, W]`, optionally perturbing the tail input.
pub fn discriminator_forward_graph(g: &Graph, net: &NetVars, x: Var, inject: Option<Var>) -> Result<Var> {
    check_image(g, net, x)?;
    ladder(g, net, x, inject)
}

pub fn generator_forward(params: &NetParams, z: &Tensor, prev: Option<&Tensor>) -> Result<Tensor> {
    let g = Graph::new();
    let net = params.bind(&g, false);
    let z = g.constant(z.clone());
    let prev = prev.map(|p| g.constant(p.clone()));
    let out = generator_forward_graph(&g, &net, z, prev)?;
    Ok((*g.value(out)).clone())
}

pub fn discriminator_forward(params: &NetParams, image: &Tensor, inject: Option<&Tensor>) -> Result<Tensor> {
    let g = Graph::new();
    let net = params.bind(&g, false);
    let x = g.constant(image.clone());
    let inject = inject.map(|e| g.constant(e.clone()));
    let out = discriminator_forward_graph(&g, &net, x, inject)?;
    Ok((*g.value(out)).clone())
}

/// Spectral norm of one conv layer's unrolled operator on `hw` inputs.
pub fn conv_spectral_norm(weight: &Tensor, hw: (usize, usize), rule: PowerIteration, warm: &mut Vec<f64>) -> f64 {
    spectral_norm_warm(&ConvOperator::new(weight, hw), rule, warm)
}

/// `(‖W_i‖₂, ‖W_i‖_F)` for every conv layer, with the spectral norm taken
/// over the unrolled operator on `hw` inputs. Batch-norm gains are not
/// included.
pub fn layer_norms(params: &NetParams, hw: (usize, usize), rule: PowerIteration) -> Vec<LayerNorm> {
    params
        .blocks
        .iter()
        .map(|b| {
            let mut v = Vec::new();
            LayerNorm {
                spectral: conv_spectral_norm(&b.weight, hw, rule, &mut v),
                frobenius: b.weight.norm_l2(),
            }
        })
        .collect()
}
