use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::load_tensors;
use crate::conv::{conv2d, max_pool2d, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming an Inception-v3 stem weights archive.
pub const INCEPTION_WEIGHTS_ENV: &str = "MSGAN_INCEPTION_WEIGHTS";

/// Maps an image to a spatial grid of feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// `[1, feature_dim, H', W']` feature map.
    fn extract(&self, image: &Tensor) -> Result<Tensor>;
}

fn check_rgb(image: &Tensor) -> Result<()> {
    if image.batch() != 1 || image.channels() != 3 {
        return Err(Error::invalid(format!("feature extractors take one RGB image, got shape {:?}", image.shape())));
    }
    Ok(())
}

/// Seeded random conv features: two 3×3 layers with ReLU, the second with
/// stride 2. Deterministic and weight-free, but its scores are not
/// comparable to Inception-based SIFID.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    first: Tensor,
    second: Tensor,
}

impl RandomProjection {
    pub fn new(seed: u64, hidden: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = Tensor::randn([hidden, 3, 3, 3], (2.0 / 27.0f64).sqrt(), &mut rng);
        let second = Tensor::randn([dim, hidden, 3, 3], (2.0 / (9 * hidden) as f64).sqrt(), &mut rng);
        RandomProjection { first, second }
    }
}

impl Default for RandomProjection {
    fn default() -> Self {
        RandomProjection::new(0x51f1d, 32, 64)
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn feature_dim(&self) -> usize {
        self.second.shape()[0]
    }

    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        check_rgb(image)?;
        let h = conv2d(image, &self.first, ConvGeom::same(3))?.map(|v| v.max(0.0));
        Ok(conv2d(&h, &self.second, ConvGeom { pad: 1, stride: 2 })?.map(|v| v.max(0.0)))
    }
}

struct ConvBn {
    weight: Tensor,
    scale: Vec<f64>,
    shift: Vec<f64>,
    geom: ConvGeom,
}

impl ConvBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.weight, self.geom)?;
        for c in 0..y.channels() {
            let (s, b) = (self.scale[c], self.shift[c]);
            y.plane_mut(0, c).iter_mut().for_each(|v| *v = (*v * s + b).max(0.0));
        }
        Ok(y)
    }
}

/// Inception-v3 stem up to the first max-pool (64 channels): three
/// conv/BN/ReLU layers then a 3×3 stride-2 pool. Weights come from a
/// tensor archive with entries `{conv}.weight`, `{conv}.bn.weight`,
/// `{conv}.bn.bias`, `{conv}.bn.running_mean`, `{conv}.bn.running_var` for
/// `conv` in `Conv2d_1a_3x3`, `Conv2d_2a_3x3`, `Conv2d_2b_3x3`.
pub struct InceptionStem {
    layers: Vec<ConvBn>,
    source: PathBuf,
}

pub const INCEPTION_LAYERS: [&str; 3] = ["Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3"];

impl InceptionStem {
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = load_tensors(path)?;
        let get = |name: String| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("{} lacks tensor `{name}`", path.display())))
        };
        let geoms = [ConvGeom { pad: 0, stride: 2 }, ConvGeom::valid(1), ConvGeom::same(3)];
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (name, geom) in INCEPTION_LAYERS.iter().zip(geoms) {
            let weight = get(format!("{name}.weight"))?.clone();
            let [out, cin, kh, kw] = weight.shape();
            if cin != in_ch || kh != 3 || kw != 3 {
                return Err(Error::invalid(format!("{name}.weight has unexpected shape {:?}", weight.shape())));
            }
            let vec = |suffix: &str| -> Result<Vec<f64>> {
                let t = get(format!("{name}.bn.{suffix}"))?;
                if t.len() != out {
                    return Err(Error::invalid(format!("{name}.bn.{suffix} has {} entries, expected {out}", t.len())));
                }
                Ok(t.data().to_vec())
            };
            let (g, b, m, v) = (vec("weight")?, vec("bias")?, vec("running_mean")?, vec("running_var")?);
            let scale: Vec<f64> = g.iter().zip(&v).map(|(g, v)| g / (v + 1e-3).sqrt()).collect();
            let shift = b.iter().zip(&m).zip(&scale).map(|((b, m), s)| b - m * s).collect();
            layers.push(ConvBn { weight, scale, shift, geom });
            in_ch = out;
        }
        Ok(InceptionStem {
            layers,
            source: path.to_path_buf(),
        })
    }

    pub fn source(&self) -> &Path {
        &self.source
    }
}

impl FeatureExtractor for InceptionStem {
    fn name(&self) -> &str {
        "inception-v3-pool1"
    }

    fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[0])
    }

    fn extract(&self, image: &Tensor) -> Result<Tensor> {
        check_rgb(image)?;
        let mut x = image.clone();
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        max_pool2d(&x, 3, 2)
    }
}

/// The Inception stem when the weights variable is set, else the random
/// projection.
pub fn default_extractor() -> Result<Box<dyn FeatureExtractor>> {
    match std::env::var_os(INCEPTION_WEIGHTS_ENV) {
        Some(p) if !p.is_empty() => Ok(Box::new(InceptionStem::load(Path::new(&p))?)),
        _ => Ok(Box::new(RandomProjection::default())),
    }
}
