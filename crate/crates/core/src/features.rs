//! Feature sources: the toy backbone used in synthetic mode and pass-through
//! of precomputed maps, plus the two-view branch duplication.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Spatial and channel extent of a single feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapDims {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// A batched `[batch, H, W, C]` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [batch, height, width, channels] => Ok(FeatureMap {
                batch,
                height,
                width,
                channels,
                data,
            }),
            [height, width, channels] => {
                let data = data.reshape(vec![1, height, width, channels])?;
                Ok(FeatureMap {
                    batch: 1,
                    height,
                    width,
                    channels,
                    data,
                })
            }
            _ => Err(Error::Data(format!(
                "feature map must be [batch,H,W,C] or [H,W,C], got {:?}",
                data.shape()
            ))),
        }
    }

    pub fn dims(&self) -> MapDims {
        MapDims {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data.data()[((b * self.height + h) * self.width + w) * self.channels + c]
    }

    /// Swaps the spatial axes: `out[b, w, h, c] = self[b, h, w, c]`.
    pub fn transposed(&self) -> FeatureMap {
        let (bn, h, w, c) = (self.batch, self.height, self.width, self.channels);
        let src = self.data.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..bn {
            for i in 0..h {
                for j in 0..w {
                    let s = ((b * h + i) * w + j) * c;
                    let d = ((b * w + j) * h + i) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        FeatureMap {
            batch: bn,
            height: w,
            width: h,
            channels: c,
            data: Tensor::new(vec![bn, w, h, c], out).expect("same element count"),
        }
    }
}

/// Returns the horizontal-branch map (the input) and the vertical-branch map
/// (its spatial transpose).
pub fn duplicate_branches(fm: &FeatureMap) -> (FeatureMap, FeatureMap) {
    (fm.clone(), fm.transposed())
}

/// Shape of the toy backbone: the input vector is cut into patches, each
/// patch is embedded by a shared linear map, and a second linear map expands
/// the flattened embedding to the full `H x W x C` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub patch_size: usize,
    pub patch_embed: usize,
    pub map: MapDims,
}

impl BackboneConfig {
    pub fn patches(&self) -> usize {
        self.input_dim / self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.patches() * self.patch_embed
    }

    pub fn param_count(&self) -> usize {
        self.patch_size * self.patch_embed + self.hidden() * self.map.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_embed == 0 || self.input_dim == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.input_dim % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input dimension {} is not a multiple of patch size {}",
                self.input_dim, self.patch_size
            )));
        }
        if self.param_count() >= 1_000_000 {
            return Err(Error::Config(format!(
                "toy backbone would have {} parameters (limit 1e6)",
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Weights of the convolution-free stand-in backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    /// `[patch_size, patch_embed]`
    pub patch: Tensor,
    /// `[hidden, H*W*C]`
    pub expand: Tensor,
}

impl ToyBackbone {
    /// He-scaled Gaussian initialization.
    pub fn init<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let patch = gaussian(
            rng,
            vec![config.patch_size, config.patch_embed],
            (2.0 / config.patch_size as f64).sqrt(),
        );
        let expand = gaussian(
            rng,
            vec![config.hidden(), config.map.numel()],
            (2.0 / config.hidden() as f64).sqrt(),
        );
        Ok(ToyBackbone {
            config,
            patch,
            expand,
        })
    }

    /// Runs the backbone on `tape` with the weights already registered as
    /// `patch` and `expand`. Returns a `[1, H, W, C]` node.
    pub fn forward(
        config: &BackboneConfig,
        tape: &mut Tape,
        patch: Var,
        expand: Var,
        input: Var,
    ) -> Result<Var> {
        let x = tape.reshape(input, vec![config.patches(), config.patch_size])?;
        let embedded = tape.matmul(x, patch)?;
        let flat = tape.reshape(embedded, vec![config.hidden()])?;
        let hidden = tape.relu(flat);
        let out = tape.matmul(hidden, expand)?;
        let out = tape.relu(out);
        let m = config.map;
        tape.reshape(out, vec![1, m.height, m.width, m.channels])
    }
}

pub(crate) fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("matching length")
}

pub fn check_vector_input(config: &BackboneConfig, input: &Tensor) -> Result<()> {
    let want = config.input_dim;
    if input.numel() != want || input.rank() > 2 || input.shape().last() != Some(&want) {
        return Err(Error::Data(format!(
            "synthetic input must be a {want}-vector, got {:?}",
            input.shape()
        )));
    }
    Ok(())
}

pub fn check_map_input(d: MapDims, input: &Tensor) -> Result<()> {
    let ok = match input.shape() {
        [h, w, c] | [1, h, w, c] => (*h, *w, *c) == (d.height, d.width, d.channels),
        _ => false,
    };
    if !ok {
        return Err(Error::Data(format!(
            "precomputed map must be [{}, {}, {}], got {:?}",
            d.height,
            d.width,
            d.channels,
            input.shape()
        )));
    }
    Ok(())
}

/// Where feature maps come from.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Synthetic vectors pushed through a trainable toy backbone.
    Toy(ToyBackbone),
    /// Maps read from disk, used as-is.
    Precomputed(MapDims),
}

impl FeatureSource {
    pub fn map_dims(&self) -> MapDims {
        match self {
            FeatureSource::Toy(b) => b.config.map,
            FeatureSource::Precomputed(d) => *d,
        }
    }

    /// Checks that `input` fits this source.
    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        match self {
            FeatureSource::Toy(b) => check_vector_input(&b.config, input),
            FeatureSource::Precomputed(d) => check_map_input(*d, input),
        }
    }

    /// Places `input` on the tape and returns the `[1, H, W, C]` map node.
    /// `weights` holds the backbone's (patch, expand) nodes in toy mode.
    pub fn forward(&self, tape: &mut Tape, weights: Option<(Var, Var)>, input: &Tensor) -> Result<Var> {
        self.check_input(input)?;
        match self {
            FeatureSource::Toy(b) => {
                let (patch, expand) = weights
                    .ok_or_else(|| Error::Config("toy backbone weights not registered".into()))?;
                let x = tape.constant(input.clone().reshape(vec![b.config.input_dim])?);
                ToyBackbone::forward(&b.config, tape, patch, expand, x)
            }
            FeatureSource::Precomputed(d) => {
                let shape = vec![1, d.height, d.width, d.channels];
                Ok(tape.constant(input.clone().reshape(shape)?))
            }
        }
    }

    /// Value-level extraction of a single sample.
    pub fn extract(&self, input: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let weights = match self {
            FeatureSource::Toy(b) => Some((
                tape.constant(b.patch.clone()),
                tape.constant(b.expand.clone()),
            )),
            FeatureSource::Precomputed(_) => None,
        };
        let out = self.forward(&mut tape, weights, input)?;
        FeatureMap::new(tape.value(out).clone())
    }
}
