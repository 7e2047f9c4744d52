//! The part model: feature source, two pooled branches and a per-branch
//! affine head shared across that branch's parts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{
    check_map_input, check_vector_input, gaussian, BackboneConfig, FeatureSource, MapDims,
    ToyBackbone,
};
use crate::parts::{pool_branch, Orientation, PartFeatureSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Horizontal parts.
    pub p1: usize,
    /// Vertical parts; 0 disables the second branch.
    pub p2: usize,
    pub input_dim: usize,
    pub patch_size: usize,
    pub patch_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 12,
            width: 12,
            channels: 64,
            p1: 6,
            p2: 6,
            input_dim: 256,
            patch_size: 16,
            patch_embed: 4,
        }
    }
}

impl ModelConfig {
    pub fn parts(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn map_dims(&self) -> MapDims {
        MapDims {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.input_dim,
            patch_size: self.patch_size,
            patch_embed: self.patch_embed,
            map: self.map_dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("map dimensions must be positive".into()));
        }
        if self.p1 == 0 {
            return Err(Error::Config("p1 must be at least 1".into()));
        }
        if self.p1 > self.height || self.p2 > self.width {
            return Err(Error::Config(format!(
                "a {}x{} map cannot hold {} horizontal and {} vertical parts",
                self.height, self.width, self.p1, self.p2
            )));
        }
        Ok(())
    }
}

/// Which feature source a model was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Toy,
    Precomputed,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Toy => "toy",
            SourceKind::Precomputed => "precomputed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toy" => Some(SourceKind::Toy),
            "precomputed" => Some(SourceKind::Precomputed),
            _ => None,
        }
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    kind: SourceKind,
    params: Vec<Param>,
}

/// The model's parameters placed on a tape, in `Model::params` order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Per-sample forward result: pooled (normalized) part vectors and head
/// features (normalized), both in part order.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub pooled: Vec<Var>,
    pub features: Vec<Var>,
}

const HEAD_INIT_STD: f64 = 0.01;
const BACKBONE_PATCH: &str = "backbone.patch";
const BACKBONE_EXPAND: &str = "backbone.expand";

fn head_names(orientation: Orientation) -> (&'static str, &'static str) {
    match orientation {
        Orientation::Horizontal => ("head.horizontal.weight", "head.horizontal.bias"),
        Orientation::Vertical => ("head.vertical.weight", "head.vertical.bias"),
    }
}

/// Names and shapes of a model's parameters, in order.
pub fn expected_params(config: &ModelConfig, kind: SourceKind) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    if kind == SourceKind::Toy {
        let b = config.backbone();
        out.push((BACKBONE_PATCH.to_string(), vec![b.patch_size, b.patch_embed]));
        out.push((BACKBONE_EXPAND.to_string(), vec![b.hidden(), b.map.numel()]));
    }
    let c = config.channels;
    let mut branches = vec![Orientation::Horizontal];
    if config.p2 > 0 {
        branches.push(Orientation::Vertical);
    }
    for o in branches {
        let (wn, bn) = head_names(o);
        out.push((wn.to_string(), vec![c, c]));
        out.push((bn.to_string(), vec![c]));
    }
    out
}

impl Model {
    /// Fresh weights. Heads start at the identity plus small noise so that
    /// initial head features track the pooled parts.
    pub fn init<R: Rng>(config: ModelConfig, kind: SourceKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        if kind == SourceKind::Toy {
            let b = ToyBackbone::init(config.backbone(), rng)?;
            params.push(Param {
                name: BACKBONE_PATCH.into(),
                value: b.patch,
            });
            params.push(Param {
                name: BACKBONE_EXPAND.into(),
                value: b.expand,
            });
        }
        let c = config.channels;
        let branches: &[Orientation] = if config.p2 > 0 {
            &[Orientation::Horizontal, Orientation::Vertical]
        } else {
            &[Orientation::Horizontal]
        };
        for &o in branches {
            let (wn, bn) = head_names(o);
            let mut w = gaussian(rng, vec![c, c], HEAD_INIT_STD);
            for i in 0..c {
                w.data_mut()[i * c + i] += 1.0;
            }
            params.push(Param {
                name: wn.into(),
                value: w,
            });
            params.push(Param {
                name: bn.into(),
                value: Tensor::zeros(vec![c]),
            });
        }
        Ok(Model {
            config,
            kind,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking every expected shape.
    pub fn from_params(config: ModelConfig, kind: SourceKind, mut params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let template = expected_params(&config, kind);
        if params.len() != template.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for ((name, shape), got) in template.iter().zip(&mut params) {
            if *name != got.name || shape.as_slice() != got.value.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    got.name,
                    got.value.shape(),
                )));
            }
        }
        Ok(Model {
            config,
            kind,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Feature source view of the current weights.
    pub fn source(&self) -> FeatureSource {
        match self.kind {
            SourceKind::Toy => FeatureSource::Toy(ToyBackbone {
                config: self.config.backbone(),
                patch: self.param(BACKBONE_PATCH).expect("toy model").clone(),
                expand: self.param(BACKBONE_EXPAND).expect("toy model").clone(),
            }),
            SourceKind::Precomputed => FeatureSource::Precomputed(self.config.map_dims()),
        }
    }

    /// Places every parameter on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.leaf(p.value.clone().with_grad())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    fn var_of(&self, vars: &ParamVars, name: &str) -> Option<Var> {
        self.params.iter().position(|p| p.name == name).map(|i| vars.0[i])
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, input: &Tensor) -> Result<SampleOutput> {
        let map = match self.kind {
            SourceKind::Toy => {
                let cfg = self.config.backbone();
                check_vector_input(&cfg, input)?;
                let patch = self.var_of(vars, BACKBONE_PATCH).expect("toy model");
                let expand = self.var_of(vars, BACKBONE_EXPAND).expect("toy model");
                let x = tape.constant(input.clone().reshape(vec![cfg.input_dim])?);
                ToyBackbone::forward(&cfg, tape, patch, expand, x)?
            }
            SourceKind::Precomputed => {
                let d = self.config.map_dims();
                check_map_input(d, input)?;
                tape.constant(input.clone().reshape(vec![1, d.height, d.width, d.channels])?)
            }
        };
        let dims = self.config.map_dims();

        let mut pooled = Vec::with_capacity(self.config.parts());
        let mut features = Vec::with_capacity(self.config.parts());
        for (orientation, count) in [
            (Orientation::Horizontal, self.config.p1),
            (Orientation::Vertical, self.config.p2),
        ] {
            if count == 0 {
                continue;
            }
            let (wn, bn) = head_names(orientation);
            let w = self.var_of(vars, wn).expect("head weight");
            let b = self.var_of(vars, bn).expect("head bias");
            for raw in pool_branch(tape, map, dims, orientation, count)? {
                let h = tape.l2_normalize(raw);
                let lin = tape.matmul(w, h)?;
                let f = tape.add(lin, b)?;
                pooled.push(h);
                features.push(tape.l2_normalize(f));
            }
        }
        Ok(SampleOutput { pooled, features })
    }

    /// Head features of one sample as a [`PartFeatureSet`].
    pub fn part_features(&self, sample_id: &str, input: &Tensor) -> Result<PartFeatureSet> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward(&mut tape, &vars, input)?;
        let parts = out
            .features
            .iter()
            .map(|&v| tape.value(v).data().to_vec())
            .collect();
        let orientations = std::iter::repeat_n(Orientation::Horizontal, self.config.p1)
            .chain(std::iter::repeat_n(Orientation::Vertical, self.config.p2))
            .collect();
        Ok(PartFeatureSet {
            sample_id: sample_id.to_string(),
            parts,
            orientations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_model_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(ModelConfig::default(), SourceKind::Toy, &mut rng).unwrap();
        assert!(m.param_count() < 1_000_000 + 2 * (64 * 64 + 64));
        let x = gaussian(&mut rng, vec![256], 1.0);
        let set = m.part_features("s", &x).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.concatenated().len(), 768);
        for p in &set.parts {
            let n: f64 = p.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_branch_has_no_vertical_head() {
        let cfg = ModelConfig {
            p2: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(cfg, SourceKind::Precomputed, &mut rng).unwrap();
        assert_eq!(m.params().len(), 2);
        let x = gaussian(&mut rng, vec![12, 12, 64], 1.0);
        assert_eq!(m.part_features("s", &x).unwrap().concatenated().len(), 6 * 64);
    }

    #[test]
    fn rejects_unpartitionable_config() {
        let cfg = ModelConfig {
            p1: 13,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::init(ModelConfig::default(), SourceKind::Precomputed, &mut rng).unwrap();
        let back = Model::from_params(*m.config(), m.kind(), m.params().to_vec()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.params().to_vec();
        bad[1].value = Tensor::zeros(vec![3]);
        assert!(Model::from_params(*m.config(), m.kind(), bad).is_err());
    }
}
