//! Run configuration: defaults, then a `key=value` file, then flags.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::losses::SoftmaxTarget;
use crate::synth::SyntheticSpec;
use crate::trainer::{BankSource, CenterRefresh, LossKind, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Standard,
    SingleGallery,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::SingleGallery => "single-gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub branches: Branches,
    pub synth: SyntheticSpec,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metric: Metric,
    pub protocol: Protocol,
    pub trials: usize,
    pub baseline_shuffles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            branches: Branches::Two,
            synth: SyntheticSpec::default(),
            out: PathBuf::from("out"),
            manifest: None,
            checkpoint: None,
            metric: Metric::Cosine,
            protocol: Protocol::Standard,
            trials: 10,
            baseline_shuffles: 1000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn choice<T>(key: &str, value: &str, parsed: Option<T>) -> Result<T> {
    parsed.ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Every key understood by [`set`](Self::set).
    pub const KEYS: &'static [&'static str] = &[
        "seed", "epochs", "batch", "lr", "momentum", "lambda", "alpha", "beta", "delta",
        "softmax_target", "p1", "p2", "height", "width", "channels", "input_dim", "patch_size",
        "patch_embed", "branches", "memory", "loss", "bank_source", "center_refresh", "out",
        "manifest", "checkpoint", "metric", "protocol", "trials", "baseline_shuffles",
        "identities", "per_identity", "cameras", "intra_spread", "camera_shift",
        "train_identities",
    ];

    /// Applies one setting. The synthetic generator shares the run's seed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                self.synth.seed = t.seed;
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch" => t.batch_size = parse(key, value)?,
            "lr" => {
                t.lr_schedule = if value == "default" {
                    None
                } else {
                    Some(LrSchedule::parse(value)?)
                }
            }
            "momentum" => t.momentum = parse(key, value)?,
            "lambda" => t.loss.lambda = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "beta" => t.loss.beta = parse(key, value)?,
            "delta" => t.delta = parse(key, value)?,
            "softmax_target" => {
                t.loss.softmax_target = choice(
                    key,
                    value,
                    match value {
                        "instance" => Some(SoftmaxTarget::Instance),
                        "class" => Some(SoftmaxTarget::Class),
                        _ => None,
                    },
                )?
            }
            "p1" => t.model.p1 = parse(key, value)?,
            "p2" => t.model.p2 = parse(key, value)?,
            "height" => t.model.height = parse(key, value)?,
            "width" => t.model.width = parse(key, value)?,
            "channels" => t.model.channels = parse(key, value)?,
            "input_dim" => {
                t.model.input_dim = parse(key, value)?;
                self.synth.input_dim = t.model.input_dim;
            }
            "patch_size" => t.model.patch_size = parse(key, value)?,
            "patch_embed" => t.model.patch_embed = parse(key, value)?,
            "branches" => {
                self.branches = choice(
                    key,
                    value,
                    match value {
                        "one" => Some(Branches::One),
                        "two" => Some(Branches::Two),
                        _ => None,
                    },
                )?
            }
            "memory" => {
                t.memory = choice(
                    key,
                    value,
                    match value {
                        "on" => Some(true),
                        "off" => Some(false),
                        _ => None,
                    },
                )?
            }
            "loss" => t.loss_kind = choice(key, value, LossKind::parse(value))?,
            "bank_source" => t.bank_source = choice(key, value, BankSource::parse(value))?,
            "center_refresh" => {
                t.center_refresh = if value == "full" {
                    CenterRefresh::Full
                } else {
                    CenterRefresh::Lazy {
                        interval: parse(key, value)?,
                    }
                }
            }
            "out" => self.out = PathBuf::from(value),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "metric" => self.metric = choice(key, value, Metric::parse(value))?,
            "protocol" => {
                self.protocol = choice(
                    key,
                    value,
                    match value {
                        "standard" => Some(Protocol::Standard),
                        "single-gallery" => Some(Protocol::SingleGallery),
                        _ => None,
                    },
                )?
            }
            "trials" => self.trials = parse(key, value)?,
            "baseline_shuffles" => self.baseline_shuffles = parse(key, value)?,
            "identities" => self.synth.num_identities = parse(key, value)?,
            "per_identity" => self.synth.samples_per_identity = parse(key, value)?,
            "cameras" => self.synth.num_cameras = parse(key, value)?,
            "intra_spread" => self.synth.intra_spread = parse(key, value)?,
            "camera_shift" => self.synth.camera_shift = parse(key, value)?,
            "train_identities" => self.synth.train_identities = Some(parse(key, value)?),
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", origin.display(), n + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}:{}: {msg}", origin.display(), n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// Defaults, then `file`, then `flags` in order.
    pub fn resolve(file: Option<&Path>, flags: &[(&str, String)]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        for (k, v) in flags {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// The training configuration with the branch switch applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.branches == Branches::One {
            t.model.p2 = 0;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == Branches::Two && self.train.model.p2 == 0 {
            return Err(Error::Config("two branches need p2 >= 1".into()));
        }
        if self.trials == 0 || self.baseline_shuffles == 0 {
            return Err(Error::Config("trials and baseline_shuffles must be at least 1".into()));
        }
        self.effective_train().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 12\nalpha=0.7 # margin\nbeta=0.2\n\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &[("epochs", "3".into())]).unwrap();
        assert_eq!(c.train.epochs, 3); // flag beats file
        assert_eq!(c.train.loss.alpha, 0.7); // file beats default
        assert_eq!(c.train.loss.beta, 0.2);
        assert_eq!(c.train.batch_size, 16); // default
        assert_eq!(c.train.momentum, 0.9);
    }

    #[test]
    fn one_branch_drops_vertical_parts() {
        let c = RunConfig::resolve(None, &[("branches", "one".into())]).unwrap();
        assert_eq!(c.effective_train().model.p2, 0);
        assert_eq!(c.effective_train().model.parts(), 6);
        let err = RunConfig::resolve(None, &[("p2", "0".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_settings_name_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("epochs=1\nmemory=maybe\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.to_string().contains("x.cfg:2"), "{err}");
        assert!(c.apply_text("nonsense\n", Path::new("x.cfg")).is_err());
        assert!(c.set("unknown", "1").is_err());
        assert!(c.set("epochs", "-1").is_err());
    }

    #[test]
    fn every_key_is_accepted() {
        let samples = [
            ("lr", "default"),
            ("softmax_target", "instance"),
            ("branches", "two"),
            ("memory", "off"),
            ("loss", "triplet"),
            ("bank_source", "pooled"),
            ("center_refresh", "full"),
            ("metric", "euclidean"),
            ("protocol", "single-gallery"),
            ("out", "x"),
            ("manifest", "m.csv"),
            ("checkpoint", "c.pamf"),
            ("intra_spread", "0.5"),
            ("camera_shift", "1.5"),
            ("momentum", "0.5"),
            ("lambda", "1"),
            ("alpha", "1"),
            ("beta", "0.5"),
            ("delta", "0.5"),
        ];
        for key in RunConfig::KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("4", |(_, v)| v);
            RunConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
