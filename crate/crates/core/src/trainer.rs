//! Mini-batch SGD with momentum, memory writes and center refresh.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{Dataset, TrainSet};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::losses::{
    batch_triplet_loss, combined_loss, memory_softmax_loss,
    triplet_center_loss, BatchFeatures, LossConfig, LossTerm,
};
use crate::memory::{check_delta, ClassCenters, MemoryBank};
use crate::model::{expected_params, Model, ModelConfig, Param, SourceKind};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.pamf";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Triplet hinge among batch members.
    Triplet,
    /// Triplet hinge against class centers.
    TripletCenter,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::TripletCenter => "tc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "triplet" => Some(LossKind::Triplet),
            "tc" => Some(LossKind::TripletCenter),
            _ => None,
        }
    }
}

/// What the bank stores for each sample-part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankSource {
    Head,
    Pooled,
}

impl BankSource {
    pub fn as_str(self) -> &'static str {
        match self {
            BankSource::Head => "head",
            BankSource::Pooled => "pooled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "head" => Some(BankSource::Head),
            "pooled" => Some(BankSource::Pooled),
            _ => None,
        }
    }
}

/// How class centers follow the bank between iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterRefresh {
    /// Recompute every center every iteration.
    Full,
    /// Refresh batch identities and their nearest negatives each iteration,
    /// everything every `interval` iterations.
    Lazy { interval: usize },
}

/// Learning rate `rate` for epochs `first..=last`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrStep {
    pub first: usize,
    pub last: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule(pub Vec<LrStep>);

impl LrSchedule {
    /// 0.05 for the first two thirds of training, 0.005 afterwards.
    pub fn default_for(epochs: usize) -> Self {
        if epochs == 0 {
            return LrSchedule(Vec::new());
        }
        let high = (epochs * 2).div_ceil(3).max(1);
        let mut steps = vec![LrStep {
            first: 1,
            last: high,
            rate: 0.05,
        }];
        if high < epochs {
            steps.push(LrStep {
                first: high + 1,
                last: epochs,
                rate: 0.005,
            });
        }
        LrSchedule(steps)
    }

    /// Parses `1-40:0.05,41-60:0.005`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed learning-rate schedule `{s}`"));
        let mut steps = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (range, rate) = item.split_once(':').ok_or_else(bad)?;
            let (first, last) = range.split_once('-').unwrap_or((range, range));
            steps.push(LrStep {
                first: first.trim().parse().map_err(|_| bad())?,
                last: last.trim().parse().map_err(|_| bad())?,
                rate: rate.trim().parse().map_err(|_| bad())?,
            });
        }
        Ok(LrSchedule(steps))
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        let mut next = 1;
        for s in &self.0 {
            if s.first != next || s.last < s.first {
                return Err(Error::Config(format!(
                    "learning-rate ranges must tile 1..={epochs} in order; got {}",
                    self
                )));
            }
            if !(s.rate > 0.0 && s.rate.is_finite()) {
                return Err(Error::Config(format!("learning rate must be > 0, got {}", s.rate)));
            }
            next = s.last + 1;
        }
        if next != epochs + 1 {
            return Err(Error::Config(format!(
                "learning-rate ranges must tile 1..={epochs}; got {self}"
            )));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> Option<f64> {
        self.0
            .iter()
            .find(|s| (s.first..=s.last).contains(&epoch))
            .map(|s| s.rate)
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let items: Vec<String> = self
            .0
            .iter()
            .map(|s| format!("{}-{}:{}", s.first, s.last, s.rate))
            .collect();
        f.write_str(&items.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` follows [`LrSchedule::default_for`].
    pub lr_schedule: Option<LrSchedule>,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub delta: f64,
    pub model: ModelConfig,
    pub memory: bool,
    pub loss_kind: LossKind,
    pub bank_source: BankSource,
    pub center_refresh: CenterRefresh,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr_schedule: None,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            delta: 0.5,
            model: ModelConfig::default(),
            memory: true,
            loss_kind: LossKind::TripletCenter,
            bank_source: BankSource::Head,
            center_refresh: CenterRefresh::Lazy { interval: 100 },
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        self.lr_schedule
            .clone()
            .unwrap_or_else(|| LrSchedule::default_for(self.epochs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let CenterRefresh::Lazy { interval: 0 } = self.center_refresh {
            return Err(Error::Config("center refresh interval must be at least 1".into()));
        }
        self.schedule().validate(self.epochs)?;
        self.loss.validate()?;
        check_delta(self.delta)?;
        self.model.validate()
    }
}

/// One row of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub tcl: f64,
    pub softmax: f64,
    pub combined: f64,
    pub skipped_terms: usize,
    #[serde(skip)]
    pub rejected: bool,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocities: Vec<Tensor>,
    pub bank: Option<MemoryBank>,
    /// Last completed epoch.
    pub epoch: usize,
    /// Iterations run so far, over all epochs.
    pub iteration: usize,
    pub log: Vec<IterationLog>,
    centers: Option<ClassCenters>,
}

/// `v' = mu v + g; p' = p - lr v'`. Leaves everything untouched and fails
/// when any gradient is non-finite.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            &[&[params.len()], &[grads.len()], &[velocity.len()]],
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", &[p.shape(), g.shape(), v.shape()]));
        }
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

fn model_text(config: &ModelConfig, kind: SourceKind) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("height", config.height),
        ("width", config.width),
        ("channels", config.channels),
        ("p1", config.p1),
        ("p2", config.p2),
        ("input_dim", config.input_dim),
        ("patch_size", config.patch_size),
        ("patch_embed", config.patch_embed),
    ] {
        let _ = writeln!(s, "{k}={v}");
    }
    let _ = writeln!(s, "source={}", kind.as_str());
    s
}

fn parse_model_text(text: &str) -> Result<(ModelConfig, SourceKind)> {
    let mut config = ModelConfig::default();
    let mut kind = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed model line `{line}`")))?;
        if k == "source" {
            kind = SourceKind::parse(v);
            continue;
        }
        let n: usize = v
            .parse()
            .map_err(|_| Error::Data(format!("malformed model line `{line}`")))?;
        match k {
            "height" => config.height = n,
            "width" => config.width = n,
            "channels" => config.channels = n,
            "p1" => config.p1 = n,
            "p2" => config.p2 = n,
            "input_dim" => config.input_dim = n,
            "patch_size" => config.patch_size = n,
            "patch_embed" => config.patch_embed = n,
            _ => return Err(Error::Data(format!("unknown model key `{k}`"))),
        }
    }
    let kind = kind.ok_or_else(|| Error::Data("model section lacks a source kind".into()))?;
    Ok((config, kind))
}

/// Stores the model alone; enough for evaluation.
pub fn model_checkpoint(model: &Model) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.put_text("model", model_text(model.config(), model.kind()));
    for p in model.params() {
        ck.put_tensor(format!("param/{}", p.name), p.value.clone());
    }
    ck
}

pub fn load_model(ck: &Checkpoint) -> Result<Model> {
    let (config, kind) = parse_model_text(ck.text("model")?)?;
    let params = expected_params(&config, kind)
        .into_iter()
        .map(|(name, _)| {
            Ok(Param {
                value: ck.tensor(&format!("param/{name}"))?.clone(),
                name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_params(config, kind, params).map_err(|e| match e {
        Error::Config(msg) => Error::Data(format!("checkpoint: {msg}")),
        other => other,
    })
}

/// Training view of a dataset: inputs in slot order.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub set: TrainSet,
    pub kind: SourceKind,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let set = dataset.train_set()?;
        if set.identities.len() < 2 {
            return Err(Error::Data(format!(
                "training needs at least 2 identities, found {}",
                set.identities.len()
            )));
        }
        Ok(TrainData {
            inputs: set.rows.iter().map(|&r| &dataset.inputs[r]).collect(),
            kind: dataset.source_kind()?,
            set,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stored_part(config: &TrainConfig, tape: &Tape, out: &crate::model::SampleOutput, part: usize) -> Vec<f64> {
    let v = match config.bank_source {
        BankSource::Head => out.features[part],
        BankSource::Pooled => out.pooled[part],
    };
    tape.value(v).data().to_vec()
}

impl TrainState {
    /// Fresh model from the run's seed; the bank, if any, is filled with the
    /// initial model's features of every training image.
    pub fn new(config: &TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model, data.kind, &mut rng_for(config.seed, 0))?;
        let velocities = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        let bank = if config.memory {
            let parts = config.model.parts();
            let mut bank = MemoryBank::new(
                data.set.labels.clone(),
                parts,
                config.model.channels,
                config.delta,
            )?;
            for (slot, input) in data.inputs.iter().enumerate() {
                let mut tape = Tape::new();
                let vars = model.register(&mut tape, false);
                let out = model.forward(&mut tape, &vars, input)?;
                for part in 0..parts {
                    bank.write(slot, part, &stored_part(config, &tape, &out, part))?;
                }
            }
            Some(bank)
        } else {
            None
        };
        Ok(TrainState {
            model,
            velocities,
            bank,
            epoch: 0,
            iteration: 0,
            log: Vec::new(),
            centers: None,
        })
    }

    pub fn to_checkpoint(&self, identities: &[String]) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.model);
        for (p, v) in self.model.params().iter().zip(&self.velocities) {
            ck.put_tensor(format!("velocity/{}", p.name), v.clone());
        }
        if let Some(bank) = &self.bank {
            ck.put_tensor(
                "bank/slots",
                Tensor::new(
                    vec![bank.len(), bank.parts(), bank.channels()],
                    bank.slots().to_vec(),
                )?,
            );
            let flags = bank.initialized_flags().iter().map(|&b| f64::from(u8::from(b))).collect();
            ck.put_tensor("bank/initialized", Tensor::new(vec![bank.len(), bank.parts()], flags)?);
            ck.put_text(
                "bank/settings",
                format!("delta={}\nnormalize={}\n", bank.delta(), bank.normalizes()),
            );
        }
        ck.put_tensor(
            "ids",
            Tensor::vector(self.labels_or_empty().iter().map(|&i| i as f64).collect()),
        );
        ck.put_text("identities", identities.join("\n"));
        ck.put_text("epoch", self.epoch.to_string());
        ck.put_text("iteration", self.iteration.to_string());
        ck.put_text("log", log_csv(&self.log)?);
        Ok(ck)
    }

    fn labels_or_empty(&self) -> Vec<usize> {
        self.bank.as_ref().map(|b| b.ids().to_vec()).unwrap_or_default()
    }

    /// Restores a state written by [`to_checkpoint`](Self::to_checkpoint)
    /// and checks it against the run's data.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig, data: &TrainData) -> Result<Self> {
        let model = load_model(ck)?;
        if *model.config() != config.model || model.kind() != data.kind {
            return Err(Error::Config("checkpoint model does not match the run configuration".into()));
        }
        let stored: Vec<&str> = ck.text("identities")?.split('\n').filter(|s| !s.is_empty()).collect();
        if stored != data.set.identities {
            return Err(Error::Data("checkpoint identities differ from the manifest".into()));
        }
        let velocities = model
            .params()
            .iter()
            .map(|p| ck.tensor(&format!("velocity/{}", p.name)).cloned())
            .collect::<Result<Vec<_>>>()?;
        let bank = match (config.memory, ck.get("bank/slots")) {
            (false, _) => None,
            (true, None) => return Err(Error::Config("checkpoint has no memory bank".into())),
            (true, Some(_)) => {
                let slots = ck.tensor("bank/slots")?;
                let flags = ck.tensor("bank/initialized")?;
                let settings = ck.text("bank/settings")?;
                let normalize = !settings.contains("normalize=false");
                Some(MemoryBank::from_raw(
                    data.set.labels.clone(),
                    config.model.parts(),
                    config.model.channels,
                    config.delta,
                    slots.data().to_vec(),
                    flags.data().iter().map(|&f| f != 0.0).collect(),
                    normalize,
                )?)
            }
        };
        let number = |name: &str| -> Result<usize> {
            ck.text(name)?
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint section `{name}` is not a count")))
        };
        Ok(TrainState {
            model,
            velocities,
            bank,
            epoch: number("epoch")?,
            iteration: number("iteration")?,
            log: parse_log(ck.text("log")?)?,
            centers: None,
        })
    }

    fn centers_for_batch(
        &mut self,
        config: &TrainConfig,
        batch: &BatchFeatures,
        tape: &Tape,
    ) -> Option<&ClassCenters> {
        let bank = self.bank.as_ref()?;
        let full = match config.center_refresh {
            CenterRefresh::Full => true,
            CenterRefresh::Lazy { interval } => self.centers.is_none() || self.iteration % interval == 0,
        };
        if full {
            self.centers = Some(bank.class_centers());
        } else {
            let cached = self.centers.as_mut().expect("filled above");
            let mut wanted: BTreeSet<usize> = batch.labels.iter().copied().collect();
            for (feats, &label) in batch.features.iter().zip(&batch.labels) {
                for (part, &f) in feats.iter().enumerate() {
                    let fv = tape.value(f).data();
                    let nearest = (0..cached.len())
                        .filter(|&r| cached.identities[r] != label && cached.has_part(r, part))
                        .min_by(|&a, &b| {
                            crate::losses::half_sq_l2_value(fv, cached.center(a, part))
                                .total_cmp(&crate::losses::half_sq_l2_value(fv, cached.center(b, part)))
                        });
                    if let Some(r) = nearest {
                        wanted.insert(cached.identities[r]);
                    }
                }
            }
            let ids: Vec<usize> = wanted.into_iter().collect();
            cached.refresh_from(&bank.centers_for(&ids));
        }
        self.centers.as_ref()
    }
}

fn log_csv(log: &[IterationLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if log.is_empty() {
        w.write_record(["epoch", "iteration", "lr", "tcl", "softmax", "combined", "skipped_terms"])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    for row in log {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn parse_log(text: &str) -> Result<Vec<IterationLog>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |e: &dyn std::fmt::Display| Error::Data(format!("checkpoint log: {e}"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(&"short row"));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|e| bad(&e)) };
        let count = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|e| bad(&e)) };
        out.push(IterationLog {
            epoch: count(0)?,
            iteration: count(1)?,
            lr: num(2)?,
            tcl: num(3)?,
            softmax: num(4)?,
            combined: num(5)?,
            skipped_terms: count(6)?,
            rejected: false,
        });
    }
    Ok(out)
}

fn zero_term(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Runs one epoch. Batches follow a shuffle seeded by the run's seed and
/// the epoch number.
pub fn train_epoch(state: &mut TrainState, config: &TrainConfig, data: &TrainData) -> Result<()> {
    let epoch = state.epoch + 1;
    let lr = config
        .schedule()
        .rate_at(epoch)
        .ok_or_else(|| Error::Config(format!("no learning rate for epoch {epoch}")))?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(config.seed, epoch as u64));
    state.centers = None;

    for chunk in order.chunks(config.batch_size) {
        let mut tape = Tape::new();
        let vars = state.model.register(&mut tape, true);
        let mut outputs = Vec::with_capacity(chunk.len());
        for &slot in chunk {
            outputs.push(state.model.forward(&mut tape, &vars, data.inputs[slot])?);
        }
        let batch = BatchFeatures {
            features: outputs.iter().map(|o| o.features.clone()).collect(),
            labels: chunk.iter().map(|&s| data.set.labels[s]).collect(),
            image_indices: chunk.to_vec(),
        };
        let parts = config.model.parts();
        let distinct: BTreeSet<usize> = batch.labels.iter().copied().collect();

        let centers = state.centers_for_batch(config, &batch, &tape).cloned();
        let mut skipped = 0;
        let metric = if distinct.len() < 2 {
            log::info!(
                "epoch {epoch} iteration {}: single-identity batch, metric term skipped",
                state.iteration + 1
            );
            skipped += batch.len() * parts;
            zero_term(&mut tape)
        } else {
            let term: LossTerm = match (config.loss_kind, &state.bank) {
                (LossKind::TripletCenter, Some(_)) => triplet_center_loss(
                    &mut tape,
                    &batch,
                    centers.as_ref().expect("bank present"),
                    config.loss.alpha,
                )?,
                (LossKind::TripletCenter, None) => {
                    let values: Vec<Vec<Vec<f64>>> = batch
                        .features
                        .iter()
                        .map(|fs| fs.iter().map(|&f| tape.value(f).data().to_vec()).collect())
                        .collect();
                    let in_batch =
                        ClassCenters::from_features(&batch.labels, &values, parts, config.model.channels);
                    triplet_center_loss(&mut tape, &batch, &in_batch, config.loss.alpha)?
                }
                (LossKind::Triplet, _) => batch_triplet_loss(&mut tape, &batch, config.loss.alpha)?,
            };
            skipped += term.skipped;
            term.value
        };
        let softmax = match &state.bank {
            Some(bank) => {
                let term = memory_softmax_loss(
                    &mut tape,
                    &batch,
                    bank,
                    centers.as_ref(),
                    config.loss.beta,
                    config.loss.softmax_target,
                )?;
                skipped += term.skipped;
                term.value
            }
            None => zero_term(&mut tape),
        };
        let total = combined_loss(&mut tape, metric, softmax, config.loss.lambda)?;

        state.iteration += 1;
        let mut row = IterationLog {
            epoch,
            iteration: state.iteration,
            lr,
            tcl: tape.value(metric).item(),
            softmax: tape.value(softmax).item(),
            combined: tape.value(total).item(),
            skipped_terms: skipped,
            rejected: false,
        };

        let mut grads = tape.backward(total, &Tensor::scalar(1.0))?;
        let grads: Vec<Tensor> = vars
            .0
            .iter()
            .zip(state.model.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        let mut values: Vec<Tensor> = state
            .model
            .params_mut()
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.value, Tensor::scalar(0.0)))
            .collect();
        let step = sgd_step(&mut values, &grads, &mut state.velocities, lr, config.momentum);
        for (p, v) in state.model.params_mut().iter_mut().zip(values) {
            p.value = v;
        }
        match step {
            Ok(()) => {
                if let Some(bank) = state.bank.as_mut() {
                    for (out, &slot) in outputs.iter().zip(chunk) {
                        for part in 0..parts {
                            bank.write(slot, part, &stored_part(config, &tape, out, part))?;
                        }
                    }
                }
            }
            Err(Error::Numeric(msg)) => {
                log::warn!("epoch {epoch} iteration {}: step rejected: {msg}", state.iteration);
                row.rejected = true;
            }
            Err(e) => return Err(e),
        }
        state.log.push(row);
    }
    state.epoch = epoch;
    Ok(())
}

/// Where [`train`] keeps its files.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub resume: bool,
}

impl OutputDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save(state: &TrainState, data: &TrainData, out: &OutputDir) -> Result<()> {
    state.to_checkpoint(&data.set.identities)?.write(&out.checkpoint())?;
    write_text(&out.metrics(), &log_csv(&state.log)?)
}

/// Full run. With an output directory a checkpoint and the iteration log are
/// written after every epoch (and once before the first), and `resume`
/// continues from an existing checkpoint there.
pub fn train(config: &TrainConfig, dataset: &Dataset, out: Option<&OutputDir>) -> Result<TrainState> {
    config.validate()?;
    let data = TrainData::new(dataset)?;
    let mut state = match out {
        Some(o) if o.resume && o.checkpoint().exists() => {
            let state = TrainState::from_checkpoint(&Checkpoint::read(&o.checkpoint())?, config, &data)?;
            log::info!("resuming after epoch {}", state.epoch);
            state
        }
        _ => {
            let state = TrainState::new(config, &data)?;
            if let Some(o) = out {
                save(&state, &data, o)?;
            }
            state
        }
    };
    if state.epoch > config.epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {}, beyond the configured {}",
            state.epoch, config.epochs
        )));
    }
    while state.epoch < config.epochs {
        train_epoch(&mut state, config, &data)?;
        if let Some(last) = state.log.last() {
            log::info!("epoch {} loss {:.6}", state.epoch, last.combined);
        }
        if let Some(o) = out {
            save(&state, &data, o)?;
        }
    }
    Ok(state)
}
