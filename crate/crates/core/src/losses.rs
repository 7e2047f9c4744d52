//! Training objectives, built on the tape so that gradients are exact.
//!
//! All per-part terms are summed over parts and averaged over the batch.
//! Memory slots and class centers enter as constants: gradients reach the
//! head features only.

use crate::error::{Error, Result};
use crate::memory::{check_beta, ClassCenters, MemoryBank};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxTarget {
    /// Softmax over every initialized image slot; the target is the sample's
    /// own slot.
    Instance,
    /// Softmax over class centers; the target is the sample's own class.
    Class,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub softmax_target: SoftmaxTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            alpha: 1.0,
            beta: 0.05,
            softmax_target: SoftmaxTarget::Class,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_beta(self.beta)
    }
}

/// Head features of one batch, `features[sample][part]`, on a shared tape.
#[derive(Clone, Debug)]
pub struct BatchFeatures {
    pub features: Vec<Vec<Var>>,
    pub labels: Vec<usize>,
    pub image_indices: Vec<usize>,
}

impl BatchFeatures {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn parts(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        if self.labels.len() != self.len() || self.image_indices.len() != self.len() {
            return Err(Error::Data("batch labels, indices and features disagree in length".into()));
        }
        if self.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(())
    }
}

/// A scalar loss node plus the number of sample-part terms left out.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub skipped: usize,
}

/// `0.5 * |f - c|^2`
pub fn half_sq_l2(tape: &mut Tape, f: Var, c: Var) -> Result<Var> {
    let d = tape.sub(f, c)?;
    let sq = tape.dot(d, d)?;
    Ok(tape.scale(sq, 0.5))
}

pub fn half_sq_l2_value(f: &[f64], c: &[f64]) -> f64 {
    0.5 * f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn hinge(tape: &mut Tape, pos: Var, neg: Var, alpha: f64) -> Result<Var> {
    let diff = tape.sub(pos, neg)?;
    let margin = tape.constant(Tensor::scalar(alpha));
    let shifted = tape.add(diff, margin)?;
    Ok(tape.relu(shifted))
}

fn batch_mean(tape: &mut Tape, terms: &[Var], batch: usize) -> Result<Var> {
    let total = tape.sum_scalars(terms)?;
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// `max(d(f, c_own) + alpha - min_{other identities} d(f, c_other), 0)` per
/// sample and part.
pub fn triplet_center_loss(
    tape: &mut Tape,
    batch: &BatchFeatures,
    centers: &ClassCenters,
    alpha: f64,
) -> Result<LossTerm> {
    batch.check()?;
    if centers.len() < 2 {
        return Err(Error::Data(format!(
            "triplet-center loss needs at least 2 identities with centers, have {}",
            centers.len()
        )));
    }
    let mut terms = Vec::new();
    let mut skipped = 0;
    for (feats, &label) in batch.features.iter().zip(&batch.labels) {
        let own = centers
            .row_of(label)
            .ok_or_else(|| Error::Data(format!("identity {label} has no class center")))?;
        for (part, &f) in feats.iter().enumerate() {
            if !centers.has_part(own, part) {
                skipped += 1;
                continue;
            }
            let fv = tape.value(f).data().to_vec();
            let nearest = (0..centers.len())
                .filter(|&r| r != own && centers.has_part(r, part))
                .map(|r| (r, half_sq_l2_value(&fv, centers.center(r, part))))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let Some((neg, _)) = nearest else {
                skipped += 1;
                continue;
            };
            let cpos = tape.constant(Tensor::vector(centers.center(own, part).to_vec()));
            let cneg = tape.constant(Tensor::vector(centers.center(neg, part).to_vec()));
            let dpos = half_sq_l2(tape, f, cpos)?;
            let dneg = half_sq_l2(tape, f, cneg)?;
            terms.push(hinge(tape, dpos, dneg, alpha)?);
        }
    }
    Ok(LossTerm {
        value: batch_mean(tape, &terms, batch.len())?,
        skipped,
    })
}

/// `-log softmax(V f / beta)[target]` per sample and part, against memory
/// slots (instance target) or class centers (class target).
pub fn memory_softmax_loss(
    tape: &mut Tape,
    batch: &BatchFeatures,
    bank: &MemoryBank,
    centers: Option<&ClassCenters>,
    beta: f64,
    target: SoftmaxTarget,
) -> Result<LossTerm> {
    batch.check()?;
    check_beta(beta)?;
    let parts = batch.parts();
    if parts != bank.parts() {
        return Err(Error::shape("memory_softmax_loss", &[&[parts], &[bank.parts()]]));
    }
    let c = bank.channels();
    let mut terms = Vec::new();
    let mut skipped = 0;
    for part in 0..parts {
        // Constant score matrix for this part and the row of each candidate.
        let (rows, data, row_of): (usize, Vec<f64>, Box<dyn Fn(usize, usize) -> Option<usize>>) =
            match target {
                SoftmaxTarget::Instance => {
                    let mut data = Vec::new();
                    let mut map = vec![None; bank.len()];
                    let mut n = 0;
                    for img in 0..bank.len() {
                        if bank.is_initialized(img, part) {
                            data.extend_from_slice(bank.slot(img, part));
                            map[img] = Some(n);
                            n += 1;
                        }
                    }
                    (n, data, Box::new(move |img, _| map.get(img).copied().flatten()))
                }
                SoftmaxTarget::Class => {
                    let centers = centers.ok_or_else(|| {
                        Error::Config("class-level softmax needs class centers".into())
                    })?;
                    let mut data = Vec::new();
                    let mut map = std::collections::HashMap::new();
                    let mut n = 0;
                    for r in 0..centers.len() {
                        if centers.has_part(r, part) {
                            data.extend_from_slice(centers.center(r, part));
                            map.insert(centers.identities[r], n);
                            n += 1;
                        }
                    }
                    (n, data, Box::new(move |_, id| map.get(&id).copied()))
                }
            };
        if rows == 0 {
            skipped += batch.len();
            continue;
        }
        let matrix = tape.constant(Tensor::new(vec![rows, c], data)?);
        for (s, feats) in batch.features.iter().enumerate() {
            let Some(t) = row_of(batch.image_indices[s], batch.labels[s]) else {
                skipped += 1;
                continue;
            };
            let scores = tape.matmul(matrix, feats[part])?;
            let logits = tape.scale(scores, 1.0 / beta);
            terms.push(tape.cross_entropy(logits, t)?);
        }
    }
    Ok(LossTerm {
        value: batch_mean(tape, &terms, batch.len())?,
        skipped,
    })
}

/// `lambda * tcl + softmax`
pub fn combined_loss(tape: &mut Tape, tcl: Var, softmax: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(tcl, lambda);
    tape.add(weighted, softmax)
}

/// Triplet hinge inside the batch: mean distance to same-identity batch
/// members against the nearest other-identity member. Both sides carry
/// gradient.
pub fn batch_triplet_loss(tape: &mut Tape, batch: &BatchFeatures, alpha: f64) -> Result<LossTerm> {
    batch.check()?;
    let parts = batch.parts();
    let mut terms = Vec::new();
    let mut skipped = 0;
    for part in 0..parts {
        let values: Vec<Vec<f64>> = batch
            .features
            .iter()
            .map(|f| tape.value(f[part]).data().to_vec())
            .collect();
        for i in 0..batch.len() {
            let positives: Vec<usize> = (0..batch.len())
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .collect();
            let nearest = (0..batch.len())
                .filter(|&j| batch.labels[j] != batch.labels[i])
                .map(|j| (j, half_sq_l2_value(&values[i], &values[j])))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let (Some((neg, _)), false) = (nearest, positives.is_empty()) else {
                skipped += 1;
                continue;
            };
            let f = batch.features[i][part];
            let mut pos_terms = Vec::with_capacity(positives.len());
            for &j in &positives {
                pos_terms.push(half_sq_l2(tape, f, batch.features[j][part])?);
            }
            let pos_sum = tape.sum_scalars(&pos_terms)?;
            let dpos = tape.scale(pos_sum, 1.0 / positives.len() as f64);
            let dneg = half_sq_l2(tape, f, batch.features[neg][part])?;
            terms.push(hinge(tape, dpos, dneg, alpha)?);
        }
    }
    Ok(LossTerm {
        value: batch_mean(tape, &terms, batch.len())?,
        skipped,
    })
}
