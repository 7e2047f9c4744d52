//! Exemplar memory: one slot per training image per part, blended toward new
//! features by an exponential moving average. Class centers are group means
//! over the slots and are always recomputed from scratch.

use crate::error::{Error, Result};
use crate::tensor::{dot, normalized};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: Vec<f64>,
    ids: Vec<usize>,
    initialized: Vec<bool>,
    parts: usize,
    channels: usize,
    delta: f64,
    normalize: bool,
}

impl MemoryBank {
    /// A bank with one uninitialized slot per (image, part). `ids[i]` is the
    /// identity index of training image `i`.
    pub fn new(ids: Vec<usize>, parts: usize, channels: usize, delta: f64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("memory bank needs at least one training image".into()));
        }
        if parts == 0 || channels == 0 {
            return Err(Error::Config("memory slots need positive part and channel counts".into()));
        }
        check_delta(delta)?;
        let m = ids.len();
        Ok(MemoryBank {
            slots: vec![0.0; m * parts * channels],
            ids,
            initialized: vec![false; m * parts],
            parts,
            channels,
            delta,
            normalize: true,
        })
    }

    /// Disables the post-blend L2 normalization.
    pub fn without_normalization(mut self) -> Self {
        self.normalize = false;
        self
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn slot(&self, image: usize, part: usize) -> &[f64] {
        let base = (image * self.parts + part) * self.channels;
        &self.slots[base..base + self.channels]
    }

    pub fn is_initialized(&self, image: usize, part: usize) -> bool {
        self.initialized[image * self.parts + part]
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    /// Raw `M x parts x C` slot array.
    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    /// Rebuilds a bank from serialized parts.
    pub fn from_raw(
        ids: Vec<usize>,
        parts: usize,
        channels: usize,
        delta: f64,
        slots: Vec<f64>,
        initialized: Vec<bool>,
        normalize: bool,
    ) -> Result<Self> {
        let mut bank = MemoryBank::new(ids, parts, channels, delta)?;
        if slots.len() != bank.slots.len() || initialized.len() != bank.initialized.len() {
            return Err(Error::Data("memory bank payload does not match its header".into()));
        }
        if slots.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("memory bank holds non-finite values".into()));
        }
        bank.slots = slots;
        bank.initialized = initialized;
        bank.normalize = normalize;
        Ok(bank)
    }

    /// Writes `h` into slot `(image, part)` using the bank's own rate.
    pub fn write(&mut self, image: usize, part: usize, h: &[f64]) -> Result<Vec<f64>> {
        let delta = self.delta;
        self.update(image, part, h, delta)
    }

    /// `V <- delta * V + (1 - delta) * h`, then normalized. An uninitialized
    /// slot takes `h` directly and `delta = 1` leaves an initialized slot
    /// untouched. Returns the blended vector before normalization.
    pub fn update(&mut self, image: usize, part: usize, h: &[f64], delta: f64) -> Result<Vec<f64>> {
        check_delta(delta)?;
        if image >= self.len() || part >= self.parts {
            return Err(Error::Data(format!(
                "slot ({image}, {part}) outside a {}x{} bank",
                self.len(),
                self.parts
            )));
        }
        if h.len() != self.channels {
            return Err(Error::shape("memory update", &[&[h.len()], &[self.channels]]));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature written to slot ({image}, {part})")));
        }
        let flag = image * self.parts + part;
        let base = flag * self.channels;
        let slot = &mut self.slots[base..base + self.channels];
        let blended: Vec<f64> = if self.initialized[flag] {
            slot.iter()
                .zip(h)
                .map(|(v, x)| delta * v + (1.0 - delta) * x)
                .collect()
        } else {
            h.to_vec()
        };
        if self.initialized[flag] && delta == 1.0 {
            return Ok(blended);
        }
        let stored = if self.normalize {
            normalized(&blended)
        } else {
            blended.clone()
        };
        slot.copy_from_slice(&stored);
        self.initialized[flag] = true;
        Ok(blended)
    }

    /// Per-identity, per-part mean of initialized slots. Identities without
    /// any initialized slot are left out.
    pub fn class_centers(&self) -> ClassCenters {
        let num_ids = self.ids.iter().copied().max().map_or(0, |m| m + 1);
        self.centers_for(&(0..num_ids).collect::<Vec<_>>())
    }

    /// Same as [`class_centers`](Self::class_centers) restricted to
    /// `identities`.
    pub fn centers_for(&self, identities: &[usize]) -> ClassCenters {
        let (p, c) = (self.parts, self.channels);
        let mut index = std::collections::HashMap::new();
        for (k, &id) in identities.iter().enumerate() {
            index.entry(id).or_insert(k);
        }
        let r = identities.len();
        let mut sums = vec![0.0; r * p * c];
        let mut part_counts = vec![0usize; r * p];
        let mut counts = vec![0usize; r];
        for (img, id) in self.ids.iter().enumerate() {
            let Some(&k) = index.get(id) else { continue };
            let mut any = false;
            for part in 0..p {
                if !self.is_initialized(img, part) {
                    continue;
                }
                any = true;
                part_counts[k * p + part] += 1;
                let dst = &mut sums[(k * p + part) * c..(k * p + part + 1) * c];
                for (d, v) in dst.iter_mut().zip(self.slot(img, part)) {
                    *d += v;
                }
            }
            if any {
                counts[k] += 1;
            }
        }

        let mut out = ClassCenters {
            identities: Vec::new(),
            centers: Vec::new(),
            counts: Vec::new(),
            part_counts: Vec::new(),
            parts: p,
            channels: c,
        };
        for (k, &id) in identities.iter().enumerate() {
            if counts[k] == 0 || index[&id] != k {
                continue;
            }
            out.identities.push(id);
            out.counts.push(counts[k]);
            for part in 0..p {
                let n = part_counts[k * p + part];
                out.part_counts.push(n);
                let src = &sums[(k * p + part) * c..(k * p + part + 1) * c];
                if n == 0 {
                    out.centers.extend(std::iter::repeat_n(0.0, c));
                } else {
                    out.centers.extend(src.iter().map(|v| v / n as f64));
                }
            }
        }
        out
    }

    /// `score_i = V[i, part] . f / beta`; uninitialized slots score `-inf`
    /// so that they vanish from any softmax.
    pub fn similarity_scores(&self, f: &[f64], part: usize, beta: f64) -> Result<Vec<f64>> {
        check_beta(beta)?;
        if part >= self.parts || f.len() != self.channels {
            return Err(Error::shape(
                "similarity_scores",
                &[&[part, f.len()], &[self.parts, self.channels]],
            ));
        }
        Ok((0..self.len())
            .map(|i| {
                if self.is_initialized(i, part) {
                    dot(self.slot(i, part), f) / beta
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("memory rate delta must lie in [0,1], got {delta}")));
    }
    Ok(())
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("temperature beta must lie in (0,1], got {beta}")));
    }
    Ok(())
}

/// Per-identity part centers derived from a [`MemoryBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    /// Identity index of each row.
    pub identities: Vec<usize>,
    /// `R x parts x C`
    pub centers: Vec<f64>,
    /// Images with at least one initialized slot, per identity.
    pub counts: Vec<usize>,
    /// Initialized slots per (identity, part).
    pub part_counts: Vec<usize>,
    pub parts: usize,
    pub channels: usize,
}

impl ClassCenters {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn center(&self, row: usize, part: usize) -> &[f64] {
        let base = (row * self.parts + part) * self.channels;
        &self.centers[base..base + self.channels]
    }

    /// Whether `(row, part)` averages at least one slot.
    pub fn has_part(&self, row: usize, part: usize) -> bool {
        self.part_counts[row * self.parts + part] > 0
    }

    pub fn row_of(&self, identity: usize) -> Option<usize> {
        self.identities.iter().position(|&i| i == identity)
    }

    /// Builds centers directly from labelled part vectors. Used for in-batch
    /// centers when no memory is configured.
    pub fn from_features(labels: &[usize], features: &[Vec<Vec<f64>>], parts: usize, channels: usize) -> Self {
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut out = ClassCenters {
            identities: ids.clone(),
            centers: vec![0.0; ids.len() * parts * channels],
            counts: vec![0; ids.len()],
            part_counts: vec![0; ids.len() * parts],
            parts,
            channels,
        };
        for (label, feats) in labels.iter().zip(features) {
            let row = ids.binary_search(label).expect("label collected above");
            out.counts[row] += 1;
            for (part, f) in feats.iter().enumerate() {
                out.part_counts[row * parts + part] += 1;
                let base = (row * parts + part) * channels;
                for (d, v) in out.centers[base..base + channels].iter_mut().zip(f) {
                    *d += v;
                }
            }
        }
        for row in 0..ids.len() {
            for part in 0..parts {
                let n = out.part_counts[row * parts + part] as f64;
                if n > 0.0 {
                    let base = (row * parts + part) * channels;
                    for d in &mut out.centers[base..base + channels] {
                        *d /= n;
                    }
                }
            }
        }
        out
    }

    /// Replaces the rows of `fresh`'s identities with its values, appending
    /// identities not yet present.
    pub fn refresh_from(&mut self, fresh: &ClassCenters) {
        let block = self.parts * self.channels;
        for (k, &id) in fresh.identities.iter().enumerate() {
            let src = &fresh.centers[k * block..(k + 1) * block];
            let pc = &fresh.part_counts[k * self.parts..(k + 1) * self.parts];
            match self.row_of(id) {
                Some(row) => {
                    self.centers[row * block..(row + 1) * block].copy_from_slice(src);
                    self.part_counts[row * self.parts..(row + 1) * self.parts].copy_from_slice(pc);
                    self.counts[row] = fresh.counts[k];
                }
                None => {
                    self.identities.push(id);
                    self.centers.extend_from_slice(src);
                    self.part_counts.extend_from_slice(pc);
                    self.counts.push(fresh.counts[k]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_bank_shape() {
        let bank = MemoryBank::new(vec![0; 100], 12, 64, 0.5).unwrap();
        assert_eq!(bank.slots().len(), 100 * 12 * 64);
        assert_eq!(bank.initialized_count(), 0);
        assert!(MemoryBank::new(vec![], 12, 64, 0.5).is_err());
    }

    #[test]
    fn ids_are_preserved() {
        let bank = MemoryBank::new(vec![3, 1, 2], 1, 2, 0.5).unwrap();
        assert_eq!(bank.ids(), &[3, 1, 2]);
    }

    #[test]
    fn first_write_stores_normalized_input() {
        let mut bank = MemoryBank::new(vec![0], 1, 2, 0.5).unwrap();
        bank.write(0, 0, &[3.0, 4.0]).unwrap();
        assert_eq!(bank.slot(0, 0), &[0.6, 0.8]);
    }

    #[test]
    fn blend_at_half() {
        let mut bank = MemoryBank::new(vec![0], 1, 2, 0.5).unwrap();
        bank.write(0, 0, &[1.0, 0.0]).unwrap();
        let pre = bank.update(0, 0, &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(pre, vec![0.5, 0.5]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.slot(0, 0)[0] - s).abs() < 1e-15);
        assert!((bank.slot(0, 0)[1] - s).abs() < 1e-15);
    }

    #[test]
    fn rate_endpoints() {
        let mut bank = MemoryBank::new(vec![0], 1, 2, 0.5).unwrap();
        bank.write(0, 0, &[1.0, 0.0]).unwrap();
        bank.update(0, 0, &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(bank.slot(0, 0), &[1.0, 0.0]);
        bank.update(0, 0, &[0.0, 2.0], 0.0).unwrap();
        assert_eq!(bank.slot(0, 0), &[0.0, 1.0]);
    }

    #[test]
    fn update_validation() {
        let mut bank = MemoryBank::new(vec![0], 1, 2, 0.5).unwrap();
        assert!(bank.update(1, 0, &[1.0, 0.0], 0.5).is_err());
        assert!(bank.update(0, 1, &[1.0, 0.0], 0.5).is_err());
        assert!(bank.update(0, 0, &[1.0, 0.0], 1.5).is_err());
        assert!(bank.update(0, 0, &[f64::NAN, 0.0], 0.5).is_err());
        assert!(bank.update(0, 0, &[1.0], 0.5).is_err());
    }

    #[test]
    fn centers_are_group_means() {
        let mut bank = MemoryBank::new(vec![0, 0, 1], 1, 2, 0.5).unwrap().without_normalization();
        bank.write(0, 0, &[1.0, 0.0]).unwrap();
        bank.write(1, 0, &[0.0, 1.0]).unwrap();
        bank.write(2, 0, &[3.0, 3.0]).unwrap();
        let c = bank.class_centers();
        assert_eq!(c.identities, vec![0, 1]);
        assert_eq!(c.counts, vec![2, 1]);
        assert_eq!(c.center(0, 0), &[0.5, 0.5]);
        assert_eq!(c.center(1, 0), &[3.0, 3.0]);
    }

    #[test]
    fn identities_without_slots_are_excluded() {
        let mut bank = MemoryBank::new(vec![0, 1], 1, 2, 0.5).unwrap();
        bank.write(1, 0, &[1.0, 0.0]).unwrap();
        let c = bank.class_centers();
        assert_eq!(c.identities, vec![1]);
    }

    #[test]
    fn scores() {
        let mut bank = MemoryBank::new(vec![0, 1, 2], 1, 2, 0.5).unwrap();
        bank.write(0, 0, &[1.0, 0.0]).unwrap();
        bank.write(1, 0, &[0.0, 1.0]).unwrap();
        let s = bank.similarity_scores(&[1.0, 0.0], 0, 1.0).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], f64::NEG_INFINITY);
        let hot = bank.similarity_scores(&[0.3, 0.4], 0, 0.1).unwrap();
        let cold = bank.similarity_scores(&[0.3, 0.4], 0, 1.0).unwrap();
        assert!((hot[0] - 10.0 * cold[0]).abs() < 1e-12);
        assert!(bank.similarity_scores(&[1.0, 0.0], 0, 0.0).is_err());
    }

    #[test]
    fn refresh_replaces_rows() {
        let mut bank = MemoryBank::new(vec![0, 1], 1, 1, 0.0).unwrap().without_normalization();
        bank.write(0, 0, &[1.0]).unwrap();
        bank.write(1, 0, &[2.0]).unwrap();
        let mut cache = bank.class_centers();
        bank.write(1, 0, &[5.0]).unwrap();
        cache.refresh_from(&bank.centers_for(&[1]));
        assert_eq!(cache, bank.class_centers());
    }
}
