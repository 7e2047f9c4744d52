//! In-memory view of a manifest and its feature files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{load_manifest, read_feature_file, resolve_source, SampleRecord, Split};
use crate::model::SourceKind;
use crate::synth::SyntheticData;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub inputs: Vec<Tensor>,
}

/// Training images with dense identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    /// Dataset rows of the training images; position = memory slot.
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    /// Identity name of each label, sorted.
    pub identities: Vec<String>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let inputs = records
            .iter()
            .map(|r| read_feature_file(&resolve_source(manifest, &r.source)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, inputs)
    }

    pub fn new(records: Vec<SampleRecord>, inputs: Vec<Tensor>) -> Result<Self> {
        if records.len() != inputs.len() {
            return Err(Error::Data("records and inputs differ in length".into()));
        }
        if records.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        Ok(Dataset { records, inputs })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rank-1 inputs feed the toy backbone; rank-3/4 inputs are maps.
    pub fn source_kind(&self) -> Result<SourceKind> {
        let kind_of = |t: &Tensor| match t.rank() {
            1 => Some(SourceKind::Toy),
            3 | 4 => Some(SourceKind::Precomputed),
            _ => None,
        };
        let first = kind_of(&self.inputs[0])
            .ok_or_else(|| Error::Data(format!("unsupported input rank {}", self.inputs[0].rank())))?;
        for (r, t) in self.records.iter().zip(&self.inputs) {
            if kind_of(t) != Some(first) || t.shape() != self.inputs[0].shape() {
                return Err(Error::Data(format!(
                    "sample `{}` has shape {:?}, expected {:?}",
                    r.sample_id,
                    t.shape(),
                    self.inputs[0].shape()
                )));
            }
        }
        Ok(first)
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn train_set(&self) -> Result<TrainSet> {
        let rows = self.rows(Split::Train);
        if rows.is_empty() {
            return Err(Error::Data("manifest has no training samples".into()));
        }
        let names: BTreeMap<&str, usize> = rows
            .iter()
            .map(|&i| (self.records[i].identity.as_str(), 0))
            .collect();
        let identities: Vec<String> = names.keys().map(|s| s.to_string()).collect();
        let labels = rows
            .iter()
            .map(|&i| {
                identities
                    .binary_search(&self.records[i].identity)
                    .expect("collected above")
            })
            .collect();
        Ok(TrainSet {
            rows,
            labels,
            identities,
        })
    }
}

impl From<SyntheticData> for Dataset {
    fn from(data: SyntheticData) -> Self {
        Dataset {
            records: data.records,
            inputs: data.vectors,
        }
    }
}
