//! Embedding vectors and labeled collections of them.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// A speaker embedding with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Model("embedding must have dimension >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Model(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Scales the vector to unit Euclidean norm. A zero vector is returned unchanged.
    pub fn length_normalized(&self) -> Embedding {
        let norm = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Embedding(self.0.iter().map(|v| v / norm).collect())
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub utt_id: String,
    pub spk_id: String,
    pub domain_id: String,
    pub embedding: Embedding,
}

/// Embeddings tagged with utterance, speaker and domain ids.
///
/// Record order is preserved everywhere; grouping helpers return groups in
/// order of first appearance so that every reduction over a dataset is
/// reproducible bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    records: Vec<Record>,
}

impl LabeledDataset {
    pub fn new(dim: usize, records: Vec<Record>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Model("dataset dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.dim() != dim {
                return Err(Error::dim_mismatch(
                    &format!("utterance {}", r.utt_id),
                    dim,
                    r.embedding.dim(),
                ));
            }
            if r.utt_id.is_empty() || r.spk_id.is_empty() || r.domain_id.is_empty() {
                return Err(Error::Model(format!(
                    "record ids must be non-empty (utt '{}', spk '{}', domain '{}')",
                    r.utt_id, r.spk_id, r.domain_id
                )));
            }
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Model(format!("duplicate utterance id {}", r.utt_id)));
            }
        }
        Ok(LabeledDataset { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Record> {
        self.records.iter()
    }

    /// Speaker ids with the indices of their records, in first-appearance order.
    pub fn speaker_groups(&self) -> Vec<(&str, Vec<usize>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let slot = *index.entry(r.spk_id.as_str()).or_insert_with(|| {
                groups.push((r.spk_id.as_str(), Vec::new()));
                groups.len() - 1
            });
            groups[slot].1.push(i);
        }
        groups
    }

    /// Distinct speaker ids in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        self.speaker_groups().into_iter().map(|(s, _)| s).collect()
    }

    /// Distinct domain ids in first-appearance order.
    pub fn domains(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.domain_id.as_str())
            .filter(|d| seen.insert(*d))
            .collect()
    }

    /// Keeps the records matching `keep`, preserving order.
    pub fn filter<F: FnMut(&Record) -> bool>(&self, mut keep: F) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn with_speakers(&self, speakers: &HashSet<&str>) -> LabeledDataset {
        self.filter(|r| speakers.contains(r.spk_id.as_str()))
    }

    pub fn with_domain(&self, domain: &str) -> LabeledDataset {
        self.filter(|r| r.domain_id == domain)
    }

    /// Concatenates datasets of the same dimension; utterance ids must stay unique.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let dim = parts
            .first()
            .map(|d| d.dim)
            .ok_or_else(|| Error::Model("nothing to concatenate".into()))?;
        let records = parts
            .iter()
            .flat_map(|d| d.records.iter().cloned())
            .collect();
        LabeledDataset::new(dim, records)
    }

    pub fn length_normalized(&self) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            records: self
                .records
                .iter()
                .map(|r| Record {
                    embedding: r.embedding.length_normalized(),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Returns the same records with speaker ids rewritten by `relabel`.
    pub fn relabeled<F: FnMut(&Record) -> String>(&self, mut relabel: F) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            records: self
                .records
                .iter()
                .map(|r| Record {
                    spk_id: relabel(r),
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(dim: usize, records: Vec<Record>) -> LabeledDataset {
        LabeledDataset { dim, records }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(utt: &str, spk: &str, v: &[f64]) -> Record {
        Record {
            utt_id: utt.into(),
            spk_id: spk.into(),
            domain_id: "A".into(),
            embedding: Embedding::new(v.to_vec()).unwrap(),
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_duplicates_and_dim_mismatch() {
        let dup = vec![rec("u1", "s", &[0.0]), rec("u1", "t", &[1.0])];
        assert!(LabeledDataset::new(1, dup).is_err());
        let mixed = vec![rec("u1", "s", &[0.0]), rec("u2", "t", &[1.0, 2.0])];
        assert!(LabeledDataset::new(1, mixed).is_err());
    }

    #[test]
    fn groups_follow_first_appearance() {
        let ds = LabeledDataset::new(
            1,
            vec![
                rec("u1", "b", &[0.0]),
                rec("u2", "a", &[1.0]),
                rec("u3", "b", &[2.0]),
            ],
        )
        .unwrap();
        let groups = ds.speaker_groups();
        assert_eq!(groups, vec![("b", vec![0, 2]), ("a", vec![1])]);
    }

    #[test]
    fn length_normalization_is_unit_norm() {
        let e = Embedding::new(vec![3.0, 4.0]).unwrap().length_normalized();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }
}
