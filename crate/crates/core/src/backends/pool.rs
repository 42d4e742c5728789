use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub concept_id: String,
    pub name: String,
    #[serde(default)]
    pub task_index: usize,
}

impl Concept {
    pub fn new(concept_id: impl Into<String>, name: impl Into<String>, task_index: usize) -> Self {
        Self {
            concept_id: concept_id.into(),
            name: name.into(),
            task_index,
        }
    }
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("feature vector must have positive dimension"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "feature value at index {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        FeatureVector::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub sample_id: String,
    pub concept_id: String,
    pub generator_id: String,
    pub prompt_id: String,
    pub feature: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_ref: Option<String>,
}

/// The union of every generator's sample set, `U = U_1 ∪ … ∪ U_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub samples: Vec<GeneratedSample>,
    pub generator_ids: Vec<String>,
    pub dim: usize,
}

/// The specific pool predicate a validation pass found violated.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolViolation {
    NoGenerators,
    UnequalCounts(Vec<(String, usize)>),
    DimMismatch {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    DuplicateSampleId(String),
    UnknownGenerator {
        sample_id: String,
        generator_id: String,
    },
}

impl fmt::Display for PoolViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolViolation::NoGenerators => f.write_str("pool has no generators"),
            PoolViolation::UnequalCounts(counts) => {
                write!(f, "per-generator counts differ: {counts:?}")
            }
            PoolViolation::DimMismatch {
                sample_id,
                expected,
                got,
            } => write!(
                f,
                "sample {sample_id} has dim {got}, pool dim is {expected}"
            ),
            PoolViolation::DuplicateSampleId(id) => write!(f, "sample id {id} repeats"),
            PoolViolation::UnknownGenerator {
                sample_id,
                generator_id,
            } => write!(
                f,
                "sample {sample_id} names unknown generator {generator_id}"
            ),
        }
    }
}

impl From<PoolViolation> for Error {
    fn from(v: PoolViolation) -> Self {
        match v {
            PoolViolation::UnequalCounts(counts) => Error::PoolImbalance { counts },
            PoolViolation::DimMismatch { expected, got, .. } => Error::Dimension { expected, got },
            other => Error::InvalidArgument(other.to_string()),
        }
    }
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_by_generator(&self) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.generator_id.as_str()).or_default() += 1;
        }
        self.generator_ids
            .iter()
            .map(|g| (g.clone(), counts.get(g.as_str()).copied().unwrap_or(0)))
            .collect()
    }

    /// Size of one generator's share, `|U_i|`.
    pub fn per_generator_count(&self) -> usize {
        self.count_by_generator()
            .first()
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }

    /// Concept ids in first-appearance order.
    pub fn class_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.concept_id.as_str()))
            .map(|s| s.concept_id.clone())
            .collect()
    }

    /// Re-checks every pool invariant; returns the first violated predicate.
    pub fn validate(&self) -> std::result::Result<(), PoolViolation> {
        if self.generator_ids.is_empty() {
            return Err(PoolViolation::NoGenerators);
        }
        let known: HashSet<&str> = self.generator_ids.iter().map(String::as_str).collect();
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !known.contains(s.generator_id.as_str()) {
                return Err(PoolViolation::UnknownGenerator {
                    sample_id: s.sample_id.clone(),
                    generator_id: s.generator_id.clone(),
                });
            }
            if s.feature.dim() != self.dim {
                return Err(PoolViolation::DimMismatch {
                    sample_id: s.sample_id.clone(),
                    expected: self.dim,
                    got: s.feature.dim(),
                });
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(PoolViolation::DuplicateSampleId(s.sample_id.clone()));
            }
        }
        let counts = self.count_by_generator();
        if counts.windows(2).any(|w| w[0].1 != w[1].1) {
            return Err(PoolViolation::UnequalCounts(counts));
        }
        Ok(())
    }
}

/// Concatenates per-generator sample lists, in generator order, into a pool.
pub fn assemble_pool(per_generator: Vec<(String, Vec<GeneratedSample>)>) -> Result<CandidatePool> {
    if per_generator.is_empty() {
        return Err(invalid("at least one generator sample list is required"));
    }
    let counts: Vec<(String, usize)> = per_generator
        .iter()
        .map(|(g, s)| (g.clone(), s.len()))
        .collect();
    if counts.windows(2).any(|w| w[0].1 != w[1].1) {
        return Err(Error::PoolImbalance { counts });
    }
    let dim = per_generator
        .iter()
        .flat_map(|(_, s)| s.first())
        .map(|s| s.feature.dim())
        .next()
        .ok_or_else(|| invalid("generator sample lists are empty"))?;

    let generator_ids = counts.into_iter().map(|(g, _)| g).collect();
    let samples = per_generator.into_iter().flat_map(|(_, s)| s).collect();
    let pool = CandidatePool {
        samples,
        generator_ids,
        dim,
    };
    pool.validate()?;
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(generator: &str, i: usize, dim: usize) -> GeneratedSample {
        GeneratedSample {
            sample_id: format!("{generator}:c:{i}"),
            concept_id: "c".into(),
            generator_id: generator.into(),
            prompt_id: i.to_string(),
            feature: FeatureVector::new(vec![i as f64; dim]).unwrap(),
            payload_ref: None,
        }
    }

    fn list(generator: &str, n: usize) -> (String, Vec<GeneratedSample>) {
        (
            generator.into(),
            (0..n).map(|i| sample(generator, i, 3)).collect(),
        )
    }

    #[test]
    fn balanced_lists_concatenate_in_order() {
        let pool = assemble_pool(vec![list("a", 100), list("b", 100)]).unwrap();
        assert_eq!(pool.len(), 200);
        assert_eq!(pool.generator_ids, vec!["a", "b"]);
        assert_eq!(pool.samples[0].sample_id, "a:c:0");
        assert_eq!(pool.samples[99].sample_id, "a:c:99");
        assert_eq!(pool.samples[100].sample_id, "b:c:0");
        assert_eq!(pool.per_generator_count(), 100);
    }

    #[test]
    fn unequal_counts_are_rejected() {
        let err = assemble_pool(vec![list("a", 100), list("b", 99)]).unwrap_err();
        match err {
            Error::PoolImbalance { counts } => {
                assert_eq!(counts, vec![("a".to_string(), 100), ("b".to_string(), 99)])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_generator_is_identity() {
        let (g, s) = list("only", 7);
        let pool = assemble_pool(vec![(g, s.clone())]).unwrap();
        assert_eq!(pool.samples, s);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let (g, mut s) = list("a", 3);
        s[2] = sample("a", 2, 4);
        let err = assemble_pool(vec![(g, s)]).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 3,
                got: 4
            }
        ));
    }

    #[test]
    fn validate_names_the_violated_predicate() {
        let mut pool = assemble_pool(vec![list("a", 2), list("b", 2)]).unwrap();
        pool.samples[3].sample_id = pool.samples[0].sample_id.clone();
        assert_eq!(
            pool.validate(),
            Err(PoolViolation::DuplicateSampleId("a:c:0".into()))
        );
        pool.samples.pop();
        assert!(matches!(
            pool.validate(),
            Err(PoolViolation::UnequalCounts(_))
        ));
    }

    #[test]
    fn feature_vectors_reject_non_finite() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<FeatureVector>("[1.0, 2.0]").is_ok());
    }
}
