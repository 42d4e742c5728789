//! Class-wise and class-agnostic Gaussian statistics and the relative
//! Mahalanobis distance (RMD) built on them.
//!
//! Means and covariances are maintained with the moving-average recurrences
//!
//! ```text
//! μ' = (N·μ + x) / (N + 1)
//! Σ' = (N·Σ + Δ·Δ'ᵀ) / (N + 1),   Δ = x − μ,  Δ' = x − μ'
//! ```
//!
//! which reproduce the population (divide-by-N) estimates exactly. The
//! class-wise distance uses the unweighted average of the per-class
//! covariances; the class-agnostic distance uses the covariance of all samples.
//! Scores are `rmd = m_cls − m_agn` with both terms squared distances, so a
//! sample far from its class but close to the global mean scores high.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{CandidatePool, FeatureVector, GeneratedSample};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_RIDGE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub count: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let x = DVector::from_column_slice(x);
        let n = self.count as f64;
        let delta = &x - &self.mean;
        let mean_new = (&self.mean * n + &x) / (n + 1.0);
        let delta_new = &x - &mean_new;
        self.cov = (&self.cov * n + &delta * delta_new.transpose()) / (n + 1.0);
        self.mean = mean_new;
        self.count += 1;
        Ok(())
    }
}

/// Functional form of [`RunningStats::update`].
pub fn stats_update(mut stats: RunningStats, x: &FeatureVector) -> Result<RunningStats> {
    stats.update(x.as_slice())?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRegistry {
    pub per_class: BTreeMap<String, RunningStats>,
    pub agnostic: RunningStats,
    pub dim: usize,
    pub ridge_epsilon: f64,
}

impl StatsRegistry {
    pub fn new(dim: usize, ridge_epsilon: f64) -> Self {
        Self {
            per_class: BTreeMap::new(),
            agnostic: RunningStats::new(dim),
            dim,
            ridge_epsilon,
        }
    }

    pub fn update(&mut self, class_id: &str, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.per_class
            .entry(class_id.to_string())
            .or_insert_with(|| RunningStats::new(self.dim))
            .update(x)?;
        self.agnostic.update(x)
    }

    pub fn update_samples<'a>(
        &mut self,
        samples: impl IntoIterator<Item = &'a GeneratedSample>,
    ) -> Result<()> {
        for s in samples {
            self.update(&s.concept_id, s.feature.as_slice())?;
        }
        Ok(())
    }

    /// Elementwise mean of the per-class covariances over classes with at
    /// least two samples.
    pub fn shared_class_covariance(&self) -> Result<DMatrix<f64>> {
        let eligible: Vec<&RunningStats> =
            self.per_class.values().filter(|s| s.count >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::DegenerateStatistics(
                "no class has two or more samples".into(),
            ));
        }
        let mut sum = DMatrix::zeros(self.dim, self.dim);
        for s in &eligible {
            sum += &s.cov;
        }
        Ok(sum / eligible.len() as f64)
    }
}

/// Folds every `(class, feature)` pair into a fresh registry, in input order.
pub fn batch_stats<'a, I>(samples: I) -> Result<StatsRegistry>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let mut iter = samples.into_iter().peekable();
    let dim = iter
        .peek()
        .map(|(_, f)| f.dim())
        .ok_or_else(|| invalid("cannot build statistics from no samples"))?;
    let mut registry = StatsRegistry::new(dim, DEFAULT_RIDGE_EPSILON);
    for (class, feature) in iter {
        registry.update(class, feature.as_slice())?;
    }
    Ok(registry)
}

pub fn pool_stats(pool: &CandidatePool) -> Result<StatsRegistry> {
    batch_stats(
        pool.samples
            .iter()
            .map(|s| (s.concept_id.as_str(), &s.feature)),
    )
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    let tol = 1e-9 * scale;
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// `(Σ + ε·tr(Σ)/d·I)⁻¹`, or `(Σ + ε·I)⁻¹` when the trace vanishes.
pub fn regularized_inverse(sigma: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if d == 0 || sigma.ncols() != d {
        return Err(invalid(format!(
            "covariance must be square and non-empty, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(invalid(format!(
            "ridge epsilon must be positive, got {epsilon}"
        )));
    }
    if !is_symmetric(sigma) {
        return Err(invalid("covariance is not symmetric"));
    }
    let trace = sigma.trace();
    let ridge = if trace > 0.0 {
        epsilon * trace / d as f64
    } else {
        epsilon
    };
    let regularized = sigma + DMatrix::identity(d, d) * ridge;
    let inverse = match regularized.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => regularized.try_inverse().ok_or_else(|| {
            Error::DegenerateStatistics("regularized covariance is singular".into())
        })?,
    };
    Ok((&inverse + inverse.transpose()) * 0.5)
}

/// `(x − μ)ᵀ Σ⁻¹ (x − μ)`, with rounding-level negatives clamped to zero.
pub fn mahalanobis_sq(x: &[f64], mean: &DVector<f64>, sigma_inv: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || sigma_inv.nrows() != mean.len() || sigma_inv.ncols() != mean.len() {
        return Err(Error::Dimension {
            expected: mean.len(),
            got: x.len(),
        });
    }
    let diff = DVector::from_column_slice(x) - mean;
    let q = diff.dot(&(sigma_inv * &diff));
    Ok(if q < 0.0 && q > -1e-9 { 0.0 } else { q })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmdScore {
    pub sample_id: String,
    pub class_id: String,
    pub m_cls: f64,
    pub m_agn: f64,
    pub rmd: f64,
}

/// Frozen snapshot of a registry with both inverses precomputed.
#[derive(Debug, Clone)]
pub struct RmdScorer {
    class_means: BTreeMap<String, DVector<f64>>,
    shared_inv: DMatrix<f64>,
    agnostic_mean: DVector<f64>,
    agnostic_inv: DMatrix<f64>,
}

impl RmdScorer {
    pub fn new(registry: &StatsRegistry) -> Result<Self> {
        if registry.agnostic.count < 2 {
            return Err(Error::DegenerateStatistics(format!(
                "class-agnostic statistics hold {} sample(s)",
                registry.agnostic.count
            )));
        }
        let shared = registry.shared_class_covariance()?;
        Ok(Self {
            class_means: registry
                .per_class
                .iter()
                .map(|(c, s)| (c.clone(), s.mean.clone()))
                .collect(),
            shared_inv: regularized_inverse(&shared, registry.ridge_epsilon)?,
            agnostic_mean: registry.agnostic.mean.clone(),
            agnostic_inv: regularized_inverse(&registry.agnostic.cov, registry.ridge_epsilon)?,
        })
    }

    pub fn score(&self, sample_id: &str, class_id: &str, x: &[f64]) -> Result<RmdScore> {
        let class_mean = self
            .class_means
            .get(class_id)
            .ok_or_else(|| Error::MissingClass(class_id.to_string()))?;
        let m_cls = mahalanobis_sq(x, class_mean, &self.shared_inv)?;
        let m_agn = mahalanobis_sq(x, &self.agnostic_mean, &self.agnostic_inv)?;
        Ok(RmdScore {
            sample_id: sample_id.to_string(),
            class_id: class_id.to_string(),
            m_cls,
            m_agn,
            rmd: m_cls - m_agn,
        })
    }

    pub fn score_sample(&self, sample: &GeneratedSample) -> Result<RmdScore> {
        self.score(
            &sample.sample_id,
            &sample.concept_id,
            sample.feature.as_slice(),
        )
    }

    /// Scores every pool sample; output follows pool order.
    pub fn score_pool(&self, pool: &CandidatePool) -> Result<Vec<RmdScore>> {
        pool.samples
            .par_iter()
            .map(|s| self.score_sample(s))
            .collect()
    }
}

/// One-off scoring; prefer [`RmdScorer`] when scoring many samples.
pub fn rmd_score(sample: &GeneratedSample, registry: &StatsRegistry) -> Result<RmdScore> {
    if !registry.per_class.contains_key(&sample.concept_id) {
        return Err(Error::MissingClass(sample.concept_id.clone()));
    }
    RmdScorer::new(registry)?.score_sample(sample)
}

pub fn write_scores_jsonl<W: Write>(mut out: W, scores: &[RmdScore]) -> Result<()> {
    for s in scores {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores_jsonl<R: BufRead>(input: R) -> Result<Vec<RmdScore>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
