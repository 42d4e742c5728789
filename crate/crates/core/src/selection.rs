//! Coreset selection over a multi-generator candidate pool.
//!
//! The default strategy scores every sample by RMD, and then per class:
//! drops the top and bottom `L`% of scores, z-normalizes what is left, turns
//! the normalized scores into selection probabilities with a temperature
//! softmax, and draws the class quota without replacement. Hard samples are
//! favoured while easy, class-representative ones keep a non-zero chance.
//!
//! Baselines: equal weight per generator (`ews`), deterministic top/bottom
//! RMD, inverted probabilities, and median-distance selection (`moderate`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{CandidatePool, GeneratedSample};
use crate::error::{invalid, Error, Result};
use crate::rmd::RmdScore;
use crate::seeding::{derive_seed, rng_from};

/// Standard deviations below this count as zero spread.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Conan,
    Ews,
    KHighestRmd,
    KLowestRmd,
    InverseConan,
    Moderate,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Conan,
        Strategy::Ews,
        Strategy::KHighestRmd,
        Strategy::KLowestRmd,
        Strategy::InverseConan,
        Strategy::Moderate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Conan => "conan",
            Strategy::Ews => "ews",
            Strategy::KHighestRmd => "k_highest_rmd",
            Strategy::KLowestRmd => "k_lowest_rmd",
            Strategy::InverseConan => "inverse_conan",
            Strategy::Moderate => "moderate",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Percentage trimmed from each end of every class's score list.
    #[serde(default = "default_trunc_percent")]
    pub trunc_percent: f64,
    /// Coreset size; `None` means one generator's share of the pool.
    #[serde(default)]
    pub total_quota: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
}

fn default_tau() -> f64 {
    0.5
}

fn default_trunc_percent() -> f64 {
    5.0
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            trunc_percent: default_trunc_percent(),
            total_quota: None,
            seed: 0,
            strategy: Strategy::Conan,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..50.0).contains(&self.trunc_percent) {
            return Err(invalid(format!(
                "truncation percent must be in [0, 50), got {}",
                self.trunc_percent
            )));
        }
        if self.total_quota == Some(0) {
            return Err(invalid("total quota must be positive"));
        }
        Ok(())
    }

    pub fn quota_for(&self, pool: &CandidatePool) -> Result<usize> {
        let quota = self
            .total_quota
            .unwrap_or_else(|| pool.per_generator_count());
        if quota == 0 || quota > pool.len() {
            return Err(invalid(format!(
                "quota {quota} does not fit a pool of {}",
                pool.len()
            )));
        }
        Ok(quota)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetEntry {
    pub sample_id: String,
    pub class_id: String,
    /// Selection probability, for strategies that draw by probability.
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    pub strategy: Strategy,
    pub entries: Vec<CoresetEntry>,
    pub per_class_quota: BTreeMap<String, usize>,
}

impl Coreset {
    pub fn sample_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.sample_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn probabilities(&self) -> Option<BTreeMap<String, f64>> {
        self.entries
            .iter()
            .map(|e| e.p.map(|p| (e.sample_id.clone(), p)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = self.entries.iter().find(|e| !seen.insert(&e.sample_id)) {
            return Err(invalid(format!("sample {} selected twice", dup.sample_id)));
        }
        let quota: usize = self.per_class_quota.values().sum();
        if quota != self.entries.len() {
            return Err(invalid(format!(
                "quotas sum to {quota} but {} samples were selected",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Number of entries removed from each end when trimming `percent` of `n`.
pub fn truncation_count(n: usize, percent: f64) -> usize {
    // `percent * n` is exact for the integer percentages used in practice;
    // the slack absorbs representation error for fractional ones.
    ((percent * n as f64) / 100.0 + 1e-9).floor() as usize
}

/// Removes the `⌊L·n/100⌋` highest and lowest scores (ties broken by sample
/// id). Survivors keep their input order.
pub fn truncate_scores(scores: &[RmdScore], percent: f64) -> Vec<RmdScore> {
    let cut = truncation_count(scores.len(), percent);
    if cut == 0 {
        return scores.to_vec();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .rmd
            .total_cmp(&scores[b].rmd)
            .then_with(|| scores[a].sample_id.cmp(&scores[b].sample_id))
    });
    let keep: HashSet<usize> = order[cut..scores.len().saturating_sub(cut)]
        .iter()
        .copied()
        .collect();
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, s)| s.clone())
        .collect()
}

/// `(v − mean) / std` with the population standard deviation; all zeros when
/// the spread is degenerate.
pub fn zscore_normalize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Temperature softmax with max subtraction.
pub fn selection_probs(normalized: &[f64], tau: f64) -> Result<Vec<f64>> {
    if normalized.is_empty() {
        return Err(invalid("no scores to turn into probabilities"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let max = normalized
        .iter()
        .map(|v| v / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = normalized.iter().map(|v| (v / tau - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Indices of `k` items drawn without replacement, in draw order, by the
/// exponential race: each item gets key `−ln(u)/p` and the smallest keys win.
pub fn weighted_sample_indices<R: Rng>(probs: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > probs.len() {
        return Err(invalid(format!(
            "cannot draw {k} items from {}",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(invalid(format!("probabilities must be positive, got {p}")));
    }
    let mut keyed: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // u in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            (-u.ln() / p, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(k).map(|(_, i)| i).collect())
}

pub fn weighted_sample_without_replacement<T: Clone>(
    items: &[T],
    probs: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if items.len() != probs.len() {
        return Err(invalid(format!(
            "{} items but {} probabilities",
            items.len(),
            probs.len()
        )));
    }
    let picks = weighted_sample_indices(probs, k, &mut rng_from(seed))?;
    Ok(picks.into_iter().map(|i| items[i].clone()).collect())
}

/// Splits `total` across groups in proportion to their sizes, handing the
/// leftover units to the largest fractional remainders (earlier groups win
/// ties).
pub fn allocate_quota(sizes: &[(String, usize)], total: usize) -> Result<Vec<(String, usize)>> {
    let population: usize = sizes.iter().map(|(_, n)| n).sum();
    if population == 0 {
        return Err(invalid("cannot allocate a quota over empty groups"));
    }
    let mut shares: Vec<(usize, u128)> = sizes
        .iter()
        .map(|(_, n)| {
            let exact = (*n as u128) * (total as u128);
            (
                (exact / population as u128) as usize,
                exact % population as u128,
            )
        })
        .collect();
    let assigned: usize = shares.iter().map(|(q, _)| q).sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.cmp(&shares[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(total - assigned) {
        shares[i].0 += 1;
    }
    Ok(sizes
        .iter()
        .zip(shares)
        .map(|((name, _), (q, _))| (name.clone(), q))
        .collect())
}

struct ClassView<'a> {
    class_id: String,
    samples: Vec<&'a GeneratedSample>,
    scores: Vec<RmdScore>,
}

fn group_by_class<'a>(pool: &'a CandidatePool, scores: &[RmdScore]) -> Result<Vec<ClassView<'a>>> {
    let by_id: HashMap<&str, &RmdScore> =
        scores.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut views: Vec<ClassView<'a>> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for sample in &pool.samples {
        let score = by_id
            .get(sample.sample_id.as_str())
            .ok_or_else(|| invalid(format!("sample {} has no RMD score", sample.sample_id)))?;
        let slot = *index.entry(sample.concept_id.as_str()).or_insert_with(|| {
            views.push(ClassView {
                class_id: sample.concept_id.clone(),
                samples: Vec::new(),
                scores: Vec::new(),
            });
            views.len() - 1
        });
        views[slot].samples.push(sample);
        views[slot].scores.push((*score).clone());
    }
    Ok(views)
}

fn class_quotas(views: &[ClassView<'_>], total: usize) -> Result<Vec<usize>> {
    let sizes: Vec<(String, usize)> = views
        .iter()
        .map(|v| (v.class_id.clone(), v.samples.len()))
        .collect();
    Ok(allocate_quota(&sizes, total)?
        .into_iter()
        .map(|(_, q)| q)
        .collect())
}

fn finish(
    strategy: Strategy,
    views: &[ClassView<'_>],
    quotas: &[usize],
    entries: Vec<CoresetEntry>,
) -> Result<Coreset> {
    let coreset = Coreset {
        strategy,
        entries,
        per_class_quota: views
            .iter()
            .zip(quotas)
            .map(|(v, q)| (v.class_id.clone(), *q))
            .collect(),
    };
    coreset.validate()?;
    Ok(coreset)
}

/// Per-class truncate → z-score → softmax → draw. With `invert`, each
/// probability is replaced by its normalized reciprocal before drawing.
fn probabilistic_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
    invert: bool,
) -> Result<Coreset> {
    config.validate()?;
    let total = config.quota_for(pool)?;
    let views = group_by_class(pool, scores)?;
    let quotas = class_quotas(&views, total)?;
    let mut entries = Vec::with_capacity(total);
    for (view, &quota) in views.iter().zip(&quotas) {
        let retained = truncate_scores(&view.scores, config.trunc_percent);
        if quota > retained.len() {
            return Err(Error::QuotaInfeasible {
                class: view.class_id.clone(),
                quota,
                retained: retained.len(),
            });
        }
        let rmd: Vec<f64> = retained.iter().map(|s| s.rmd).collect();
        let mut probs = selection_probs(&zscore_normalize(&rmd), config.tau)?;
        if invert {
            let total_inv: f64 = probs.iter().map(|p| 1.0 / p).sum();
            probs = probs.iter().map(|p| (1.0 / p) / total_inv).collect();
        }
        let mut rng = rng_from(derive_seed(config.seed, &view.class_id));
        for i in weighted_sample_indices(&probs, quota, &mut rng)? {
            entries.push(CoresetEntry {
                sample_id: retained[i].sample_id.clone(),
                class_id: view.class_id.clone(),
                p: Some(probs[i]),
            });
        }
    }
    finish(config.strategy, &views, &quotas, entries)
}

pub fn conan_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
) -> Result<Coreset> {
    if config.strategy != Strategy::Conan {
        return Err(invalid(format!(
            "conan_select called with strategy {}",
            config.strategy
        )));
    }
    probabilistic_select(pool, scores, config, false)
}

fn ranked_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
    highest: bool,
) -> Result<Coreset> {
    let total = config.quota_for(pool)?;
    let views = group_by_class(pool, scores)?;
    let quotas = class_quotas(&views, total)?;
    let mut entries = Vec::with_capacity(total);
    for (view, &quota) in views.iter().zip(&quotas) {
        let mut ranked: Vec<&RmdScore> = view.scores.iter().collect();
        ranked.sort_by(|a, b| {
            let by_score = if highest {
                b.rmd.total_cmp(&a.rmd)
            } else {
                a.rmd.total_cmp(&b.rmd)
            };
            by_score.then_with(|| a.sample_id.cmp(&b.sample_id))
        });
        entries.extend(ranked.into_iter().take(quota).map(|s| CoresetEntry {
            sample_id: s.sample_id.clone(),
            class_id: view.class_id.clone(),
            p: None,
        }));
    }
    finish(config.strategy, &views, &quotas, entries)
}

fn ews_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
) -> Result<Coreset> {
    let total = config.quota_for(pool)?;
    let views = group_by_class(pool, scores)?;
    let quotas = class_quotas(&views, total)?;
    let mut entries = Vec::with_capacity(total);
    for (view, &quota) in views.iter().zip(&quotas) {
        let equal: Vec<(String, usize)> =
            pool.generator_ids.iter().map(|g| (g.clone(), 1)).collect();
        for (generator, share) in allocate_quota(&equal, quota)? {
            let candidates: Vec<&GeneratedSample> = view
                .samples
                .iter()
                .copied()
                .filter(|s| s.generator_id == generator)
                .collect();
            if share > candidates.len() {
                return Err(Error::QuotaInfeasible {
                    class: format!("{}/{generator}", view.class_id),
                    quota: share,
                    retained: candidates.len(),
                });
            }
            let mut rng = rng_from(derive_seed(
                config.seed,
                &format!("{}/{generator}", view.class_id),
            ));
            for i in index::sample(&mut rng, candidates.len(), share) {
                entries.push(CoresetEntry {
                    sample_id: candidates[i].sample_id.clone(),
                    class_id: view.class_id.clone(),
                    p: None,
                });
            }
        }
    }
    finish(Strategy::Ews, &views, &quotas, entries)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn moderate_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
) -> Result<Coreset> {
    let total = config.quota_for(pool)?;
    let views = group_by_class(pool, scores)?;
    let quotas = class_quotas(&views, total)?;
    let mut entries = Vec::with_capacity(total);
    for (view, &quota) in views.iter().zip(&quotas) {
        let n = view.samples.len() as f64;
        let mut prototype = vec![0.0; pool.dim];
        for s in &view.samples {
            for (m, v) in prototype.iter_mut().zip(s.feature.as_slice()) {
                *m += v / n;
            }
        }
        let distances: Vec<f64> = view
            .samples
            .iter()
            .map(|s| euclidean(s.feature.as_slice(), &prototype))
            .collect();
        let mut sorted = distances.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = median(&sorted);
        let mut order: Vec<usize> = (0..view.samples.len()).collect();
        order.sort_by(|&a, &b| {
            (distances[a] - mid)
                .abs()
                .total_cmp(&(distances[b] - mid).abs())
                .then_with(|| view.samples[a].sample_id.cmp(&view.samples[b].sample_id))
        });
        entries.extend(order.into_iter().take(quota).map(|i| CoresetEntry {
            sample_id: view.samples[i].sample_id.clone(),
            class_id: view.class_id.clone(),
            p: None,
        }));
    }
    finish(Strategy::Moderate, &views, &quotas, entries)
}

pub fn baseline_select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
) -> Result<Coreset> {
    config.validate()?;
    match config.strategy {
        Strategy::Ews => ews_select(pool, scores, config),
        Strategy::KHighestRmd => ranked_select(pool, scores, config, true),
        Strategy::KLowestRmd => ranked_select(pool, scores, config, false),
        Strategy::InverseConan => probabilistic_select(pool, scores, config, true),
        Strategy::Moderate => moderate_select(pool, scores, config),
        Strategy::Conan => Err(invalid("conan is not a baseline strategy")),
    }
}

/// Dispatches on `config.strategy`.
pub fn select(
    pool: &CandidatePool,
    scores: &[RmdScore],
    config: &SelectionConfig,
) -> Result<Coreset> {
    match config.strategy {
        Strategy::Conan => conan_select(pool, scores, config),
        _ => baseline_select(pool, scores, config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedRecord {
    pub sample_id: String,
    pub class: String,
    pub p: Option<f64>,
}

/// `coreset.json` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetFile {
    pub strategy: Strategy,
    pub seed: u64,
    pub tau: f64,
    #[serde(rename = "L")]
    pub trunc_percent: f64,
    pub quota: usize,
    pub selected: Vec<SelectedRecord>,
}

impl CoresetFile {
    pub fn new(config: &SelectionConfig, coresets: &[&Coreset]) -> Self {
        let selected: Vec<SelectedRecord> = coresets
            .iter()
            .flat_map(|c| c.entries.iter())
            .map(|e| SelectedRecord {
                sample_id: e.sample_id.clone(),
                class: e.class_id.clone(),
                p: e.p,
            })
            .collect();
        Self {
            strategy: config.strategy,
            seed: config.seed,
            tau: config.tau,
            trunc_percent: config.trunc_percent,
            quota: selected.len(),
            selected,
        }
    }
}
