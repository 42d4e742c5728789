//! Evaluation metrics: anytime accuracy, coverage of a real feature set by
//! generated features, macro-F1 and CIDEr.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backends::FeatureVector;
use crate::error::{invalid, Error, Result};
use crate::stream::MetricSeries;

/// Area under the accuracy curve, normalized by the number of evaluated
/// steps so a constant accuracy `a` scores `a`. The `Δn` weights cancel, so
/// this is the mean of the evaluated accuracies.
pub fn a_auc(series: &MetricSeries) -> Result<f64> {
    if series.points.is_empty() {
        return Err(invalid("accuracy series is empty"));
    }
    let sum: f64 = series.points.iter().map(|p| p.accuracy).sum();
    Ok(sum / series.points.len() as f64)
}

/// Accuracy at the final evaluation point.
pub fn a_last(series: &MetricSeries) -> Result<f64> {
    series
        .points
        .last()
        .map(|p| p.accuracy)
        .ok_or_else(|| invalid("accuracy series is empty"))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of real samples whose closed ball of radius "distance to the
/// k-th nearest other real sample" contains at least one generated sample.
pub fn coverage(real: &[FeatureVector], generated: &[FeatureVector], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(invalid("coverage needs k >= 1"));
    }
    if real.len() <= k {
        return Err(invalid(format!(
            "coverage with k = {k} needs more than {k} real samples, got {}",
            real.len()
        )));
    }
    let dim = real[0].dim();
    if let Some(bad) = real.iter().chain(generated).find(|f| f.dim() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: bad.dim(),
        });
    }
    let covered = real
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let mut neighbours: Vec<f64> = real
                .iter()
                .enumerate()
                .filter(|(j, _)| j != i)
                .map(|(_, y)| euclidean(x.as_slice(), y.as_slice()))
                .collect();
            neighbours.select_nth_unstable_by(k - 1, f64::total_cmp);
            let radius = neighbours[k - 1];
            generated
                .iter()
                .any(|g| euclidean(x.as_slice(), g.as_slice()) <= radius)
        })
        .count();
    Ok(covered as f64 / real.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in `labels`.
pub fn macro_f1<S: AsRef<str>>(predictions: &[S], labels: &[S]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid("no labels to score"));
    }
    // class -> (true positives, false positives, false negatives)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let (p, l) = (p.as_ref(), l.as_ref());
        if p == l {
            counts.entry(l).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(l).or_default().2 += 1;
        }
    }
    let present: HashSet<&str> = labels.iter().map(|l| l.as_ref()).collect();
    let scores: Vec<f64> = counts
        .iter()
        .filter(|(c, _)| present.contains(*c))
        .map(|(_, &(tp, fp, fne))| {
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fne) as f64
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Lowercased whitespace tokens with ASCII punctuation removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedSentence {
    tokens: Vec<String>,
}

impl TokenizedSentence {
    pub fn new(text: &str) -> Self {
        Self {
            tokens: tokenize(text),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn ngrams(&self, n: usize) -> HashMap<&[String], f64> {
        let mut counts = HashMap::new();
        if n > 0 {
            for gram in self.tokens.windows(n) {
                *counts.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        counts
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Document frequencies of n-grams over a reference corpus.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    corpus_size: usize,
    df: HashMap<Vec<String>, usize>,
}

impl CiderIdf {
    pub fn from_corpus(corpus: &[TokenizedSentence], n_max: usize) -> Self {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for sentence in corpus {
            for n in 1..=n_max {
                for gram in sentence.ngrams(n).into_keys() {
                    *df.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Self {
            corpus_size: corpus.len(),
            df,
        }
    }

    /// `ln((|corpus| + 1) / max(df, 1))`. The +1 keeps n-grams that occur in
    /// every reference (including the single-reference case) from getting a
    /// zero weight.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        ((self.corpus_size + 1) as f64 / df as f64).ln()
    }

    fn tfidf<'a>(&self, sentence: &'a TokenizedSentence, n: usize) -> HashMap<&'a [String], f64> {
        sentence
            .ngrams(n)
            .into_iter()
            .map(|(g, tf)| (g, tf * self.idf(g)))
            .collect()
    }
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let norm = |v: &HashMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// CIDEr with the references themselves as the IDF corpus.
pub fn cider(
    candidate: &TokenizedSentence,
    references: &[TokenizedSentence],
    n_max: usize,
) -> Result<f64> {
    cider_with_idf(
        candidate,
        references,
        &CiderIdf::from_corpus(references, n_max),
        n_max,
    )
}

/// Mean over `n = 1..=n_max` of the average TF-IDF cosine between the
/// candidate and each reference.
pub fn cider_with_idf(
    candidate: &TokenizedSentence,
    references: &[TokenizedSentence],
    idf: &CiderIdf,
    n_max: usize,
) -> Result<f64> {
    if candidate.is_empty() {
        return Err(invalid("empty candidate sentence"));
    }
    if references.is_empty() {
        return Err(invalid("no reference sentences"));
    }
    if n_max == 0 {
        return Err(invalid("n_max must be at least 1"));
    }
    let mut total = 0.0;
    for n in 1..=n_max {
        let cand = idf.tfidf(candidate, n);
        let per_ref: f64 = references
            .iter()
            .map(|r| cosine(&cand, &idf.tfidf(r, n)))
            .sum();
        total += per_ref / references.len() as f64;
    }
    Ok(total / n_max as f64)
}

/// Corpus-level CIDEr: every reference across all pairs forms the IDF corpus
/// and the per-candidate scores are averaged.
pub fn corpus_cider(
    pairs: &[(TokenizedSentence, Vec<TokenizedSentence>)],
    n_max: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no candidates to score"));
    }
    let corpus: Vec<TokenizedSentence> =
        pairs.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let idf = CiderIdf::from_corpus(&corpus, n_max);
    let mut sum = 0.0;
    for (cand, refs) in pairs {
        sum += cider_with_idf(cand, refs, &idf, n_max)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// `eval_report.json`; metrics that were not requested stay `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub a_auc: Option<f64>,
    pub a_last: Option<f64>,
    pub coverage: Option<f64>,
    pub macro_f1: Option<f64>,
    pub cider: Option<f64>,
}
