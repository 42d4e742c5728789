//! The continual-learning loop: concepts arrive one at a time, each is
//! turned into a coreset of generated samples, and the coreset is streamed
//! sample by sample into an experience-replay learner.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    assemble_pool, generate_samples, CandidatePool, ChatBackend, Concept, FeatureVector,
    GeneratedSample, Generator,
};
use crate::error::{invalid, Error, Result};
use crate::hirpg::{build_tree, sample_nodes, HirpgConfig, PromptTree};
use crate::rmd::{RmdScorer, StatsRegistry, DEFAULT_RIDGE_EPSILON};
use crate::seeding::{derive_seed, rng_from};
use crate::selection::{select, Coreset, SelectionConfig};

/// Bounded buffer filled by reservoir sampling.
#[derive(Debug, Clone)]
pub struct EpisodicMemory<T = GeneratedSample> {
    capacity: usize,
    slots: Vec<T>,
    seen_count: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T> EpisodicMemory<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            slots: Vec::with_capacity(capacity.min(1 << 16)),
            seen_count: 0,
            seed,
            rng: rng_from(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[T] {
        &self.slots
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Offers `sample` to the memory: kept outright while there is room, then
/// with probability `m/n` in place of a uniformly chosen slot.
pub fn reservoir_update<T>(memory: &mut EpisodicMemory<T>, sample: T) {
    memory.seen_count += 1;
    if memory.slots.len() < memory.capacity {
        memory.slots.push(sample);
        return;
    }
    if memory.capacity == 0 {
        return;
    }
    let j = memory.rng.random_range(0..memory.seen_count);
    if let Ok(j) = usize::try_from(j) {
        if j < memory.capacity {
            memory.slots[j] = sample;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training batches per incoming sample; fractions accumulate.
    #[serde(default = "default_iterations")]
    pub iterations_per_sample: f64,
    /// Share of each batch drawn from episodic memory.
    #[serde(default = "default_replay_fraction")]
    pub replay_fraction: f64,
    pub memory_capacity: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> f64 {
    1.0
}

fn default_replay_fraction() -> f64 {
    0.5
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 16,
            iterations_per_sample: default_iterations(),
            replay_fraction: default_replay_fraction(),
            memory_capacity: 500,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.iterations_per_sample > 0.0 && self.iterations_per_sample.is_finite()) {
            return Err(invalid(format!(
                "iterations per sample must be positive, got {}",
                self.iterations_per_sample
            )));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(invalid(format!(
                "replay fraction must be in [0, 1], got {}",
                self.replay_fraction
            )));
        }
        Ok(())
    }
}

/// A classifier that can be trained online and grows its label set.
pub trait Learner {
    fn dim(&self) -> usize;
    fn class_ids(&self) -> &[String];
    /// Index of `class_id`, adding it to the head if new.
    fn register_class(&mut self, class_id: &str) -> usize;
    /// One SGD step on the batch's mean cross-entropy; returns the loss
    /// before the step.
    fn train_step(&mut self, batch: &[(&FeatureVector, &str)], lr: f64) -> Result<f64>;
    /// Predicted class index, or `None` before any class is known.
    fn predict(&self, x: &FeatureVector) -> Result<Option<usize>>;
}

/// Multinomial logistic regression: `softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegression {
    dim: usize,
    classes: Vec<String>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Gradient of the mean cross-entropy with respect to the weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: Vec::new(),
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Flattened parameters: each weight row, then the bias.
    pub fn parameters(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flatten()
            .chain(&self.bias)
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let c = self.classes.len();
        if params.len() != c * (self.dim + 1) {
            return Err(Error::Dimension {
                expected: c * (self.dim + 1),
                got: params.len(),
            });
        }
        for (row, chunk) in self.weights.iter_mut().zip(params.chunks(self.dim)) {
            row.copy_from_slice(chunk);
        }
        self.bias.copy_from_slice(&params[c * self.dim..]);
        Ok(())
    }

    fn check_dim(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn index_of(&self, class_id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class_id)
    }

    /// Mean cross-entropy over the batch and its gradient. Every class in the
    /// batch must already be registered.
    pub fn loss_and_gradient(&self, batch: &[(&FeatureVector, &str)]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(invalid("empty training batch"));
        }
        let mut grad = Gradient {
            weights: vec![vec![0.0; self.dim]; self.classes.len()],
            bias: vec![0.0; self.classes.len()],
        };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (x, class_id) in batch {
            self.check_dim(x)?;
            let y = self
                .index_of(class_id)
                .ok_or_else(|| Error::MissingClass(class_id.to_string()))?;
            let z = self.logits(x.as_slice());
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += (log_norm - z[y]) * scale;
            for (k, zk) in z.iter().enumerate() {
                let residual = (zk - log_norm).exp() - if k == y { 1.0 } else { 0.0 };
                for (g, v) in grad.weights[k].iter_mut().zip(x.as_slice()) {
                    *g += residual * v * scale;
                }
                grad.bias[k] += residual * scale;
            }
        }
        Ok((loss, grad))
    }
}

impl Learner for SoftmaxRegression {
    fn dim(&self) -> usize {
        self.dim
    }

    fn class_ids(&self) -> &[String] {
        &self.classes
    }

    fn register_class(&mut self, class_id: &str) -> usize {
        if let Some(i) = self.index_of(class_id) {
            return i;
        }
        self.classes.push(class_id.to_string());
        self.weights.push(vec![0.0; self.dim]);
        self.bias.push(0.0);
        self.classes.len() - 1
    }

    fn train_step(&mut self, batch: &[(&FeatureVector, &str)], lr: f64) -> Result<f64> {
        for (x, _) in batch {
            self.check_dim(x)?;
        }
        for (_, class_id) in batch {
            self.register_class(class_id);
        }
        let (loss, grad) = self.loss_and_gradient(batch)?;
        for (row, g) in self.weights.iter_mut().zip(&grad.weights) {
            for (w, d) in row.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
        for (b, d) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * d;
        }
        Ok(loss)
    }

    fn predict(&self, x: &FeatureVector) -> Result<Option<usize>> {
        self.check_dim(x)?;
        let z = self.logits(x.as_slice());
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in z.into_iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        Ok(best.map(|(k, _)| k))
    }
}

/// Fraction of `test_set` whose argmax prediction names the right class.
/// Labels the learner has never seen count as errors.
pub fn evaluate<L: Learner + ?Sized>(
    learner: &L,
    test_set: &[(FeatureVector, String)],
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(invalid("empty test set"));
    }
    let mut correct = 0usize;
    for (x, label) in test_set {
        if let Some(k) = learner.predict(x)? {
            if learner.class_ids()[k] == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub accuracy: f64,
}

/// Accuracy measured every `eval_every` streamed samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub eval_every: u64,
    pub points: Vec<MetricPoint>,
}

impl MetricSeries {
    pub fn new(eval_every: u64) -> Self {
        Self {
            eval_every,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, accuracy: f64) {
        let step = (self.points.len() as u64 + 1) * self.eval_every;
        self.points.push(MetricPoint { step, accuracy });
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.accuracy).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(invalid("evaluation interval must be positive"));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.step != (i as u64 + 1) * self.eval_every {
                return Err(invalid(format!(
                    "point {i} is at step {} instead of {}",
                    p.step,
                    (i as u64 + 1) * self.eval_every
                )));
            }
            if !(0.0..=1.0).contains(&p.accuracy) {
                return Err(invalid(format!("accuracy {} outside [0, 1]", p.accuracy)));
            }
        }
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, series: &MetricSeries) -> Result<()> {
    writeln!(out, "step,accuracy")?;
    for p in &series.points {
        writeln!(out, "{},{}", p.step, p.accuracy)?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str, eval_every: Option<u64>) -> Result<MetricSeries> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: "metrics.csv".into(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "step,accuracy" => {}
        _ => return Err(parse_err(1, "expected header \"step,accuracy\"".into())),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let (step, acc) = line
            .split_once(',')
            .ok_or_else(|| parse_err(i + 1, "expected two columns".into()))?;
        points.push(MetricPoint {
            step: step
                .trim()
                .parse()
                .map_err(|e| parse_err(i + 1, format!("{e}")))?,
            accuracy: acc
                .trim()
                .parse()
                .map_err(|e| parse_err(i + 1, format!("{e}")))?,
        });
    }
    let every = eval_every
        .or_else(|| points.first().map(|p| p.step))
        .unwrap_or(1);
    let series = MetricSeries {
        eval_every: every,
        points,
    };
    series.validate()?;
    Ok(series)
}

/// Everything the loop needs besides the learner and the data.
pub struct Pipeline<'a> {
    pub llm: &'a dyn ChatBackend,
    pub generators: Vec<&'a dyn Generator>,
    pub hirpg: HirpgConfig,
    pub selection: SelectionConfig,
    pub learner: LearnerConfig,
}

/// Sample ids in one training batch, with how many samples had been
/// streamed when it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub streamed: u64,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenclRun<L> {
    pub learner: L,
    pub series: MetricSeries,
    pub memory: EpisodicMemory,
    pub concepts: Vec<ConceptArtifacts>,
    pub losses: Vec<f64>,
    pub batches: Vec<BatchRecord>,
}

impl<L> GenclRun<L> {
    pub fn coresets(&self) -> Vec<&Coreset> {
        self.concepts.iter().map(|c| &c.coreset).collect()
    }
}

/// Intermediate products for one concept.
#[derive(Debug, Clone)]
pub struct ConceptArtifacts {
    pub tree: PromptTree,
    pub pool: CandidatePool,
    pub coreset: Coreset,
}

impl ConceptArtifacts {
    /// Coreset samples in selection order.
    pub fn coreset_samples(&self) -> Vec<&GeneratedSample> {
        let by_id: BTreeMap<&str, &GeneratedSample> = self
            .pool
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect();
        self.coreset
            .entries
            .iter()
            .filter_map(|e| by_id.get(e.sample_id.as_str()).copied())
            .collect()
    }
}

/// The `(node_id, text)` prompts sampled from a concept's tree.
pub fn concept_prompts(tree: &PromptTree, config: &HirpgConfig) -> Result<Vec<(String, String)>> {
    let seed = derive_seed(config.seed, &tree.concept_id);
    Ok(sample_nodes(tree, config.prompt_budget, seed)?
        .into_iter()
        .map(|n| (n.node_id.clone(), n.text.clone()))
        .collect())
}

/// Renders the prompts with every generator and assembles the pool.
pub fn generate_pool(
    concept: &Concept,
    prompts: &[(String, String)],
    generators: &[&dyn Generator],
) -> Result<CandidatePool> {
    if generators.is_empty() {
        return Err(Error::Pipeline("no generators configured".into()));
    }
    let per_generator = generators
        .iter()
        .map(|g| Ok((g.id().to_string(), generate_samples(*g, prompts, concept)?)))
        .collect::<Result<Vec<_>>>()?;
    assemble_pool(per_generator)
}

/// Folds the pool into the running statistics, scores it against every
/// class seen so far, and selects the coreset.
pub fn score_and_select(
    pool: &CandidatePool,
    registry: &mut Option<StatsRegistry>,
    selection: &SelectionConfig,
) -> Result<Coreset> {
    let registry =
        registry.get_or_insert_with(|| StatsRegistry::new(pool.dim, DEFAULT_RIDGE_EPSILON));
    registry.update_samples(&pool.samples)?;
    let scores = RmdScorer::new(registry)?.score_pool(pool)?;
    let coreset = select(pool, &scores, selection)?;
    if coreset.is_empty() {
        return Err(Error::Pipeline(
            "selection produced an empty coreset".into(),
        ));
    }
    Ok(coreset)
}

/// Prompts, pool and coreset for one concept. Statistics accumulate in
/// `registry` across calls so scores are relative to every class so far.
pub fn prepare_concept(
    concept: &Concept,
    pipeline: &Pipeline<'_>,
    registry: &mut Option<StatsRegistry>,
) -> Result<ConceptArtifacts> {
    let tree = build_tree(&concept.name, &pipeline.hirpg, pipeline.llm)?;
    let prompts = concept_prompts(&tree, &pipeline.hirpg)?;
    let pool = generate_pool(concept, &prompts, &pipeline.generators)?;
    let coreset = score_and_select(&pool, registry, &pipeline.selection)?;
    Ok(ConceptArtifacts {
        tree,
        pool,
        coreset,
    })
}

/// Runs the whole stream. `eval_sets` maps each concept id to its test
/// features; accuracy is measured on the union over concepts whose samples
/// have started streaming.
pub fn run_gencl<L: Learner>(
    stream: &[Concept],
    pipeline: &Pipeline<'_>,
    mut learner: L,
    eval_sets: &BTreeMap<String, Vec<FeatureVector>>,
    eval_every: u64,
    record_batches: bool,
) -> Result<GenclRun<L>> {
    if eval_every == 0 {
        return Err(invalid("evaluation interval must be positive"));
    }
    pipeline.learner.validate()?;
    pipeline.selection.validate()?;
    if let Some(c) = stream
        .iter()
        .find(|c| !eval_sets.contains_key(&c.concept_id))
    {
        return Err(invalid(format!(
            "no evaluation data for concept {}",
            c.concept_id
        )));
    }
    let cfg = pipeline.learner;
    let mut memory = EpisodicMemory::new(cfg.memory_capacity, derive_seed(cfg.seed, "memory"));
    let mut rng = rng_from(derive_seed(cfg.seed, "batches"));
    let mut registry = None;
    let mut run_series = MetricSeries::new(eval_every);
    let mut artifacts: Vec<ConceptArtifacts> = Vec::with_capacity(stream.len());
    let mut losses = Vec::new();
    let mut batches = Vec::new();
    let mut test_set: Vec<(FeatureVector, String)> = Vec::new();
    let mut budget = 0.0;
    let mut streamed = 0u64;

    let replay_share = (cfg.batch_size as f64 * cfg.replay_fraction).round() as usize;

    for concept in stream {
        artifacts.push(prepare_concept(concept, pipeline, &mut registry)?);
        let samples = artifacts[artifacts.len() - 1].coreset_samples();
        test_set.extend(
            eval_sets[&concept.concept_id]
                .iter()
                .map(|x| (x.clone(), concept.concept_id.clone())),
        );
        for (i, &incoming) in samples.iter().enumerate() {
            streamed += 1;
            budget += cfg.iterations_per_sample;
            while budget >= 1.0 {
                budget -= 1.0;
                let n_replay = replay_share.min(memory.len());
                let n_fresh = cfg.batch_size - n_replay;
                let mut batch: Vec<&GeneratedSample> = Vec::with_capacity(cfg.batch_size);
                batch.push(incoming);
                // The rest of the fresh share comes from this concept's
                // already-streamed samples.
                for _ in 1..n_fresh {
                    batch.push(samples[rng.random_range(0..=i)]);
                }
                for _ in 0..n_replay {
                    batch.push(&memory.slots()[rng.random_range(0..memory.len())]);
                }
                let pairs: Vec<(&FeatureVector, &str)> = batch
                    .iter()
                    .map(|s| (&s.feature, s.concept_id.as_str()))
                    .collect();
                losses.push(learner.train_step(&pairs, cfg.learning_rate)?);
                if record_batches {
                    batches.push(BatchRecord {
                        streamed,
                        sample_ids: batch.iter().map(|s| s.sample_id.clone()).collect(),
                    });
                }
            }
            reservoir_update(&mut memory, incoming.clone());
            if streamed.is_multiple_of(eval_every) {
                run_series.push(evaluate(&learner, &test_set)?);
            }
        }
    }
    Ok(GenclRun {
        learner,
        series: run_series,
        memory,
        concepts: artifacts,
        losses,
        batches,
    })
}

/// Distinct classes held in memory.
pub fn memory_classes(memory: &EpisodicMemory) -> HashSet<&str> {
    memory
        .slots()
        .iter()
        .map(|s| s.concept_id.as_str())
        .collect()
}
