use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use gencl_core::backends::{
    assemble_pool, mock_real_features, read_features_jsonl, write_features_jsonl, CandidatePool,
    FeatureVector, GeneratedSample, Generator, SyntheticFeatureModel,
};
use gencl_core::hirpg::{build_tree, PromptTreeFile};
use gencl_core::metrics::{
    a_auc, a_last, corpus_cider, coverage, macro_f1, EvalReport, TokenizedSentence,
};
use gencl_core::selection::{Coreset, CoresetFile};
use gencl_core::stream::{
    concept_prompts, generate_pool, read_metrics_csv, run_gencl, score_and_select,
    write_metrics_csv, Pipeline, SoftmaxRegression,
};
use gencl_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{EvalDataConfig, ResolvedPaths, RunConfig};
use crate::output::{read_json, read_text, write_atomic, write_json};
use crate::CliError;

pub struct Context {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub paths: ResolvedPaths,
}

impl Context {
    /// Paths named inside the config are relative to the config file.
    fn input_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }
}

fn pipeline_err(message: impl Into<String>) -> CliError {
    CliError::Pipeline(Error::Pipeline(message.into()))
}

fn read_features(path: &Path) -> Result<Vec<GeneratedSample>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_features_jsonl(
        BufReader::new(file),
        &path.display().to_string(),
    )?)
}

fn features_bytes<'a>(
    samples: impl IntoIterator<Item = &'a GeneratedSample>,
) -> Result<Vec<u8>, CliError> {
    let samples: Vec<GeneratedSample> = samples.into_iter().cloned().collect();
    let mut buf = Vec::new();
    write_features_jsonl(&mut buf, &samples)?;
    Ok(buf)
}

fn generator_refs(generators: &[Box<dyn Generator>]) -> Vec<&dyn Generator> {
    generators.iter().map(|g| g.as_ref()).collect()
}

/// Splits a flat sample list by generator (first-appearance order) and
/// checks the per-generator balance.
fn pool_from_samples(samples: Vec<GeneratedSample>) -> Result<CandidatePool, CliError> {
    let mut lists: Vec<(String, Vec<GeneratedSample>)> = Vec::new();
    for s in samples {
        match lists.iter_mut().find(|(g, _)| *g == s.generator_id) {
            Some((_, list)) => list.push(s),
            None => lists.push((s.generator_id.clone(), vec![s])),
        }
    }
    Ok(assemble_pool(lists)?)
}

/// Groups samples by concept in config order; every concept must appear and
/// no other concept may.
fn split_by_concept(
    config: &RunConfig,
    samples: Vec<GeneratedSample>,
    what: &str,
) -> Result<Vec<Vec<GeneratedSample>>, CliError> {
    let index: BTreeMap<&str, usize> = config
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.concept_id.as_str(), i))
        .collect();
    let mut groups = vec![Vec::new(); config.concepts.len()];
    for s in samples {
        let i = *index.get(s.concept_id.as_str()).ok_or_else(|| {
            pipeline_err(format!("{what} mention unknown concept {}", s.concept_id))
        })?;
        groups[i].push(s);
    }
    if let Some((c, _)) = config
        .concepts
        .iter()
        .zip(&groups)
        .find(|(_, g)| g.is_empty())
    {
        return Err(pipeline_err(format!(
            "{what} have nothing for concept {}",
            c.concept_id
        )));
    }
    Ok(groups)
}

fn eval_sets(ctx: &Context) -> Result<BTreeMap<String, Vec<FeatureVector>>, CliError> {
    let config = &ctx.config;
    match &config.eval_data {
        EvalDataConfig::Synthetic {
            per_concept,
            noise_sigma,
        } => {
            let model = SyntheticFeatureModel {
                noise_sigma: noise_sigma.unwrap_or(config.synthetic.noise_sigma),
                ..config.world_model()
            };
            Ok(config
                .concepts
                .iter()
                .map(|c| {
                    let feats = mock_real_features(
                        &c.concept_id,
                        *per_concept,
                        config.synthetic.seed,
                        &model,
                    );
                    (c.concept_id.clone(), feats)
                })
                .collect())
        }
        EvalDataConfig::File { path } => {
            let samples = read_features(&ctx.input_path(path))?;
            let groups = split_by_concept(config, samples, "evaluation features")?;
            Ok(config
                .concepts
                .iter()
                .zip(groups)
                .map(|(c, g)| {
                    (
                        c.concept_id.clone(),
                        g.into_iter().map(|s| s.feature).collect(),
                    )
                })
                .collect())
        }
    }
}

pub fn prompts(ctx: &Context) -> Result<(), CliError> {
    let llm = ctx.config.build_llm();
    let files = ctx
        .config
        .concepts
        .iter()
        .map(|c| {
            let tree = build_tree(&c.name, &ctx.config.hirpg, llm.as_ref())?;
            log::info!("{}: {} prompts", c.concept_id, tree.nodes.len());
            Ok(PromptTreeFile::from(&tree))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    write_json(&ctx.paths.prompts, &files)
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let config = &ctx.config;
    let files: Vec<PromptTreeFile> = read_json(&ctx.paths.prompts)?;
    if files.len() != config.concepts.len() {
        return Err(pipeline_err(format!(
            "{} holds {} trees for {} concepts",
            ctx.paths.prompts.display(),
            files.len(),
            config.concepts.len()
        )));
    }
    let generators = config.build_generators();
    let generators = generator_refs(&generators);
    let mut samples = Vec::new();
    for (concept, file) in config.concepts.iter().zip(files) {
        if file.concept != concept.name {
            return Err(pipeline_err(format!(
                "prompt tree for {:?} found where {:?} was expected",
                file.concept, concept.name
            )));
        }
        let tree = file.into_tree(config.hirpg.prompt_budget)?;
        let prompts = concept_prompts(&tree, &config.hirpg)?;
        let pool = generate_pool(concept, &prompts, &generators)?;
        log::info!("{}: {} samples", concept.concept_id, pool.len());
        samples.extend(pool.samples);
    }
    write_atomic(&ctx.paths.features, &features_bytes(&samples)?)
}

fn select_coresets(
    config: &RunConfig,
    samples: Vec<GeneratedSample>,
) -> Result<Vec<Coreset>, CliError> {
    let mut registry = None;
    let mut coresets = Vec::new();
    for group in split_by_concept(config, samples, "features")? {
        let pool = pool_from_samples(group)?;
        coresets.push(score_and_select(&pool, &mut registry, &config.selection)?);
    }
    Ok(coresets)
}

pub fn select(ctx: &Context) -> Result<(), CliError> {
    let samples = read_features(&ctx.paths.features)?;
    let coresets = select_coresets(&ctx.config, samples)?;
    let refs: Vec<&Coreset> = coresets.iter().collect();
    write_json(
        &ctx.paths.coreset,
        &CoresetFile::new(&ctx.config.selection, &refs),
    )
}

#[derive(Debug, Serialize)]
struct RunSummary {
    streamed: usize,
    evaluations: usize,
    a_auc: Option<f64>,
    a_last: Option<f64>,
    memory_slots: usize,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    outputs: BTreeMap<&'a str, String>,
    summary: RunSummary,
}

pub fn stream(ctx: &Context) -> Result<(), CliError> {
    let config = &ctx.config;
    let eval = eval_sets(ctx)?;
    let llm = config.build_llm();
    let generators = config.build_generators();
    let pipeline = Pipeline {
        llm: llm.as_ref(),
        generators: generator_refs(&generators),
        hirpg: config.hirpg,
        selection: config.selection,
        learner: config.learner,
    };
    let run = run_gencl(
        &config.concepts,
        &pipeline,
        SoftmaxRegression::new(config.feature_dim),
        &eval,
        config.eval_every,
        false,
    )?;

    let trees: Vec<PromptTreeFile> = run
        .concepts
        .iter()
        .map(|c| PromptTreeFile::from(&c.tree))
        .collect();
    write_json(&ctx.paths.prompts, &trees)?;
    write_atomic(
        &ctx.paths.features,
        &features_bytes(run.concepts.iter().flat_map(|c| &c.pool.samples))?,
    )?;
    write_json(
        &ctx.paths.coreset,
        &CoresetFile::new(&config.selection, &run.coresets()),
    )?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &run.series)?;
    write_atomic(&ctx.paths.metrics, &csv)?;

    let p = &ctx.paths;
    let outputs = [
        ("prompts", &p.prompts),
        ("features", &p.features),
        ("coreset", &p.coreset),
        ("metrics", &p.metrics),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.display().to_string()))
    .collect();
    let manifest = RunManifest {
        command: "stream",
        version: env!("CARGO_PKG_VERSION"),
        config,
        outputs,
        summary: RunSummary {
            streamed: run.coresets().iter().map(|c| c.len()).sum(),
            evaluations: run.series.points.len(),
            a_auc: a_auc(&run.series).ok(),
            a_last: a_last(&run.series).ok(),
            memory_slots: run.memory.len(),
        },
    };
    write_json(&ctx.paths.manifest, &manifest)?;
    if let (Some(auc), Some(last)) = (manifest.summary.a_auc, manifest.summary.a_last) {
        println!("A_AUC {auc:.4}  A_last {last:.4}");
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    prediction: String,
    label: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionRecord {
    candidate: String,
    references: Vec<String>,
}

fn coverage_of_coreset(ctx: &Context) -> Result<Option<f64>, CliError> {
    if !ctx.paths.features.exists() {
        return Ok(None);
    }
    let config = &ctx.config;
    let samples = read_features(&ctx.paths.features)?;
    let chosen: Option<std::collections::HashSet<String>> = if ctx.paths.coreset.exists() {
        let file: CoresetFile = read_json(&ctx.paths.coreset)?;
        Some(file.selected.into_iter().map(|s| s.sample_id).collect())
    } else {
        None
    };
    let real = eval_sets(ctx)?;
    let k = config.evaluation.coverage_k;
    let mut per_concept = Vec::new();
    for (concept, group) in config
        .concepts
        .iter()
        .zip(split_by_concept(config, samples, "features")?)
    {
        let generated: Vec<FeatureVector> = group
            .into_iter()
            .filter(|s| chosen.as_ref().is_none_or(|c| c.contains(&s.sample_id)))
            .map(|s| s.feature)
            .collect();
        let reference = &real[&concept.concept_id];
        if reference.len() <= k {
            log::warn!(
                "coverage skipped: {} has {} real samples, k = {k}",
                concept.concept_id,
                reference.len()
            );
            return Ok(None);
        }
        per_concept.push(coverage(reference, &generated, k)?);
    }
    Ok(Some(
        per_concept.iter().sum::<f64>() / per_concept.len() as f64,
    ))
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let mut report = EvalReport::default();
    if ctx.paths.metrics.exists() {
        let series =
            read_metrics_csv(&read_text(&ctx.paths.metrics)?, Some(ctx.config.eval_every))?;
        if !series.points.is_empty() {
            report.a_auc = Some(a_auc(&series)?);
            report.a_last = Some(a_last(&series)?);
        }
    }
    report.coverage = coverage_of_coreset(ctx)?;
    if let Some(path) = &ctx.config.evaluation.predictions {
        let path = ctx.input_path(path);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in read_text(&path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            preds.push(rec.prediction);
            labels.push(rec.label);
        }
        report.macro_f1 = Some(macro_f1(&preds, &labels)?);
    }
    if let Some(path) = &ctx.config.evaluation.captions {
        let records: Vec<CaptionRecord> = read_json(&ctx.input_path(path))?;
        let pairs: Vec<(TokenizedSentence, Vec<TokenizedSentence>)> = records
            .iter()
            .map(|r| {
                (
                    TokenizedSentence::new(&r.candidate),
                    r.references
                        .iter()
                        .map(|s| TokenizedSentence::new(s))
                        .collect(),
                )
            })
            .collect();
        report.cider = Some(corpus_cider(&pairs, 4)?);
    }
    write_json(&ctx.paths.report, &report)?;
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(())
}
