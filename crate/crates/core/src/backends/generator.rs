use std::time::Duration;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pool::{Concept, FeatureVector, GeneratedSample};
use crate::error::{invalid, BackendError, Error, Result};
use crate::seeding::{rng_from, stable_hash};

/// Parameters of the synthetic stand-in for "text-to-image model followed by a
/// feature extractor": `feature = centroid(concept) + offset(generator) + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFeatureModel {
    pub dim: usize,
    /// Euclidean norm of every generator's bias vector.
    pub offset_norm: f64,
    /// Per-coordinate standard deviation of the Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for SyntheticFeatureModel {
    fn default() -> Self {
        Self {
            dim: 16,
            offset_norm: 0.5,
            noise_sigma: 0.3,
        }
    }
}

impl SyntheticFeatureModel {
    /// Per-concept centroid with entries uniform in [-1, 1].
    pub fn concept_centroid(&self, concept_id: &str, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(stable_hash(&["centroid", concept_id, &seed.to_string()]));
        (0..self.dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect()
    }

    /// Per-generator bias: a seeded random direction scaled to `offset_norm`.
    pub fn generator_offset(&self, generator_id: &str, seed: u64) -> Vec<f64> {
        if self.offset_norm == 0.0 {
            return vec![0.0; self.dim];
        }
        let mut rng = rng_from(stable_hash(&["offset", generator_id, &seed.to_string()]));
        let dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.into_iter()
            .map(|v| v / norm * self.offset_norm)
            .collect()
    }
}

pub fn mock_feature_generate(
    concept: &Concept,
    prompt_id: &str,
    generator_id: &str,
    seed: u64,
    model: &SyntheticFeatureModel,
) -> FeatureVector {
    let centroid = model.concept_centroid(&concept.concept_id, seed);
    let offset = model.generator_offset(generator_id, seed);
    let mut noise_rng = rng_from(stable_hash(&[
        "noise",
        &concept.concept_id,
        prompt_id,
        generator_id,
        &seed.to_string(),
    ]));
    let values = centroid
        .iter()
        .zip(&offset)
        .map(|(c, o)| {
            let eps: f64 = noise_rng.sample(StandardNormal);
            c + o + model.noise_sigma * eps
        })
        .collect();
    FeatureVector::new(values).expect("synthetic features are finite")
}

/// Stand-ins for real images of a concept: the centroid plus noise, with no
/// generator bias. Used as held-out evaluation data for synthetic runs.
pub fn mock_real_features(
    concept_id: &str,
    count: usize,
    seed: u64,
    model: &SyntheticFeatureModel,
) -> Vec<FeatureVector> {
    let centroid = model.concept_centroid(concept_id, seed);
    (0..count)
        .map(|i| {
            let mut rng = rng_from(stable_hash(&[
                "real",
                concept_id,
                &i.to_string(),
                &seed.to_string(),
            ]));
            let values = centroid
                .iter()
                .map(|c| c + model.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            FeatureVector::new(values).expect("synthetic features are finite")
        })
        .collect()
}

/// A text-to-image generator, observed through the features of its output.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;

    /// Renders one prompt. Returns the feature vector and, when the backend
    /// stores an image, a reference to it.
    fn render(
        &self,
        concept: &Concept,
        prompt_id: &str,
        prompt_text: &str,
    ) -> std::result::Result<(FeatureVector, Option<String>), BackendError>;
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub id: String,
    pub seed: u64,
    pub model: SyntheticFeatureModel,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>, seed: u64, model: SyntheticFeatureModel) -> Self {
        Self {
            id: id.into(),
            seed,
            model,
        }
    }
}

impl Generator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn render(
        &self,
        concept: &Concept,
        prompt_id: &str,
        _prompt_text: &str,
    ) -> std::result::Result<(FeatureVector, Option<String>), BackendError> {
        Ok((
            mock_feature_generate(concept, prompt_id, &self.id, self.seed, &self.model),
            None,
        ))
    }
}

/// Remote generator + feature service.
///
/// Sends `{"generator","concept","prompt_id","prompt"}` as a JSON POST and
/// expects `{"feature":[...], "payload_ref": optional string}` back.
pub struct HttpGenerator {
    id: String,
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct RenderReply {
    feature: Vec<f64>,
    #[serde(default)]
    payload_ref: Option<String>,
}

impl HttpGenerator {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: id.into(),
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Generator for HttpGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn render(
        &self,
        concept: &Concept,
        prompt_id: &str,
        prompt_text: &str,
    ) -> std::result::Result<(FeatureVector, Option<String>), BackendError> {
        let body = serde_json::json!({
            "generator": self.id,
            "concept": concept.name,
            "prompt_id": prompt_id,
            "prompt": prompt_text,
        });
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| BackendError::network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::network(e.to_string()))?;
        match status {
            200..=299 => {}
            429 => return Err(BackendError::rate_limit(format!("HTTP 429: {text}"))),
            _ => return Err(BackendError::protocol(format!("HTTP {status}: {text}"))),
        }
        let reply: RenderReply = serde_json::from_str(&text)
            .map_err(|e| BackendError::protocol(format!("unparseable body: {e}")))?;
        let feature =
            FeatureVector::new(reply.feature).map_err(|e| BackendError::protocol(e.to_string()))?;
        Ok((feature, reply.payload_ref))
    }
}

/// Renders every `(prompt_id, text)` with one generator. Output order follows
/// the prompt order regardless of how the calls are scheduled.
pub fn generate_samples(
    generator: &dyn Generator,
    prompts: &[(String, String)],
    concept: &Concept,
) -> Result<Vec<GeneratedSample>> {
    if prompts.is_empty() {
        return Err(invalid("no prompts to generate from"));
    }
    prompts
        .par_iter()
        .map(|(prompt_id, text)| {
            let (feature, payload_ref) =
                generator
                    .render(concept, prompt_id, text)
                    .map_err(|source| Error::PromptGeneration {
                        prompt_id: prompt_id.clone(),
                        source,
                    })?;
            Ok(GeneratedSample {
                sample_id: format!("{}:{}:{}", generator.id(), concept.concept_id, prompt_id),
                concept_id: concept.concept_id.clone(),
                generator_id: generator.id().to_string(),
                prompt_id: prompt_id.clone(),
                feature,
                payload_ref,
            })
        })
        .collect()
}
