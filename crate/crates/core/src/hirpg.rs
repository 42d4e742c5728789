//! Hierarchical recurrent prompt generation.
//!
//! Each concept gets a complete K-ary tree of prompts rooted at
//! `"A photo of {concept}"`. The children of a node are produced one at a
//! time; child `k` is asked for while the parent and its `k - 1` older
//! siblings are listed as prompts to avoid, so no request ever carries more
//! than `K` negatives.

use std::cmp::Ordering;

use log::warn;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatRequest};
use crate::error::{invalid, BackendError, Error, Result};
use crate::seeding::{rng_from, stable_hash};

const SYSTEM_PREAMBLE: &str =
    "To generate images using a text-to-image generative model, I need to create a prompt.";
const SYSTEM_NEGATIVES_HEADER: &str =
    "Here is a list of prompts that I have previously generated. \
     Please create a new prompt that does not overlap with the following prompts:";
const CONCEPT_TAG: &str = "Concept: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HirpgConfig {
    /// Children per internal node (K).
    pub branching: usize,
    /// Tree depth (D); the root sits at depth 0.
    pub depth: usize,
    /// Prompts sampled from the finished tree (N).
    pub prompt_budget: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_retry_limit() -> u32 {
    3
}

impl Default for HirpgConfig {
    fn default() -> Self {
        Self {
            branching: 7,
            depth: 2,
            prompt_budget: 50,
            retry_limit: default_retry_limit(),
            seed: 0,
        }
    }
}

impl HirpgConfig {
    pub fn new(branching: usize, depth: usize, prompt_budget: usize) -> Self {
        Self {
            branching,
            depth,
            prompt_budget,
            ..Self::default()
        }
    }

    pub fn node_count(&self) -> Result<usize> {
        node_count(self.branching, self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching == 0 {
            return Err(invalid("branching must be at least 1"));
        }
        if self.prompt_budget == 0 {
            return Err(invalid("prompt budget must be positive"));
        }
        let total = self.node_count()?;
        if self.prompt_budget > total {
            return Err(invalid(format!(
                "prompt budget {} exceeds the {total} nodes of a {}-ary tree of depth {}",
                self.prompt_budget, self.branching, self.depth
            )));
        }
        Ok(())
    }
}

/// Nodes in a complete K-ary tree of depth D: `(K^(D+1) - 1) / (K - 1)`, or
/// `D + 1` for the chain K = 1.
pub fn node_count(branching: usize, depth: usize) -> Result<usize> {
    if branching == 0 {
        return Err(invalid("branching must be at least 1"));
    }
    if branching == 1 {
        return Ok(depth + 1);
    }
    let overflow = || {
        invalid(format!(
            "{branching}-ary tree of depth {depth} is too large"
        ))
    };
    let exp = u32::try_from(depth + 1).map_err(|_| overflow())?;
    let power = branching.checked_pow(exp).ok_or_else(overflow)?;
    Ok((power - 1) / (branching - 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptNode {
    /// Dot-separated path from the root, e.g. `"0"`, `"0.3"`, `"0.3.1"`.
    pub node_id: String,
    pub concept_id: String,
    pub depth: usize,
    pub parent_id: Option<String>,
    /// 1-based position among siblings; `None` for the root.
    pub child_index: Option<usize>,
    pub text: String,
}

fn id_path(id: &str) -> Vec<u64> {
    id.split('.')
        .map(|s| s.parse().unwrap_or(u64::MAX))
        .collect()
}

/// Canonical node order: numeric comparison of the id paths, so `0.2`
/// precedes `0.10`.
pub fn compare_node_ids(a: &str, b: &str) -> Ordering {
    id_path(a).cmp(&id_path(b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTree {
    pub concept_id: String,
    pub config: HirpgConfig,
    pub nodes: Vec<PromptNode>,
}

impl PromptTree {
    pub fn root(&self) -> Option<&PromptNode> {
        self.nodes.first()
    }

    /// Checks structure against the config: size, root, parent links, and
    /// that every node above the bottom level has exactly K children.
    pub fn validate(&self) -> Result<()> {
        let expected = self.config.node_count()?;
        if self.nodes.len() != expected {
            return Err(invalid(format!(
                "tree has {} nodes, expected {expected}",
                self.nodes.len()
            )));
        }
        let root = &self.nodes[0];
        if root.node_id != "0" || root.depth != 0 || root.parent_id.is_some() {
            return Err(invalid("first node is not a well-formed root"));
        }
        if root.text != render_base_prompt(&self.concept_id) {
            return Err(invalid("root text is not the base prompt"));
        }
        let mut children = vec![0usize; self.nodes.len()];
        let position = |id: &str| self.nodes.iter().position(|n| n.node_id == id);
        for node in &self.nodes[1..] {
            let parent_id = node
                .parent_id
                .as_deref()
                .ok_or_else(|| invalid(format!("node {} has no parent", node.node_id)))?;
            let p = position(parent_id)
                .ok_or_else(|| invalid(format!("node {} has unknown parent", node.node_id)))?;
            if self.nodes[p].depth + 1 != node.depth {
                return Err(invalid(format!(
                    "node {} has inconsistent depth",
                    node.node_id
                )));
            }
            let k = node.child_index.unwrap_or(0);
            if node.node_id != format!("{parent_id}.{k}") || k == 0 || k > self.config.branching {
                return Err(invalid(format!(
                    "node {} has a bad child index",
                    node.node_id
                )));
            }
            if node.text.trim().is_empty() {
                return Err(invalid(format!("node {} has empty text", node.node_id)));
            }
            children[p] += 1;
        }
        for (node, count) in self.nodes.iter().zip(children) {
            let want = if node.depth < self.config.depth {
                self.config.branching
            } else {
                0
            };
            if count != want {
                return Err(invalid(format!(
                    "node {} has {count} children, expected {want}",
                    node.node_id
                )));
            }
        }
        if self
            .nodes
            .windows(2)
            .any(|w| compare_node_ids(&w[0].node_id, &w[1].node_id) != Ordering::Less)
        {
            return Err(invalid("nodes are not in canonical id order"));
        }
        Ok(())
    }
}

pub fn render_base_prompt(concept: &str) -> String {
    format!("A photo of {concept}")
}

/// Lowercased, whitespace-collapsed form used for duplicate detection.
pub fn normalize_prompt(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// System turn for one recurrent step: the fixed instruction followed by the
/// negatives as a numbered list, in order.
pub fn render_system_prompt(negatives: &[String]) -> Result<String> {
    if negatives.is_empty() {
        return Err(invalid("system prompt needs at least one negative example"));
    }
    let mut out = format!("{SYSTEM_PREAMBLE}\n{SYSTEM_NEGATIVES_HEADER}\n");
    for (i, negative) in negatives.iter().enumerate() {
        // List entries are one line each.
        let flat = negative.replace(['\n', '\r'], " ");
        out.push_str(&format!("{}. {flat}\n", i + 1));
    }
    Ok(out)
}

/// Inverse of [`render_system_prompt`]; `None` if `text` is not such a prompt.
pub fn parse_system_prompt(text: &str) -> Option<Vec<String>> {
    let (_, list) = text.split_once(SYSTEM_NEGATIVES_HEADER)?;
    let mut negatives = Vec::new();
    for line in list.lines().filter(|l| !l.trim().is_empty()) {
        let (num, rest) = line.split_once(". ")?;
        if num.trim().parse::<usize>().ok()? != negatives.len() + 1 {
            return None;
        }
        negatives.push(rest.to_string());
    }
    (!negatives.is_empty()).then_some(negatives)
}

pub fn render_user_turn(concept: &str) -> String {
    format!("{CONCEPT_TAG}{concept}\nReply with the new prompt only.")
}

pub fn parse_concept(user_text: &str) -> Option<&str> {
    user_text
        .lines()
        .find_map(|l| l.strip_prefix(CONCEPT_TAG))
        .map(str::trim)
        .filter(|c| !c.is_empty())
}

/// Single-request prompt list used by the flat ("vanilla") baseline.
pub fn render_flat_request(concept: &str, n: usize) -> String {
    format!(
        "To generate images using a text-to-image generation model, I need to create {n} prompts. \
         Keep the domain photorealistic and use different visual scenes and visual styles or \
         different color profiles/ palettes. Please create {n} prompts that does not overlap with \
         each other. Please ensure that each response includes the word '{concept}'. For example, \
         'A photo of a {concept}.', 'A detailed sketch of {concept}.', 'A hyper-realistic portrait \
         of {concept}.', etc."
    )
}

pub fn parse_flat_request_count(text: &str) -> Option<usize> {
    let rest = text.split_once("I need to create ")?.1;
    let (count, tail) = rest.split_once(' ')?;
    tail.starts_with("prompts").then(|| count.parse().ok())?
}

const STYLES: [&str; 24] = [
    "photo",
    "watercolor painting",
    "charcoal sketch",
    "detailed oil painting",
    "pencil drawing",
    "3D render",
    "pixel art image",
    "linocut print",
    "macro photograph",
    "polaroid snapshot",
    "cinematic still",
    "pen-and-ink illustration",
    "pastel drawing",
    "mosaic",
    "claymation still",
    "stylized isometric illustration",
    "vintage postcard",
    "false-color infrared photograph",
    "stained glass depiction",
    "low-poly render",
    "gouache painting",
    "comic panel",
    "drone photograph",
    "long-exposure photograph",
];

const SETTINGS: [&str; 32] = [
    "on a misty harbor",
    "in a sunlit meadow",
    "inside a cluttered workshop",
    "on a rain-soaked street",
    "in a snowy forest",
    "on a desert dune",
    "beside a mountain lake",
    "in a neon-lit alley",
    "on a wooden kitchen table",
    "in an empty train station",
    "at a crowded market",
    "on a rocky coastline",
    "in a greenhouse",
    "under a highway bridge",
    "in a library reading room",
    "on a rooftop garden",
    "in a bamboo grove",
    "at a frozen pond",
    "in a dusty attic",
    "on a farm field",
    "in a modern museum hall",
    "beside a campfire",
    "in a shallow reef",
    "on a city balcony",
    "in an autumn park",
    "on a volcanic plain",
    "in a glass skyscraper lobby",
    "in a cobblestone courtyard",
    "along a riverbank",
    "in a children's playroom",
    "on a foggy pier",
    "in a laboratory",
];

const TIMES: [&str; 16] = [
    "at dawn",
    "at dusk",
    "at noon",
    "at midnight",
    "during a thunderstorm",
    "in golden hour light",
    "under an overcast sky",
    "in heavy fog",
    "during light snowfall",
    "under a full moon",
    "in harsh midday sun",
    "at blue hour",
    "during a drizzle",
    "under stadium floodlights",
    "by candlelight",
    "in early spring light",
];

const PALETTES: [&str; 16] = [
    "in muted teal tones",
    "in warm amber hues",
    "in high-contrast monochrome",
    "in pastel colors",
    "in saturated primaries",
    "in earthy browns",
    "in cool silver tones",
    "in faded sepia",
    "in vivid magenta and cyan",
    "in soft greens",
    "in deep crimson shades",
    "in icy blues",
    "in golden yellows",
    "in dusty rose tones",
    "in charcoal greys",
    "in candy colors",
];

const ANGLES: [&str; 12] = [
    "seen from above",
    "seen from a low angle",
    "in close-up",
    "from a distance",
    "from behind",
    "in profile",
    "through a window",
    "reflected in water",
    "framed by foliage",
    "with shallow depth of field",
    "in a wide panorama",
    "at eye level",
];

const MOODS: [&str; 12] = [
    "with a serene mood",
    "with a playful mood",
    "with a melancholic mood",
    "with a dramatic mood",
    "with a whimsical mood",
    "with an eerie mood",
    "with a nostalgic mood",
    "with a tense mood",
    "with a cozy mood",
    "with a triumphant mood",
    "with a dreamy mood",
    "with a gritty mood",
];

/// Deterministic stand-in for one LLM reply.
///
/// Emits `"A {style} of {concept} {qualifier}"` with every slot picked from a
/// fixed lexicon by a stable hash of `(negatives, seed)`. The result never
/// matches a negative after normalization; in the rare case it would, the hash
/// is appended.
pub fn mock_llm_generate(concept: &str, negatives: &[String], seed: u64) -> String {
    let mut parts: Vec<String> = vec!["mock-llm".into(), seed.to_string()];
    parts.extend(negatives.iter().cloned());
    let mut h = stable_hash(&parts);
    let mut pick = |options: &[&'static str]| {
        let choice = options[(h % options.len() as u64) as usize];
        h /= options.len() as u64;
        choice
    };
    let style = pick(&STYLES);
    let setting = pick(&SETTINGS);
    let time = pick(&TIMES);
    let palette = pick(&PALETTES);
    let angle = pick(&ANGLES);
    let mood = pick(&MOODS);
    let text = format!("A {style} of {concept} {setting} {time}, {palette}, {angle}, {mood}");
    if crate::backends::collides_with(&text, negatives) {
        format!("{text} #{}", crate::backends::fallback_tag(negatives, seed))
    } else {
        text
    }
}

/// First meaningful line of a reply, without list markers or wrapping quotes.
fn clean_reply(reply: &str) -> String {
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    strip_list_marker(line)
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim()
        .to_string()
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(['.', ')', ':']) {
            return rest.trim_start();
        }
    }
    line
}

fn disambiguate(text: &str, negatives: &[String]) -> String {
    (2..)
        .map(|i| format!("{text} ({i})"))
        .find(|candidate| !crate::backends::collides_with(candidate, negatives))
        .expect("suffix search is unbounded")
}

/// Generates the `K` children of `parent`, oldest sibling first.
///
/// Child `k` is requested with negatives `[parent, sibling_1, .., sibling_{k-1}]`.
/// A failing call or a reply that repeats a negative is retried up to
/// `retry_limit` times; a persistent repeat is kept with a numeric suffix,
/// a persistent failure aborts with the child index.
pub fn rpg_expand(
    parent: &PromptNode,
    branching: usize,
    llm: &dyn ChatBackend,
    retry_limit: u32,
) -> Result<Vec<String>> {
    if parent.text.trim().is_empty() {
        return Err(invalid(format!("node {} has empty text", parent.node_id)));
    }
    if branching == 0 {
        return Err(invalid("branching must be at least 1"));
    }
    let user = render_user_turn(&parent.concept_id);
    let mut siblings: Vec<String> = Vec::with_capacity(branching);
    for child_index in 1..=branching {
        let mut negatives = Vec::with_capacity(child_index);
        negatives.push(parent.text.clone());
        negatives.extend(siblings.iter().cloned());
        let request = ChatRequest::new(render_system_prompt(&negatives)?, user.clone());

        let mut attempt = 0;
        let child = loop {
            let outcome = llm.complete(&request);
            let last_try = attempt >= retry_limit;
            match outcome {
                Ok(reply) => {
                    let text = clean_reply(&reply);
                    if !text.is_empty() && !crate::backends::collides_with(&text, &negatives) {
                        break text;
                    }
                    if !last_try {
                        attempt += 1;
                        continue;
                    }
                    if text.is_empty() {
                        return Err(Error::ChildGeneration {
                            parent_id: parent.node_id.clone(),
                            child_index,
                            source: BackendError::protocol("empty reply"),
                        });
                    }
                    warn!(
                        "child {child_index} of node {} repeats a negative after {} retries",
                        parent.node_id, retry_limit
                    );
                    break disambiguate(&text, &negatives);
                }
                Err(source) if last_try => {
                    return Err(Error::ChildGeneration {
                        parent_id: parent.node_id.clone(),
                        child_index,
                        source,
                    })
                }
                Err(_) => attempt += 1,
            }
        };
        siblings.push(child);
    }
    Ok(siblings)
}

/// Builds the complete tree level by level. Subtrees on the same level are
/// expanded concurrently; the result is sorted canonically, so scheduling
/// never changes the output.
pub fn build_tree(
    concept: &str,
    config: &HirpgConfig,
    llm: &dyn ChatBackend,
) -> Result<PromptTree> {
    config.validate()?;
    let root = PromptNode {
        node_id: "0".into(),
        concept_id: concept.to_string(),
        depth: 0,
        parent_id: None,
        child_index: None,
        text: render_base_prompt(concept),
    };
    let mut nodes = vec![root.clone()];
    let mut frontier = vec![root];
    for depth in 0..config.depth {
        let expanded: Vec<Vec<String>> = frontier
            .par_iter()
            .map(|parent| rpg_expand(parent, config.branching, llm, config.retry_limit))
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(frontier.len() * config.branching);
        for (parent, texts) in frontier.iter().zip(expanded) {
            for (i, text) in texts.into_iter().enumerate() {
                next.push(PromptNode {
                    node_id: format!("{}.{}", parent.node_id, i + 1),
                    concept_id: concept.to_string(),
                    depth: depth + 1,
                    parent_id: Some(parent.node_id.clone()),
                    child_index: Some(i + 1),
                    text,
                });
            }
        }
        nodes.extend(next.iter().cloned());
        frontier = next;
    }
    nodes.sort_by(|a, b| compare_node_ids(&a.node_id, &b.node_id));
    Ok(PromptTree {
        concept_id: concept.to_string(),
        config: *config,
        nodes,
    })
}

/// Uniform sample of `n` nodes without replacement, root included, returned
/// in canonical id order.
pub fn sample_nodes(tree: &PromptTree, n: usize, seed: u64) -> Result<Vec<&PromptNode>> {
    if n == 0 || n > tree.nodes.len() {
        return Err(invalid(format!(
            "cannot sample {n} prompts from {} nodes",
            tree.nodes.len()
        )));
    }
    let mut rng = rng_from(seed);
    let mut picked = index::sample(&mut rng, tree.nodes.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &tree.nodes[i]).collect())
}

pub fn sample_prompts(tree: &PromptTree, n: usize, seed: u64) -> Result<Vec<String>> {
    Ok(sample_nodes(tree, n, seed)?
        .into_iter()
        .map(|node| node.text.clone())
        .collect())
}

/// Baseline without recurrence or hierarchy: one request for `n` prompts.
/// Lines that do not mention the concept are discarded.
pub fn flat_generate(concept: &str, n: usize, llm: &dyn ChatBackend) -> Result<Vec<String>> {
    if n == 0 {
        return Err(invalid("flat generation needs n >= 1"));
    }
    let mut request = ChatRequest::new(
        render_flat_request(concept, n),
        format!("{CONCEPT_TAG}{concept}\nReply with one prompt per line."),
    );
    request.max_tokens = None;
    let reply = llm.complete(&request)?;
    let needle = concept.to_lowercase();
    let prompts: Vec<String> = reply
        .lines()
        .map(|l| {
            strip_list_marker(l)
                .trim_matches(|c| c == '"' || c == '\'')
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty() && l.to_lowercase().contains(&needle))
        .collect();
    if prompts.len() < n {
        return Err(Error::Format {
            expected: n,
            got: prompts.len(),
        });
    }
    Ok(prompts.into_iter().take(n).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptNodeRecord {
    pub id: String,
    pub parent: Option<String>,
    pub depth: usize,
    pub text: String,
}

/// One tree as stored in `prompts.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTreeFile {
    pub concept: String,
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub nodes: Vec<PromptNodeRecord>,
}

impl From<&PromptTree> for PromptTreeFile {
    fn from(tree: &PromptTree) -> Self {
        let mut nodes: Vec<PromptNodeRecord> = tree
            .nodes
            .iter()
            .map(|n| PromptNodeRecord {
                id: n.node_id.clone(),
                parent: n.parent_id.clone(),
                depth: n.depth,
                text: n.text.clone(),
            })
            .collect();
        nodes.sort_by(|a, b| compare_node_ids(&a.id, &b.id));
        Self {
            concept: tree.concept_id.clone(),
            k: tree.config.branching,
            d: tree.config.depth,
            seed: tree.config.seed,
            nodes,
        }
    }
}

impl PromptTreeFile {
    /// Rebuilds and validates the tree. The file does not store the prompt
    /// budget, so the caller supplies it.
    pub fn into_tree(self, prompt_budget: usize) -> Result<PromptTree> {
        let config = HirpgConfig {
            branching: self.k,
            depth: self.d,
            prompt_budget,
            retry_limit: default_retry_limit(),
            seed: self.seed,
        };
        let mut nodes: Vec<PromptNode> = self
            .nodes
            .into_iter()
            .map(|r| PromptNode {
                child_index: r
                    .parent
                    .as_ref()
                    .and_then(|_| r.id.rsplit('.').next())
                    .and_then(|k| k.parse().ok()),
                node_id: r.id,
                concept_id: self.concept.clone(),
                depth: r.depth,
                parent_id: r.parent,
                text: r.text,
            })
            .collect();
        nodes.sort_by(|a, b| compare_node_ids(&a.node_id, &b.node_id));
        let tree = PromptTree {
            concept_id: self.concept,
            config,
            nodes,
        };
        tree.validate()?;
        config.validate()?;
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockChat, RecordingChat};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn node(text: &str) -> PromptNode {
        PromptNode {
            node_id: "0".into(),
            concept_id: "dog".into(),
            depth: 0,
            parent_id: None,
            child_index: None,
            text: text.into(),
        }
    }

    #[test]
    fn system_prompt_embeds_negatives_in_order() {
        let one = render_system_prompt(&["A photo of dog".into()]).unwrap();
        assert!(one.starts_with(SYSTEM_PREAMBLE));
        assert!(one.contains("does not overlap"));
        assert!(one.contains("1. A photo of dog"));
        assert_eq!(
            one,
            render_system_prompt(&["A photo of dog".into()]).unwrap()
        );

        let negs: Vec<String> = vec!["p1".into(), "p2".into(), "p3".into()];
        let three = render_system_prompt(&negs).unwrap();
        let (a, b, c) = (
            three.find("p1").unwrap(),
            three.find("p2").unwrap(),
            three.find("p3").unwrap(),
        );
        assert!(a < b && b < c);
        assert_eq!(parse_system_prompt(&three).unwrap(), negs);
    }

    #[test]
    fn empty_negatives_are_rejected() {
        assert!(matches!(
            render_system_prompt(&[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn node_count_formula() {
        assert_eq!(node_count(7, 2).unwrap(), 57);
        assert_eq!(node_count(2, 1).unwrap(), 3);
        assert_eq!(node_count(3, 2).unwrap(), 13);
        assert_eq!(node_count(1, 4).unwrap(), 5);
        assert_eq!(node_count(5, 0).unwrap(), 1);
        assert!(node_count(usize::MAX, 3).is_err());
    }

    #[test]
    fn config_rejects_budget_above_tree_size() {
        assert!(HirpgConfig::new(7, 2, 57).validate().is_ok());
        assert!(HirpgConfig::new(7, 2, 58).validate().is_err());
        assert!(HirpgConfig::new(1, 2, 4).validate().is_err());
        assert!(HirpgConfig::new(0, 2, 1).validate().is_err());
    }

    #[test]
    fn expand_passes_growing_negative_lists() {
        let rec = RecordingChat::new(MockChat::new(5));
        let kids = rpg_expand(&node("A photo of dog"), 3, &rec, 3).unwrap();
        assert_eq!(kids.len(), 3);
        let lens: Vec<usize> = rec
            .requests()
            .iter()
            .map(|r| parse_system_prompt(&r.system_text).unwrap().len())
            .collect();
        assert_eq!(lens, vec![1, 2, 3]);
        let third = parse_system_prompt(&rec.requests()[2].system_text).unwrap();
        assert_eq!(third[0], "A photo of dog");
        assert_eq!(&third[1..], &kids[..2]);
    }

    #[test]
    fn expand_with_single_child() {
        let rec = RecordingChat::new(MockChat::new(5));
        rpg_expand(&node("A photo of dog"), 1, &rec, 3).unwrap();
        let reqs = rec.requests();
        assert_eq!(reqs.len(), 1);
        assert_eq!(
            parse_system_prompt(&reqs[0].system_text).unwrap(),
            vec!["A photo of dog".to_string()]
        );
    }

    #[test]
    fn expand_is_deterministic() {
        let a = rpg_expand(&node("A photo of dog"), 4, &MockChat::new(8), 3).unwrap();
        let b = rpg_expand(&node("A photo of dog"), 4, &MockChat::new(8), 3).unwrap();
        assert_eq!(a, b);
    }

    struct Flaky {
        fail_on: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, r: &ChatRequest) -> std::result::Result<String, BackendError> {
            let n = parse_system_prompt(&r.system_text).unwrap().len();
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n == self.fail_on {
                Err(BackendError::network("boom"))
            } else {
                Ok(format!("prompt {n} of dog"))
            }
        }
    }

    #[test]
    fn persistent_failure_reports_child_index_after_retries() {
        let flaky = Flaky {
            fail_on: 2,
            calls: Default::default(),
        };
        match rpg_expand(&node("A photo of dog"), 3, &flaky, 2) {
            Err(Error::ChildGeneration { child_index, .. }) => assert_eq!(child_index, 2),
            other => panic!("unexpected {other:?}"),
        }
        // one call for child 1, then 1 + 2 retries for child 2
        assert_eq!(flaky.calls.load(std::sync::atomic::Ordering::SeqCst), 4);
    }

    struct Parrot;

    impl ChatBackend for Parrot {
        fn complete(&self, r: &ChatRequest) -> std::result::Result<String, BackendError> {
            Ok(format!(
                "  \"{}\"  ",
                parse_system_prompt(&r.system_text).unwrap()[0].to_uppercase()
            ))
        }
    }

    #[test]
    fn duplicates_get_a_numeric_suffix_after_retries() {
        let kids = rpg_expand(&node("A photo of dog"), 2, &Parrot, 1).unwrap();
        assert_eq!(kids[0], "A PHOTO OF DOG (2)");
        assert_eq!(kids[1], "A PHOTO OF DOG (3)");
    }

    #[test]
    fn reply_cleanup() {
        assert_eq!(
            clean_reply("\n  1. \"A sketch of dog\"\nextra"),
            "A sketch of dog"
        );
        assert_eq!(clean_reply("- A sketch"), "A sketch");
        assert_eq!(clean_reply("3D render of dog"), "3D render of dog");
    }

    #[test]
    fn tree_sizes_match_the_closed_form() {
        for (k, d, n) in [(7, 2, 57), (2, 1, 3), (3, 2, 13)] {
            let tree = build_tree("dog", &HirpgConfig::new(k, d, 1), &MockChat::new(1)).unwrap();
            assert_eq!(tree.nodes.len(), n);
            assert_eq!(tree.root().unwrap().text, "A photo of dog");
            tree.validate().unwrap();
        }
    }

    #[test]
    fn canonical_order_is_numeric() {
        let tree = build_tree("cat", &HirpgConfig::new(11, 1, 1), &MockChat::new(1)).unwrap();
        let ids: Vec<&str> = tree.nodes.iter().map(|n| n.node_id.as_str()).collect();
        assert_eq!(&ids[..3], &["0", "0.1", "0.2"]);
        assert_eq!(ids.last(), Some(&"0.11"));
    }

    #[test]
    fn sampling_fifty_of_fifty_seven() {
        let tree = build_tree("dog", &HirpgConfig::new(7, 2, 50), &MockChat::new(2)).unwrap();
        let picked = sample_prompts(&tree, 50, 99).unwrap();
        assert_eq!(picked.len(), 50);
        assert_eq!(picked.iter().collect::<HashSet<_>>().len(), 50);
        assert_eq!(picked, sample_prompts(&tree, 50, 99).unwrap());
        let all = sample_prompts(&tree, 57, 0).unwrap();
        let texts: Vec<String> = tree.nodes.iter().map(|n| n.text.clone()).collect();
        assert_eq!(all, texts);
        assert!(sample_prompts(&tree, 58, 0).is_err());
        let ordered = sample_nodes(&tree, 20, 4).unwrap();
        assert!(ordered
            .windows(2)
            .all(|w| compare_node_ids(&w[0].node_id, &w[1].node_id) == Ordering::Less));
    }

    #[test]
    fn sampling_marginals_are_uniform() {
        // Each node's inclusion indicator is Bernoulli(N / |nodes|).
        let tree = build_tree("dog", &HirpgConfig::new(7, 2, 50), &MockChat::new(2)).unwrap();
        let (n, total, trials) = (50usize, tree.nodes.len(), 20_000usize);
        let mut hits = vec![0usize; total];
        for seed in 0..trials as u64 {
            for node in sample_nodes(&tree, n, seed).unwrap() {
                let i = tree
                    .nodes
                    .iter()
                    .position(|x| x.node_id == node.node_id)
                    .unwrap();
                hits[i] += 1;
            }
        }
        let p = n as f64 / total as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, h) in hits.iter().enumerate() {
            let freq = *h as f64 / trials as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "node {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn flat_generation_with_mock() {
        let five = flat_generate("dog", 5, &MockChat::new(3)).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(five.iter().collect::<HashSet<_>>().len(), 5);
        assert!(five.iter().all(|p| p.to_lowercase().contains("dog")));
        assert_eq!(flat_generate("dog", 1, &MockChat::new(3)).unwrap().len(), 1);
    }

    struct ThreeLines;

    impl ChatBackend for ThreeLines {
        fn complete(&self, _: &ChatRequest) -> std::result::Result<String, BackendError> {
            Ok("1. a dog\n2. the dog\n3. big dog\n".into())
        }
    }

    #[test]
    fn short_flat_reply_is_a_format_error() {
        match flat_generate("dog", 5, &ThreeLines) {
            Err(Error::Format { expected, got }) => assert_eq!((expected, got), (5, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_request_round_trip() {
        assert_eq!(
            parse_flat_request_count(&render_flat_request("dog", 50)),
            Some(50)
        );
        assert_eq!(parse_flat_request_count("nothing here"), None);
    }

    #[test]
    fn tree_file_round_trip() {
        let tree = build_tree("dog", &HirpgConfig::new(3, 2, 13), &MockChat::new(2)).unwrap();
        let file = PromptTreeFile::from(&tree);
        let json = serde_json::to_string(&file).unwrap();
        let back: PromptTreeFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_tree(13).unwrap(), tree);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn node_count_law_and_negative_bound(k in 1usize..=7, d in 0usize..=3, seed in any::<u64>()) {
            let rec = RecordingChat::new(MockChat::new(seed));
            let tree = build_tree("fox", &HirpgConfig::new(k, d, 1), &rec).unwrap();
            prop_assert_eq!(tree.nodes.len(), node_count(k, d).unwrap());
            tree.validate().unwrap();
            for r in rec.requests() {
                prop_assert!(parse_system_prompt(&r.system_text).unwrap().len() <= k);
            }
            let distinct: HashSet<String> =
                tree.nodes.iter().map(|n| normalize_prompt(&n.text)).collect();
            prop_assert_eq!(distinct.len(), tree.nodes.len());
        }
    }
}
