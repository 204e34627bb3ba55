//! Strategy extraction, name normalization, deduplication and
//! classification into the 15-category taxonomy.
//!
//! Model replies use a line-oriented block grammar:
//!
//! ```text
//! NAME: <technique>          (raw extraction; `CATEGORY:` for re-extraction)
//! REASON: <rationale>
//! ```
//!
//! Keys are case-insensitive and may carry a list bullet (`-`, `*`, `1.`).
//! A non-key line directly below a field continues it (joined with a space);
//! a blank line closes the field. Text before the first block is ignored.
//! A reply without any block is a format error that keeps the raw reply.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::CodePair;
use crate::orchestrate::client::{ChatCall, ChatMessage, ChatModel, ClientError};
use crate::orchestrate::prompts::PromptTemplates;
use crate::template::{self, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("strategy name {0:?} is empty after normalization")]
    InvalidName(String),
    #[error("unparseable extraction reply ({reason}): {raw:?}")]
    Format { raw: String, reason: String },
    #[error("re-extraction reply uses category {label:?} outside the taxonomy: {raw:?}")]
    OutOfTaxonomy { raw: String, label: String },
    #[error("pair {0} received no strategies")]
    EmptyAnnotation(String),
    #[error("coverage of an empty result list is undefined")]
    EmptyResults,
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl StrategyError {
    /// Errors caused by the reply's content rather than by the service.
    pub fn is_reply_error(&self) -> bool {
        matches!(
            self,
            StrategyError::Format { .. }
                | StrategyError::OutOfTaxonomy { .. }
                | StrategyError::EmptyAnnotation(_)
                | StrategyError::InvalidName(_)
        )
    }
}

/// A raw `(name, desc)` technique as extracted from a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub desc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizedStrategy {
    pub category: String,
    pub desc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPair {
    #[serde(flatten)]
    pub pair: CodePair,
    pub strategies: Vec<CategorizedStrategy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub label: String,
    pub description: String,
}

/// The fixed 15-category label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTaxonomy {
    categories: Vec<Category>,
}

const BUILTIN_TAXONOMY: &str = include_str!("../data/taxonomy-v1.jsonl");

impl CategoryTaxonomy {
    pub const SIZE: usize = 15;

    /// The shipped taxonomy (`data/taxonomy-v1.jsonl`).
    pub fn builtin() -> Self {
        Self::from_jsonl(BUILTIN_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, StrategyError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| StrategyError::Taxonomy(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// One `{label, description}` record per line.
    pub fn from_jsonl(text: &str) -> Result<Self, StrategyError> {
        let categories = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Category>(l).map_err(|e| StrategyError::Taxonomy(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(categories)
    }

    pub fn new(categories: Vec<Category>) -> Result<Self, StrategyError> {
        if categories.len() != Self::SIZE {
            return Err(StrategyError::Taxonomy(format!(
                "expected {} categories, found {}",
                Self::SIZE,
                categories.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &categories {
            let key = normalize_name(&c.label)?;
            if !seen.insert(key) {
                return Err(StrategyError::Taxonomy(format!("duplicate label {:?}", c.label)));
            }
            if c.description.trim().is_empty() {
                return Err(StrategyError::Taxonomy(format!(
                    "label {:?} has no description",
                    c.label
                )));
            }
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.label.as_str())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels().any(|l| l == label)
    }

    /// Canonical label whose normalized form equals the normalized `answer`.
    pub fn match_label(&self, answer: &str) -> Option<&str> {
        let key = normalize_name(answer).ok()?;
        self.categories
            .iter()
            .find(|c| normalize_name(&c.label).is_ok_and(|l| l == key))
            .map(|c| c.label.as_str())
    }

    /// Numbered `label: description` lines for prompts.
    pub fn prompt_listing(&self) -> String {
        self.categories
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}: {}", i + 1, c.label, c.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_jsonl(&self) -> String {
        self.categories
            .iter()
            .map(|c| serde_json::to_string(c).expect("category serializes") + "\n")
            .collect()
    }
}

fn is_edge_junk(c: char) -> bool {
    c.is_whitespace() || !(c.is_alphanumeric() || c == '+' || c == '#')
}

/// Case-folds, strips leading/trailing punctuation and collapses whitespace.
/// `+` and `#` survive at the edges so names like "C++" stay intact.
pub fn normalize_name(name: &str) -> Result<String, StrategyError> {
    let lower = name.to_lowercase();
    let trimmed = lower.trim_matches(is_edge_junk);
    let collapsed = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(StrategyError::InvalidName(name.to_string()));
    }
    Ok(collapsed)
}

/// First occurrence per normalized name, in input order. Strategies whose
/// name normalizes to nothing are dropped.
pub fn dedup(strategies: &[Strategy]) -> Vec<Strategy> {
    let mut seen = HashSet::new();
    strategies
        .iter()
        .filter(|s| normalize_name(&s.name).is_ok_and(|key| seen.insert(key)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Head,
    Reason,
}

fn strip_bullet(line: &str) -> &str {
    let line = line.trim_start();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest.trim_start();
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

fn split_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let line = strip_bullet(line).trim_start_matches('*');
    let (head, rest) = line.split_once(':')?;
    let head = head.trim().trim_end_matches('*').trim();
    head.eq_ignore_ascii_case(key)
        .then(|| rest.trim_start_matches('*').trim())
}

/// Parses `<head_key>:` / `REASON:` blocks into `(head, reason)` tuples.
pub fn parse_blocks(reply: &str, head_key: &str) -> Result<Vec<(String, String)>, StrategyError> {
    let format_err = |reason: String| StrategyError::Format {
        raw: reply.to_string(),
        reason,
    };
    let mut blocks: Vec<(String, Option<String>)> = Vec::new();
    let mut open: Option<Field> = None;
    for (n, line) in reply.lines().enumerate() {
        if line.trim().is_empty() {
            open = None;
            continue;
        }
        if let Some(value) = split_key(line, head_key) {
            blocks.push((value.to_string(), None));
            open = Some(Field::Head);
        } else if let Some(value) = split_key(line, "REASON") {
            let Some(last) = blocks.last_mut() else {
                return Err(format_err(format!("line {}: REASON before any {head_key}", n + 1)));
            };
            if last.1.is_some() {
                return Err(format_err(format!("line {}: second REASON for one {head_key}", n + 1)));
            }
            last.1 = Some(value.to_string());
            open = Some(Field::Reason);
        } else if let (Some(field), Some(last)) = (open, blocks.last_mut()) {
            let target = match field {
                Field::Head => &mut last.0,
                Field::Reason => last.1.as_mut().expect("reason is open"),
            };
            if !target.is_empty() {
                target.push(' ');
            }
            target.push_str(line.trim());
        }
    }
    if blocks.is_empty() {
        return Err(format_err(format!("no {head_key}:/REASON: blocks")));
    }
    blocks
        .into_iter()
        .enumerate()
        .map(|(i, (head, reason))| {
            let reason = reason.unwrap_or_default();
            if head.trim().is_empty() || reason.trim().is_empty() {
                return Err(format_err(format!(
                    "block {} is missing its {head_key} or REASON",
                    i + 1
                )));
            }
            Ok((head, reason))
        })
        .collect()
}

/// Parses a raw extraction reply into strategies.
pub fn parse_extraction(reply: &str) -> Result<Vec<Strategy>, StrategyError> {
    parse_blocks(reply, "NAME")?
        .into_iter()
        .map(|(name, desc)| {
            normalize_name(&name).map_err(|_| StrategyError::Format {
                raw: reply.to_string(),
                reason: format!("unusable strategy name {name:?}"),
            })?;
            Ok(Strategy { name, desc })
        })
        .collect()
}

/// Parses a category-grounded reply; every category must be a taxonomy label.
/// Exact duplicate `(category, desc)` entries collapse to one.
pub fn parse_reextraction(reply: &str, taxonomy: &CategoryTaxonomy) -> Result<Vec<CategorizedStrategy>, StrategyError> {
    let mut out: Vec<CategorizedStrategy> = Vec::new();
    for (label, desc) in parse_blocks(reply, "CATEGORY")? {
        let category = taxonomy
            .match_label(&label)
            .ok_or_else(|| StrategyError::OutOfTaxonomy {
                raw: reply.to_string(),
                label: label.clone(),
            })?;
        let entry = CategorizedStrategy {
            category: category.to_string(),
            desc,
        };
        if !out.contains(&entry) {
            out.push(entry);
        }
    }
    Ok(out)
}

pub async fn extract_strategies(
    pair: &CodePair,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
) -> Result<Vec<Strategy>, StrategyError> {
    let prompt = template::render(
        &templates.extractor,
        &[
            ("slow_code", &pair.slow.source_code),
            ("fast_code", &pair.fast.source_code),
        ],
    )?;
    let reply = client.complete(&ChatCall::new(vec![ChatMessage::user(prompt)])).await?;
    parse_extraction(&reply)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Category(String),
    Unclassified,
}

impl Classification {
    pub fn label(&self) -> Option<&str> {
        match self {
            Classification::Category(l) => Some(l),
            Classification::Unclassified => None,
        }
    }
}

/// Maps a model answer onto a taxonomy label (first nonempty line only).
pub fn interpret_classification(answer: &str, taxonomy: &CategoryTaxonomy) -> Classification {
    answer
        .lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| taxonomy.match_label(l))
        .map_or(Classification::Unclassified, |l| {
            Classification::Category(l.to_string())
        })
}

/// Asks the model for the category of one strategy name. The taxonomy goes
/// in the system message, the name is the user message.
pub async fn classify(
    name: &str,
    taxonomy: &CategoryTaxonomy,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
) -> Result<Classification, StrategyError> {
    let system = template::render(&templates.classifier, &[("taxonomy", &taxonomy.prompt_listing())])?;
    let call = ChatCall::new(vec![ChatMessage::system(system), ChatMessage::user(name)]);
    let answer = client.complete(&call).await?;
    Ok(interpret_classification(&answer, taxonomy))
}

/// Classified / total.
pub fn coverage_rate(results: &[Classification]) -> Result<f64, StrategyError> {
    if results.is_empty() {
        return Err(StrategyError::EmptyResults);
    }
    let classified = results.iter().filter(|c| c.label().is_some()).count();
    Ok(classified as f64 / results.len() as f64)
}

pub async fn reextract_with_categories(
    pair: &CodePair,
    taxonomy: &CategoryTaxonomy,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
) -> Result<AnnotatedPair, StrategyError> {
    let prompt = template::render(
        &templates.reextractor,
        &[
            ("slow_code", &pair.slow.source_code),
            ("fast_code", &pair.fast.source_code),
            ("taxonomy", &taxonomy.prompt_listing()),
        ],
    )?;
    let reply = client.complete(&ChatCall::new(vec![ChatMessage::user(prompt)])).await?;
    let strategies = parse_reextraction(&reply, taxonomy)?;
    if strategies.is_empty() {
        return Err(StrategyError::EmptyAnnotation(pair.pair_id.clone()));
    }
    Ok(AnnotatedPair {
        pair: pair.clone(),
        strategies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotateMode {
    /// One category-grounded call per pair.
    #[default]
    Reextract,
    /// Raw extraction, then one classification call per unique name.
    Classify,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedPair {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AnnotateSummary {
    pub pairs_in: usize,
    pub pairs_annotated: usize,
    pub strategies_extracted: usize,
    pub unique_names: usize,
    pub unclassified_strategies: usize,
    /// Share of unique names that landed in a category (classify mode).
    pub coverage_rate: Option<f64>,
    /// Share of extracted strategies dropped as unclassified (classify mode).
    pub strategy_drop_rate: Option<f64>,
    pub dropped: Vec<DroppedPair>,
}

#[derive(Debug, Clone)]
pub struct AnnotateOutcome {
    /// Sorted by pair_id.
    pub annotated: Vec<AnnotatedPair>,
    pub summary: AnnotateSummary,
}

/// Annotates every pair with at most `concurrency` requests in flight.
/// Pairs whose reply is unusable are dropped and listed in the summary;
/// service failures abort the run.
pub async fn annotate_corpus(
    pairs: &[CodePair],
    taxonomy: &CategoryTaxonomy,
    client: Arc<dyn ChatModel>,
    templates: &PromptTemplates,
    mode: AnnotateMode,
    concurrency: usize,
) -> Result<AnnotateOutcome, StrategyError> {
    let concurrency = concurrency.max(1);
    let mut summary = AnnotateSummary {
        pairs_in: pairs.len(),
        ..Default::default()
    };
    let mut annotated = Vec::new();

    match mode {
        AnnotateMode::Reextract => {
            let results: Vec<_> = stream::iter(pairs)
                .map(|pair| {
                    let client = client.clone();
                    async move {
                        (
                            pair,
                            reextract_with_categories(pair, taxonomy, client.as_ref(), templates).await,
                        )
                    }
                })
                .buffered(concurrency)
                .collect()
                .await;
            for (pair, result) in results {
                match result {
                    Ok(a) => {
                        summary.strategies_extracted += a.strategies.len();
                        annotated.push(a);
                    }
                    Err(e) if e.is_reply_error() => summary.dropped.push(DroppedPair {
                        pair_id: pair.pair_id.clone(),
                        reason: e.to_string(),
                    }),
                    Err(e) => return Err(e),
                }
            }
        }
        AnnotateMode::Classify => {
            let extracted: Vec<_> = stream::iter(pairs)
                .map(|pair| {
                    let client = client.clone();
                    async move { (pair, extract_strategies(pair, client.as_ref(), templates).await) }
                })
                .buffered(concurrency)
                .collect()
                .await;
            let mut per_pair = Vec::new();
            let mut all = Vec::new();
            for (pair, result) in extracted {
                match result {
                    Ok(strategies) => {
                        all.extend(strategies.iter().cloned());
                        per_pair.push((pair, strategies));
                    }
                    Err(e) if e.is_reply_error() => summary.dropped.push(DroppedPair {
                        pair_id: pair.pair_id.clone(),
                        reason: e.to_string(),
                    }),
                    Err(e) => return Err(e),
                }
            }
            let uniques = dedup(&all);
            let labels: Vec<(String, Classification)> = stream::iter(uniques)
                .map(|s| {
                    let client = client.clone();
                    async move {
                        let class = classify(&s.name, taxonomy, client.as_ref(), templates).await?;
                        Ok::<_, StrategyError>((normalize_name(&s.name)?, class))
                    }
                })
                .buffered(concurrency)
                .try_collect()
                .await?;
            summary.unique_names = labels.len();
            let classes: Vec<Classification> = labels.iter().map(|(_, c)| c.clone()).collect();
            summary.coverage_rate = coverage_rate(&classes).ok();
            let lookup: HashMap<String, Classification> = labels.into_iter().collect();

            summary.strategies_extracted = all.len();
            for (pair, strategies) in per_pair {
                let mut kept: Vec<CategorizedStrategy> = Vec::new();
                for s in strategies {
                    let class = normalize_name(&s.name).ok().and_then(|k| lookup.get(&k));
                    match class.and_then(|c| c.label()) {
                        Some(label) => {
                            let entry = CategorizedStrategy {
                                category: label.to_string(),
                                desc: s.desc,
                            };
                            if !kept.contains(&entry) {
                                kept.push(entry);
                            }
                        }
                        None => summary.unclassified_strategies += 1,
                    }
                }
                if kept.is_empty() {
                    summary.dropped.push(DroppedPair {
                        pair_id: pair.pair_id.clone(),
                        reason: "no strategy could be classified".into(),
                    });
                } else {
                    annotated.push(AnnotatedPair {
                        pair: pair.clone(),
                        strategies: kept,
                    });
                }
            }
            if summary.strategies_extracted > 0 {
                summary.strategy_drop_rate =
                    Some(summary.unclassified_strategies as f64 / summary.strategies_extracted as f64);
            }
        }
    }

    annotated.sort_by(|a, b| a.pair.pair_id.cmp(&b.pair.pair_id));
    summary.dropped.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    summary.pairs_annotated = annotated.len();
    Ok(AnnotateOutcome { annotated, summary })
}

/// Category → number of strategies per label, for quick inspection.
pub fn category_counts(pairs: &[AnnotatedPair]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in pairs.iter().flat_map(|p| &p.strategies) {
        *counts.entry(s.category.clone()).or_insert(0) += 1;
    }
    counts
}
