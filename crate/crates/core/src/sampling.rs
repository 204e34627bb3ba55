//! Rarity-weighted scoring and round-robin balanced selection.
//!
//! Frequencies and the per-pair `k` both count *distinct* categories per
//! pair, so a pair that lists one category twice (with different
//! rationales) contributes once. The score of a pair is the mean of the
//! reciprocal frequencies of its categories.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::strategy::AnnotatedPair;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplingError {
    #[error("pair {0} has no strategies")]
    NoStrategies(String),
    #[error("category {category:?} of pair {pair_id} is missing from the frequency table")]
    MissingCategory { pair_id: String, category: String },
    #[error("budget must be positive")]
    InvalidBudget,
    #[error("pair_id {0} appears more than once")]
    DuplicatePair(String),
    #[error("distribution of an empty pair list is undefined")]
    Empty,
}

/// Category label → number of pairs carrying it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn get(&self, category: &str) -> Option<u64> {
        self.counts.get(category).copied()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Distinct categories of a pair, sorted.
pub fn distinct_categories(pair: &AnnotatedPair) -> BTreeSet<&str> {
    pair.strategies.iter().map(|s| s.category.as_str()).collect()
}

pub fn strategy_frequencies(pairs: &[AnnotatedPair]) -> FrequencyTable {
    let mut counts = BTreeMap::new();
    for pair in pairs {
        for category in distinct_categories(pair) {
            *counts.entry(category.to_string()).or_insert(0) += 1;
        }
    }
    FrequencyTable { counts }
}

/// `(1/k) Σ 1/f(c)` over the pair's distinct categories.
pub fn rarity_score(pair: &AnnotatedPair, freqs: &FrequencyTable) -> Result<f64, SamplingError> {
    let categories = distinct_categories(pair);
    if categories.is_empty() {
        return Err(SamplingError::NoStrategies(pair.pair.pair_id.clone()));
    }
    let mut sum = 0.0;
    for category in &categories {
        let f = freqs
            .get(category)
            .filter(|f| *f > 0)
            .ok_or_else(|| SamplingError::MissingCategory {
                pair_id: pair.pair.pair_id.clone(),
                category: category.to_string(),
            })?;
        sum += 1.0 / f as f64;
    }
    Ok(sum / categories.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    #[serde(flatten)]
    pub pair: AnnotatedPair,
    /// 0-based round-robin round in which the pair was taken.
    pub selection_round: usize,
    pub rarity_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalancedSubset {
    pub selections: Vec<Selection>,
}

impl BalancedSubset {
    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    pub fn pairs(&self) -> Vec<AnnotatedPair> {
        self.selections.iter().map(|s| s.pair.clone()).collect()
    }
}

/// Ranks pairs per problem by score (descending, ties by pair_id), then takes
/// one pair per problem per round, problems in ascending id order, until the
/// budget is met or every pair is taken.
pub fn balanced_select(
    pairs: &[AnnotatedPair],
    budget: usize,
    freqs: &FrequencyTable,
) -> Result<BalancedSubset, SamplingError> {
    if budget == 0 {
        return Err(SamplingError::InvalidBudget);
    }
    let mut seen = HashSet::new();
    let mut by_problem: BTreeMap<&str, Vec<(f64, &AnnotatedPair)>> = BTreeMap::new();
    for pair in pairs {
        if !seen.insert(pair.pair.pair_id.as_str()) {
            return Err(SamplingError::DuplicatePair(pair.pair.pair_id.clone()));
        }
        let score = rarity_score(pair, freqs)?;
        by_problem.entry(&pair.pair.problem_id).or_default().push((score, pair));
    }
    for ranked in by_problem.values_mut() {
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.pair.pair_id.cmp(&b.1.pair.pair_id))
        });
    }

    let mut selections = Vec::with_capacity(budget.min(pairs.len()));
    let mut round = 0;
    'rounds: loop {
        let mut took_any = false;
        for ranked in by_problem.values() {
            if let Some((score, pair)) = ranked.get(round) {
                selections.push(Selection {
                    pair: (*pair).clone(),
                    selection_round: round,
                    rarity_score: *score,
                });
                took_any = true;
                if selections.len() == budget {
                    break 'rounds;
                }
            }
        }
        if !took_any {
            break;
        }
        round += 1;
    }
    Ok(BalancedSubset { selections })
}

/// Category → percentage of pairs that carry it (shares can sum past 100).
pub fn category_distribution(pairs: &[AnnotatedPair]) -> Result<BTreeMap<String, f64>, SamplingError> {
    if pairs.is_empty() {
        return Err(SamplingError::Empty);
    }
    let n = pairs.len() as f64;
    Ok(strategy_frequencies(pairs)
        .counts
        .into_iter()
        .map(|(c, count)| (c, 100.0 * count as f64 / n))
        .collect())
}

/// Shannon entropy (nats) of the category shares renormalized to sum to 1.
pub fn entropy(distribution: &BTreeMap<String, f64>) -> f64 {
    let total: f64 = distribution.values().sum();
    if total <= 0.0 {
        return 0.0;
    }
    distribution
        .values()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub category: String,
    pub before_percent: f64,
    pub after_percent: f64,
}

/// Before/after category shares over the union of categories, by label.
pub fn distribution_report(
    before: &[AnnotatedPair],
    after: &[AnnotatedPair],
) -> Result<Vec<DistributionRow>, SamplingError> {
    let b = category_distribution(before)?;
    let a = category_distribution(after)?;
    let labels: BTreeSet<&String> = b.keys().chain(a.keys()).collect();
    Ok(labels
        .into_iter()
        .map(|label| DistributionRow {
            category: label.clone(),
            before_percent: b.get(label).copied().unwrap_or(0.0),
            after_percent: a.get(label).copied().unwrap_or(0.0),
        })
        .collect())
}
