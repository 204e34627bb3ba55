//! Submission trajectories and slow→fast pair reconstruction.
//!
//! A trajectory is every submission one user made on one problem, ordered by
//! submission index. Pairs always point at the trajectory's final accepted
//! submission; a final that is more than `factor` times slower than the
//! problem's global best is swapped for that best submission.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sha256_hex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("duplicate submission (user {user_id}, problem {problem_id}, seq {seq_index})")]
    DuplicateSubmission {
        user_id: String,
        problem_id: String,
        seq_index: u64,
    },
    #[error("submission (user {user_id}, problem {problem_id}, seq {seq_index}) has invalid runtime {runtime}")]
    InvalidRuntime {
        user_id: String,
        problem_id: String,
        seq_index: u64,
        runtime: f64,
    },
    #[error("replacement factor must be > 1, got {0}")]
    InvalidFactor(f64),
    #[error("pair {0} is missing a measured runtime")]
    MissingRuntime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Failed,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub user_id: String,
    pub problem_id: String,
    pub seq_index: u64,
    pub source_code: String,
    /// Total runtime in seconds; absent until measured.
    #[serde(default)]
    pub runtime_seconds: Option<f64>,
    pub verdict: Verdict,
}

impl Submission {
    fn measured_accepted(&self) -> Option<f64> {
        match (self.verdict, self.runtime_seconds) {
            (Verdict::Accepted, Some(t)) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    SameUser,
    CrossUser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodePair {
    pub pair_id: String,
    pub problem_id: String,
    pub slow: Submission,
    pub fast: Submission,
    pub origin: Origin,
}

impl CodePair {
    /// Builds a pair, deriving `origin` and `pair_id` from the two submissions.
    pub fn new(slow: Submission, fast: Submission) -> Self {
        let origin = if slow.user_id == fast.user_id {
            Origin::SameUser
        } else {
            Origin::CrossUser
        };
        CodePair {
            pair_id: pair_id(&slow.problem_id, &slow, &fast),
            problem_id: slow.problem_id.clone(),
            slow,
            fast,
            origin,
        }
    }
}

/// Stable identifier: hash over problem id and both endpoints' (user, seq).
pub fn pair_id(problem_id: &str, slow: &Submission, fast: &Submission) -> String {
    let key = serde_json::json!([problem_id, slow.user_id, slow.seq_index, fast.user_id, fast.seq_index]);
    sha256_hex(key.to_string())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrajectoryKey {
    pub problem_id: String,
    pub user_id: String,
}

/// Submissions grouped into per-(problem, user) trajectories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    trajectories: BTreeMap<TrajectoryKey, Vec<Submission>>,
    // problem_id -> (user_id, seq_index) of accepted, measured submissions
    accepted: BTreeMap<String, Vec<(String, u64)>>,
}

impl Corpus {
    pub fn trajectories(&self) -> impl Iterator<Item = (&TrajectoryKey, &[Submission])> {
        self.trajectories.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn trajectory(&self, problem_id: &str, user_id: &str) -> Option<&[Submission]> {
        self.trajectories
            .get(&TrajectoryKey {
                problem_id: problem_id.to_string(),
                user_id: user_id.to_string(),
            })
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.trajectories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn problem_ids(&self) -> impl Iterator<Item = &str> {
        self.accepted.keys().map(String::as_str)
    }

    fn submission(&self, problem_id: &str, user_id: &str, seq: u64) -> Option<&Submission> {
        self.trajectory(problem_id, user_id)?
            .iter()
            .find(|s| s.seq_index == seq)
    }
}

/// Groups submissions into trajectories ordered by `seq_index`.
pub fn build_trajectories(submissions: Vec<Submission>) -> Result<Corpus, CorpusError> {
    let mut trajectories: BTreeMap<TrajectoryKey, Vec<Submission>> = BTreeMap::new();
    for s in submissions {
        if let Some(t) = s.runtime_seconds {
            if !t.is_finite() || t < 0.0 {
                return Err(CorpusError::InvalidRuntime {
                    user_id: s.user_id,
                    problem_id: s.problem_id,
                    seq_index: s.seq_index,
                    runtime: t,
                });
            }
        }
        let key = TrajectoryKey {
            problem_id: s.problem_id.clone(),
            user_id: s.user_id.clone(),
        };
        trajectories.entry(key).or_default().push(s);
    }

    let mut accepted: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
    for (key, subs) in trajectories.iter_mut() {
        subs.sort_by_key(|s| s.seq_index);
        if let Some(w) = subs.windows(2).find(|w| w[0].seq_index == w[1].seq_index) {
            return Err(CorpusError::DuplicateSubmission {
                user_id: key.user_id.clone(),
                problem_id: key.problem_id.clone(),
                seq_index: w[0].seq_index,
            });
        }
        let entry = accepted.entry(key.problem_id.clone()).or_default();
        entry.extend(
            subs.iter()
                .filter(|s| s.measured_accepted().is_some())
                .map(|s| (s.user_id.clone(), s.seq_index)),
        );
    }
    accepted.retain(|_, v| !v.is_empty());

    Ok(Corpus { trajectories, accepted })
}

/// One `(earlier, final)` pair per earlier accepted submission that is at
/// least `min_speedup` times slower than the trajectory's final accepted one.
pub fn final_pairs(corpus: &Corpus, min_speedup: f64) -> Vec<CodePair> {
    let mut pairs = Vec::new();
    for (_, subs) in corpus.trajectories() {
        let measured: Vec<&Submission> = subs.iter().filter(|s| s.measured_accepted().is_some()).collect();
        let Some((last, earlier)) = measured.split_last() else {
            continue;
        };
        let t_final = last.runtime_seconds.unwrap_or_default();
        for slow in earlier {
            let t_slow = slow.runtime_seconds.unwrap_or_default();
            if t_slow / t_final >= min_speedup {
                pairs.push(CodePair::new((*slow).clone(), (*last).clone()));
            }
        }
    }
    pairs
}

/// Fastest accepted submission for `problem_id`; ties go to the
/// lexicographically smallest `(user_id, seq_index)`.
pub fn global_best<'a>(corpus: &'a Corpus, problem_id: &str) -> Option<&'a Submission> {
    corpus
        .accepted
        .get(problem_id)?
        .iter()
        .filter_map(|(user, seq)| corpus.submission(problem_id, user, *seq))
        .min_by(|a, b| {
            let ta = a.runtime_seconds.unwrap_or(f64::INFINITY);
            let tb = b.runtime_seconds.unwrap_or(f64::INFINITY);
            ta.total_cmp(&tb)
                .then_with(|| a.user_id.cmp(&b.user_id))
                .then_with(|| a.seq_index.cmp(&b.seq_index))
        })
}

/// Swaps the pair's target for `best` when `T(fast) > factor * T(best)`.
/// The comparison is strict: equality keeps the user's own final code.
pub fn apply_global_best_replacement(pair: CodePair, best: &Submission, factor: f64) -> Result<CodePair, CorpusError> {
    if !(factor > 1.0) || !factor.is_finite() {
        return Err(CorpusError::InvalidFactor(factor));
    }
    let (Some(t_fast), Some(t_best)) = (pair.fast.runtime_seconds, best.runtime_seconds) else {
        return Err(CorpusError::MissingRuntime(pair.pair_id));
    };
    if t_fast > factor * t_best {
        Ok(CodePair::new(pair.slow, best.clone()))
    } else {
        Ok(pair)
    }
}

/// Final-submission pairing followed by global-best replacement: the full
/// reconstruction of the reference pair set.
pub fn reconstruct(corpus: &Corpus, min_speedup: f64, factor: f64) -> Result<Vec<CodePair>, CorpusError> {
    if !(factor > 1.0) || !factor.is_finite() {
        return Err(CorpusError::InvalidFactor(factor));
    }
    final_pairs(corpus, min_speedup)
        .into_iter()
        .map(|pair| match global_best(corpus, &pair.problem_id) {
            Some(best) => apply_global_best_replacement(pair, best, factor),
            None => Ok(pair),
        })
        .collect()
}
