//! Reward, group-normalized advantages and the clipped GRPO objective.
//!
//! Everything here is a pure function. The trainer that owns the policy
//! supplies per-token log-probabilities; this module only does the math.
//!
//! Conventions that the formulas leave open:
//! - advantages use the population standard deviation, and a group whose
//!   rewards are (numerically) all equal gets zero advantages;
//! - the KL term uses the per-token estimator `r - ln r - 1` with
//!   `r = exp(logp_ref - logp_new)`;
//! - the objective is a token mean per member, then a mean over members.

use serde::{Deserialize, Serialize};

use crate::evalbench::EvalResult;
use crate::strategy::CategorizedStrategy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RlError {
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("group of {0} is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("member {member}: {reason}")]
    Alignment { member: usize, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncorrectPolicy {
    /// Compiled but wrong output scores like a regression: -1.
    #[default]
    AsRegression,
    /// Compiled but wrong output scores like a compile failure: -omega.
    AsCompileFailure,
}

fn d_omega() -> f64 {
    100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "d_omega")]
    pub omega: f64,
    #[serde(default)]
    pub incorrect_policy: IncorrectPolicy,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            omega: d_omega(),
            incorrect_policy: IncorrectPolicy::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(RlError::Config(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

fn d_group() -> usize {
    4
}
fn d_eps() -> f64 {
    0.2
}
fn d_beta() -> f64 {
    0.04
}
fn d_std_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    #[serde(default = "d_group")]
    pub group_size: usize,
    #[serde(default = "d_eps")]
    pub clip_epsilon: f64,
    #[serde(default = "d_beta")]
    pub kl_beta: f64,
    #[serde(default = "d_std_eps")]
    pub degenerate_std_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: d_group(),
            clip_epsilon: d_eps(),
            kl_beta: d_beta(),
            degenerate_std_epsilon: d_std_eps(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.group_size < 2 {
            return Err(RlError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(RlError::Config(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0) || !self.kl_beta.is_finite() {
            return Err(RlError::Config(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.degenerate_std_epsilon > 0.0) {
            return Err(RlError::Config("degenerate_std_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Δ = t_slow / t_gen.
pub fn speedup_factor(t_slow: f64, t_gen: f64) -> Result<f64, RlError> {
    for (name, t) in [("t_slow", t_slow), ("t_gen", t_gen)] {
        if !(t > 0.0) || !t.is_finite() {
            return Err(RlError::InvalidMeasurement(format!("{name} = {t}")));
        }
    }
    Ok(t_slow / t_gen)
}

/// Piecewise reward: -omega for compile failures, the incorrect policy for
/// wrong output, -1 for a correct regression and Δ² otherwise.
pub fn reward(eval: &EvalResult, t_slow: f64, config: &RewardConfig) -> Result<f64, RlError> {
    if !eval.compiled {
        return Ok(-config.omega);
    }
    if !eval.correct {
        return Ok(match config.incorrect_policy {
            IncorrectPolicy::AsRegression => -1.0,
            IncorrectPolicy::AsCompileFailure => -config.omega,
        });
    }
    let t_gen = eval
        .runtime_seconds
        .ok_or_else(|| RlError::InvalidInput("correct result without a runtime".into()))?;
    let delta = speedup_factor(t_slow, t_gen)?;
    Ok(if delta < 1.0 { -1.0 } else { delta * delta })
}

/// A_i = (R_i - mean) / std with the population std; all zeros when the
/// std falls below `eps`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(RlError::InvalidInput(format!("non-finite reward {bad}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` for a ratio that is already known.
pub fn clipped_surrogate_from_ratio(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// Clipped surrogate with ρ = exp(logp_new - logp_old).
pub fn clipped_surrogate_term(logp_new: f64, logp_old: f64, advantage: f64, eps: f64) -> Result<f64, RlError> {
    if !logp_new.is_finite() || !logp_old.is_finite() || !advantage.is_finite() {
        return Err(RlError::InvalidInput(format!(
            "logp_new={logp_new} logp_old={logp_old} advantage={advantage}"
        )));
    }
    let ratio = (logp_new - logp_old).exp();
    if !ratio.is_finite() {
        return Err(RlError::NumericOverflow(format!("ratio exp({})", logp_new - logp_old)));
    }
    Ok(clipped_surrogate_from_ratio(ratio, advantage, eps))
}

/// `r - ln r - 1` with r = exp(logp_ref - logp_new), evaluated as
/// `expm1(d) - d` (series for tiny d) to stay positive whenever d != 0.
pub fn kl_penalty_term(logp_new: f64, logp_ref: f64) -> Result<f64, RlError> {
    if !logp_new.is_finite() || !logp_ref.is_finite() {
        return Err(RlError::InvalidInput(format!(
            "logp_new={logp_new} logp_ref={logp_ref}"
        )));
    }
    let d = logp_ref - logp_new;
    if !d.exp().is_finite() {
        return Err(RlError::NumericOverflow(format!("ratio exp({d})")));
    }
    let value = if d.abs() < 1e-4 {
        d * d * (0.5 + d * (1.0 / 6.0 + d / 24.0))
    } else {
        d.exp_m1() - d
    };
    Ok(value.max(0.0))
}

/// Per-token log-probabilities of one member's generated sequence under the
/// current, sampling and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberLogprobs {
    pub new: Vec<f64>,
    pub old: Vec<f64>,
    #[serde(rename = "ref")]
    pub reference: Vec<f64>,
}

/// `1/G Σ_i 1/|o_i| Σ_t [clipped_i,t - β·KL_i,t]`.
pub fn grpo_objective(advantages: &[f64], logprobs: &[MemberLogprobs], config: &GrpoConfig) -> Result<f64, RlError> {
    if advantages.len() != logprobs.len() {
        return Err(RlError::InvalidInput(format!(
            "{} advantages for {} members",
            advantages.len(),
            logprobs.len()
        )));
    }
    if logprobs.is_empty() {
        return Err(RlError::GroupTooSmall(0));
    }
    let mut total = 0.0;
    for (member, (adv, lp)) in advantages.iter().zip(logprobs).enumerate() {
        let len = lp.new.len();
        if len == 0 {
            return Err(RlError::Alignment {
                member,
                reason: "empty token sequence".into(),
            });
        }
        if lp.old.len() != len || lp.reference.len() != len {
            return Err(RlError::Alignment {
                member,
                reason: format!("lengths new={} old={} ref={}", len, lp.old.len(), lp.reference.len()),
            });
        }
        let mut surrogate = 0.0;
        let mut kl = 0.0;
        for t in 0..len {
            surrogate += clipped_surrogate_term(lp.new[t], lp.old[t], *adv, config.clip_epsilon)?;
            kl += kl_penalty_term(lp.new[t], lp.reference[t])?;
        }
        total += (surrogate - config.kl_beta * kl) / len as f64;
    }
    Ok(total / logprobs.len() as f64)
}

/// One sampled candidate inside a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub index: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    pub strategies: Vec<CategorizedStrategy>,
    #[serde(default)]
    pub generated_code: Option<String>,
    #[serde(default)]
    pub eval: Option<EvalResult>,
    /// Why the member has no evaluation (malformed plan, no code block, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub reward: f64,
    pub advantage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<MemberLogprobs>,
}

/// G candidates for one prompt, with rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub prompt_id: String,
    pub slow_code: String,
    pub baseline_runtime_seconds: f64,
    pub members: Vec<GroupMember>,
}

impl GroupSample {
    /// Reward of one member; members without an evaluation get -omega.
    pub fn member_reward(&self, member: &GroupMember, config: &RewardConfig) -> Result<f64, RlError> {
        match &member.eval {
            Some(eval) => reward(eval, self.baseline_runtime_seconds, config),
            None => Ok(-config.omega),
        }
    }

    /// Recomputes every reward and the group's advantages in place.
    pub fn rescore(&mut self, reward_config: &RewardConfig, grpo: &GrpoConfig) -> Result<(), RlError> {
        let rewards = self
            .members
            .iter()
            .map(|m| self.member_reward(m, reward_config))
            .collect::<Result<Vec<_>, _>>()?;
        let advantages = group_advantages(&rewards, grpo.degenerate_std_epsilon)?;
        for ((m, r), a) in self.members.iter_mut().zip(rewards).zip(advantages) {
            m.reward = r;
            m.advantage = a;
        }
        Ok(())
    }

    /// Objective over members that carry log-probabilities (all must).
    pub fn objective(&self, grpo: &GrpoConfig) -> Result<f64, RlError> {
        let advantages: Vec<f64> = self.members.iter().map(|m| m.advantage).collect();
        let logprobs = self
            .members
            .iter()
            .map(|m| {
                m.logprobs.clone().ok_or_else(|| RlError::Alignment {
                    member: m.index,
                    reason: "no logprobs".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        grpo_objective(&advantages, &logprobs, grpo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::{RunConfig, TestOutcome, TestStatus};

    fn eval(correct: bool, runtime: f64) -> EvalResult {
        let per_test = vec![TestOutcome {
            id: "1".into(),
            passed: correct,
            status: if correct {
                TestStatus::Passed
            } else {
                TestStatus::WrongAnswer
            },
            wall_seconds: runtime,
        }];
        EvalResult::judged(per_test, correct.then_some(runtime), 10.0, &RunConfig::default()).unwrap()
    }

    #[test]
    fn reward_table() {
        let cfg = RewardConfig::default();
        let failed = EvalResult::compile_failure("x".into(), 10.0, &RunConfig::default());
        assert_eq!(reward(&failed, 10.0, &cfg).unwrap(), -100.0);
        assert_eq!(reward(&eval(true, 20.0), 10.0, &cfg).unwrap(), -1.0);
        assert_eq!(reward(&eval(true, 10.0), 10.0, &cfg).unwrap(), 1.0);
        assert_eq!(reward(&eval(true, 2.0), 6.0, &cfg).unwrap(), 9.0);
        assert_eq!(reward(&eval(false, 1.0), 10.0, &cfg).unwrap(), -1.0);
        let strict = RewardConfig {
            incorrect_policy: IncorrectPolicy::AsCompileFailure,
            ..cfg
        };
        assert_eq!(reward(&eval(false, 1.0), 10.0, &strict).unwrap(), -100.0);
    }

    #[test]
    fn speedup_factor_examples() {
        assert_eq!(speedup_factor(10.0, 5.0).unwrap(), 2.0);
        assert_eq!(speedup_factor(5.0, 10.0).unwrap(), 0.5);
        assert_eq!(speedup_factor(7.0, 7.0).unwrap(), 1.0);
        assert!(speedup_factor(0.0, 1.0).is_err());
        assert!(speedup_factor(1.0, -1.0).is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[2.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[5.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0], 1e-8), Err(RlError::GroupTooSmall(1)));
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate_term(-1.3, -1.3, 0.7, 0.2).unwrap(), 0.7);
        let ln2 = 2f64.ln();
        assert!((clipped_surrogate_term(ln2, 0.0, 1.0, 0.2).unwrap() - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate_term(ln2, 0.0, -1.0, 0.2).unwrap() + 2.0).abs() < 1e-12);
        assert!(matches!(
            clipped_surrogate_term(800.0, 0.0, 1.0, 0.2),
            Err(RlError::NumericOverflow(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty_term(-0.5, -0.5).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((kl_penalty_term(0.0, 1.0).unwrap() - (e - 2.0)).abs() < 1e-15);
        assert!((kl_penalty_term(1.0, 0.0).unwrap() - 1.0 / e).abs() < 1e-15);
        assert!(kl_penalty_term(-1.0, -1.0 + 1e-12).unwrap() > 0.0);
    }

    #[test]
    fn objective_examples() {
        let cfg = GrpoConfig::default();
        let same = MemberLogprobs {
            new: vec![-1.0, -2.0],
            old: vec![-1.0, -2.0],
            reference: vec![-1.0, -2.0],
        };
        assert_eq!(
            grpo_objective(&[1.0, -1.0], &[same.clone(), same.clone()], &cfg).unwrap(),
            0.0
        );

        let short = MemberLogprobs {
            new: vec![-1.0],
            ..same.clone()
        };
        assert!(matches!(
            grpo_objective(&[1.0], &[short], &cfg),
            Err(RlError::Alignment { member: 0, .. })
        ));
    }

    #[test]
    fn config_validation() {
        GrpoConfig::default().validate().unwrap();
        RewardConfig::default().validate().unwrap();
        let bad = GrpoConfig {
            clip_epsilon: 1.0,
            ..GrpoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RewardConfig {
            omega: 0.0,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
