//! Planner / optimizer flows over chat-completions endpoints.
//!
//! - single step: one model emits `[SUGG/]…[/SUGG][OPT/]…[/OPT]`;
//! - plan only: the same format cut at `[/SUGG]` with a stop sequence;
//! - two step: a planner's strategies are handed to an optimizer model that
//!   rewrites the program;
//! - group sampling: G two-step candidates per prompt, evaluated and scored
//!   for GRPO.
//!
//! Group sampling runs in phases over the whole batch: every planner call,
//! then every optimizer call, then evaluation. With a request journal
//! attached to the clients, all generations are on disk before the first
//! compile starts, and a rerun after a crash replays them instead of calling
//! the models again.

pub mod client;
pub mod journal;
pub mod mock;
pub mod prompts;

use std::sync::Arc;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::evalbench::{EvalError, EvalJob, EvalResult, Harness, TestCase};
use crate::rlmath::{group_advantages, GroupMember, GroupSample, GrpoConfig, RewardConfig, RlError};
use crate::serialize::{self, Mode, ParseError, ParsedOutput, Strictness};
use crate::strategy::{CategorizedStrategy, CategoryTaxonomy};
use crate::template::{self, TemplateError};

pub use client::{ChatCall, ChatClientConfig, ChatMessage, ChatModel, ClientError, HttpChatClient};
pub use journal::Journal;
pub use mock::{MockConfig, MockRule, MockServer};
pub use prompts::PromptTemplates;

const SUGG_CLOSE: &str = serialize::ControlTokens::STANDARD.sugg_close;

#[derive(Debug, thiserror::Error)]
pub enum OrchestrateError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("planner returned an empty plan: {raw:?}")]
    EmptyPlan { raw: String },
    #[error("planner reply is malformed ({error}): {raw:?}")]
    MalformedPlan { raw: String, error: ParseError },
    #[error("group {prompt_id}: only {obtained} of {expected} members could be generated: {detail}")]
    IncompleteGroup {
        prompt_id: String,
        expected: usize,
        obtained: usize,
        detail: String,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("evaluation worker failed: {0}")]
    Worker(String),
}

impl OrchestrateError {
    /// The planner answered, but not with a usable plan.
    pub fn is_malformed_plan(&self) -> bool {
        matches!(
            self,
            OrchestrateError::EmptyPlan { .. } | OrchestrateError::MalformedPlan { .. }
        )
    }
}

/// Result of a single-step call; malformed replies are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SingleStepOutcome {
    Parsed { output: ParsedOutput, raw: String },
    Malformed { raw: String, error: String },
}

pub async fn single_step_optimize(
    slow_code: &str,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
    seed: Option<u64>,
) -> Result<SingleStepOutcome, OrchestrateError> {
    let prompt = template::render(&templates.single_step, &[("slow_code", slow_code)])?;
    let call = ChatCall::new(vec![ChatMessage::user(prompt)]).with_seed(seed);
    let raw = client.complete(&call).await?;
    Ok(match serialize::unpack(&raw, Mode::PlanAndCode, Strictness::Lenient) {
        Ok(output) => SingleStepOutcome::Parsed { output, raw },
        Err(e) => SingleStepOutcome::Malformed {
            raw,
            error: e.to_string(),
        },
    })
}

/// Parses a plan-only reply, restoring `[/SUGG]` when the provider dropped
/// the stop sequence.
pub fn parse_plan_reply(raw: &str) -> Result<Vec<CategorizedStrategy>, OrchestrateError> {
    let mut text = raw.to_string();
    if !text.contains(SUGG_CLOSE) {
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(SUGG_CLOSE);
    }
    match serialize::unpack(&text, Mode::PlanOnly, Strictness::Lenient) {
        Ok(parsed) => Ok(parsed.strategies),
        Err(ParseError::EmptyStrategySpan) => Err(OrchestrateError::EmptyPlan { raw: raw.to_string() }),
        Err(error) => Err(OrchestrateError::MalformedPlan {
            raw: raw.to_string(),
            error,
        }),
    }
}

fn planner_call(
    slow_code: &str,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    seed: Option<u64>,
) -> Result<ChatCall, OrchestrateError> {
    let prompt = template::render(
        &templates.planner,
        &[("slow_code", slow_code), ("taxonomy", &taxonomy.prompt_listing())],
    )?;
    Ok(ChatCall::new(vec![ChatMessage::user(prompt)])
        .with_seed(seed)
        .with_stop(SUGG_CLOSE))
}

/// The plan, and the reply it came from.
pub async fn plan_only_raw(
    slow_code: &str,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    seed: Option<u64>,
) -> Result<(Vec<CategorizedStrategy>, String), OrchestrateError> {
    let raw = client
        .complete(&planner_call(slow_code, templates, taxonomy, seed)?)
        .await?;
    let strategies = parse_plan_reply(&raw)?;
    Ok((strategies, raw))
}

pub async fn plan_only(
    slow_code: &str,
    client: &dyn ChatModel,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    seed: Option<u64>,
) -> Result<Vec<CategorizedStrategy>, OrchestrateError> {
    plan_only_raw(slow_code, client, templates, taxonomy, seed)
        .await
        .map(|(s, _)| s)
}

fn optimizer_call(
    slow_code: &str,
    strategies: &[CategorizedStrategy],
    templates: &PromptTemplates,
    seed: Option<u64>,
) -> Result<ChatCall, OrchestrateError> {
    let listing = strategies
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}: {}", i + 1, s.category, s.desc))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = template::render(
        &templates.optimizer,
        &[("slow_code", slow_code), ("strategies", &listing)],
    )?;
    Ok(ChatCall::new(vec![ChatMessage::user(prompt)]).with_seed(seed))
}

/// Content of the last closed fenced block; otherwise the `[OPT/]` span of a
/// leniently parsed packed reply; otherwise nothing.
pub fn extract_code_block(reply: &str) -> Option<String> {
    let mut last: Option<String> = None;
    let mut current: Option<Vec<&str>> = None;
    for line in reply.lines() {
        let fence = line.trim_start().starts_with("```");
        match current.as_mut() {
            None if fence => current = Some(Vec::new()),
            None => {}
            Some(_) if fence && line.trim() == "```" => {
                let body = current.take().expect("open block").join("\n");
                if !body.trim().is_empty() {
                    last = Some(body);
                }
            }
            Some(lines) => lines.push(line),
        }
    }
    last.or_else(|| {
        serialize::unpack(reply, Mode::PlanAndCode, Strictness::Lenient)
            .ok()
            .and_then(|p| p.code)
            .filter(|c| !c.trim().is_empty())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepTrace {
    pub slow_code: String,
    pub planner_output: ParsedOutput,
    pub planner_raw_reply: String,
    pub optimizer_raw_reply: String,
    pub extracted_code: Option<String>,
    #[serde(default)]
    pub eval: Option<EvalResult>,
}

pub async fn two_step(
    slow_code: &str,
    planner: &dyn ChatModel,
    optimizer: &dyn ChatModel,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    seed: Option<u64>,
) -> Result<TwoStepTrace, OrchestrateError> {
    let (strategies, planner_raw_reply) = plan_only_raw(slow_code, planner, templates, taxonomy, seed).await?;
    let reply = optimizer
        .complete(&optimizer_call(slow_code, &strategies, templates, seed)?)
        .await?;
    Ok(TwoStepTrace {
        slow_code: slow_code.to_string(),
        planner_output: ParsedOutput { strategies, code: None },
        planner_raw_reply,
        extracted_code: extract_code_block(&reply),
        optimizer_raw_reply: reply,
        eval: None,
    })
}

/// One prompt of a GRPO batch.
#[derive(Debug, Clone)]
pub struct GroupPrompt {
    pub id: String,
    pub slow_code: String,
    pub tests: Arc<Vec<TestCase>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSettings {
    pub group_size: usize,
    /// Member `i` is sampled with seed `run_seed + i`.
    pub run_seed: u64,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
}

enum Draft {
    Failed {
        strategies: Vec<CategorizedStrategy>,
        reason: String,
    },
    Planned(Vec<CategorizedStrategy>),
    Coded {
        strategies: Vec<CategorizedStrategy>,
        code: String,
    },
}

fn incomplete(prompt: &GroupPrompt, expected: usize, drafts: &[Result<Draft, OrchestrateError>]) -> OrchestrateError {
    let obtained = drafts.iter().filter(|d| d.is_ok()).count();
    let detail = drafts
        .iter()
        .find_map(|d| d.as_ref().err())
        .map(|e| e.to_string())
        .unwrap_or_default();
    OrchestrateError::IncompleteGroup {
        prompt_id: prompt.id.clone(),
        expected,
        obtained,
        detail,
    }
}

/// G two-step candidates per prompt, evaluated and rewarded. Output order
/// follows `prompts`; members are ordered by index.
#[allow(clippy::too_many_arguments)]
pub async fn sample_groups(
    prompts: &[GroupPrompt],
    planner: &dyn ChatModel,
    optimizer: &dyn ChatModel,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    harness: &Harness,
    settings: &GroupSettings,
) -> Result<Vec<GroupSample>, OrchestrateError> {
    settings.grpo.validate()?;
    settings.reward.validate()?;
    let g = settings.group_size;
    if g < 2 {
        return Err(RlError::GroupTooSmall(g).into());
    }
    let seed = |i: usize| settings.run_seed.wrapping_add(i as u64);

    // Phase 1: plans.
    let plan_futures = prompts.iter().flat_map(|p| {
        (0..g).map(move |i| async move {
            match plan_only(&p.slow_code, planner, templates, taxonomy, Some(seed(i))).await {
                Ok(strategies) => Ok(Draft::Planned(strategies)),
                Err(e) if e.is_malformed_plan() => Ok(Draft::Failed {
                    strategies: Vec::new(),
                    reason: e.to_string(),
                }),
                Err(e) => Err(e),
            }
        })
    });
    let plans = join_all(plan_futures).await;
    let mut groups: Vec<Vec<Result<Draft, OrchestrateError>>> = Vec::with_capacity(prompts.len());
    let mut plans = plans.into_iter();
    for _ in prompts {
        groups.push(plans.by_ref().take(g).collect());
    }
    for (prompt, drafts) in prompts.iter().zip(&groups) {
        if drafts.iter().any(|d| d.is_err()) {
            return Err(incomplete(prompt, g, drafts));
        }
    }
    tracing::info!(prompts = prompts.len(), group_size = g, "planner phase complete");

    // Phase 2: code.
    let code_futures = prompts.iter().zip(groups).flat_map(|(p, drafts)| {
        drafts.into_iter().enumerate().map(move |(i, draft)| async move {
            match draft? {
                Draft::Planned(strategies) => {
                    let call = optimizer_call(&p.slow_code, &strategies, templates, Some(seed(i)))?;
                    let reply = optimizer.complete(&call).await?;
                    Ok(match extract_code_block(&reply) {
                        Some(code) => Draft::Coded { strategies, code },
                        None => Draft::Failed {
                            strategies,
                            reason: "optimizer reply contains no code block".into(),
                        },
                    })
                }
                other => Ok(other),
            }
        })
    });
    let coded = join_all(code_futures).await;
    let mut groups: Vec<Vec<Result<Draft, OrchestrateError>>> = Vec::with_capacity(prompts.len());
    let mut coded = coded.into_iter();
    for _ in prompts {
        groups.push(coded.by_ref().take(g).collect());
    }
    for (prompt, drafts) in prompts.iter().zip(&groups) {
        if drafts.iter().any(|d| d.is_err()) {
            return Err(incomplete(prompt, g, drafts));
        }
    }
    tracing::info!("optimizer phase complete");

    // Phase 3: evaluation, off the async runtime.
    let harness = harness.clone();
    let batch: Vec<(GroupPrompt, Vec<Draft>)> = prompts
        .iter()
        .cloned()
        .zip(
            groups
                .into_iter()
                .map(|d| d.into_iter().map(|x| x.expect("checked")).collect()),
        )
        .collect();
    let evaluated = tokio::task::spawn_blocking(move || evaluate_groups(&harness, batch))
        .await
        .map_err(|e| OrchestrateError::Worker(e.to_string()))??;

    // Phase 4: rewards and advantages.
    evaluated
        .into_iter()
        .map(|(prompt, baseline, members)| {
            let mut sample = GroupSample {
                prompt_id: prompt.id,
                slow_code: prompt.slow_code,
                baseline_runtime_seconds: baseline,
                members,
            };
            for (i, m) in sample.members.iter_mut().enumerate() {
                m.index = i;
                m.seed = Some(seed(i));
            }
            let rewards = sample
                .members
                .iter()
                .map(|m| sample.member_reward(m, &settings.reward))
                .collect::<Result<Vec<_>, _>>()?;
            let advantages = group_advantages(&rewards, settings.grpo.degenerate_std_epsilon)?;
            for ((m, r), a) in sample.members.iter_mut().zip(rewards).zip(advantages) {
                m.reward = r;
                m.advantage = a;
            }
            Ok(sample)
        })
        .collect()
}

type Evaluated = (GroupPrompt, f64, Vec<GroupMember>);

fn evaluate_groups(
    harness: &Harness,
    batch: Vec<(GroupPrompt, Vec<Draft>)>,
) -> Result<Vec<Evaluated>, OrchestrateError> {
    let mut jobs = Vec::new();
    let mut baselines = Vec::with_capacity(batch.len());
    for (prompt, drafts) in &batch {
        let baseline = harness.baseline_runtime(&prompt.slow_code, &prompt.tests)?;
        baselines.push(baseline);
        for draft in drafts {
            if let Draft::Coded { code, .. } = draft {
                jobs.push(EvalJob {
                    source: code.clone(),
                    tests: prompt.tests.clone(),
                    baseline_seconds: baseline,
                });
            }
        }
    }
    let mut results = harness.evaluate_batch(&jobs).into_iter();

    let mut out = Vec::with_capacity(batch.len());
    for ((prompt, drafts), baseline) in batch.into_iter().zip(baselines) {
        let mut members = Vec::with_capacity(drafts.len());
        for draft in drafts {
            let member = |strategies, code, eval, failure| GroupMember {
                index: 0,
                seed: None,
                strategies,
                generated_code: code,
                eval,
                failure,
                reward: 0.0,
                advantage: 0.0,
                logprobs: None,
            };
            members.push(match draft {
                Draft::Failed { strategies, reason } => member(strategies, None, None, Some(reason)),
                Draft::Planned(_) => unreachable!("every planned member reached the optimizer"),
                Draft::Coded { strategies, code } => {
                    let eval = results.next().expect("one result per job")?;
                    member(strategies, Some(code), Some(eval), None)
                }
            });
        }
        out.push((prompt, baseline, members));
    }
    Ok(out)
}

/// [`sample_groups`] for a single prompt.
pub async fn sample_group(
    prompt: &GroupPrompt,
    planner: &dyn ChatModel,
    optimizer: &dyn ChatModel,
    templates: &PromptTemplates,
    taxonomy: &CategoryTaxonomy,
    harness: &Harness,
    settings: &GroupSettings,
) -> Result<GroupSample, OrchestrateError> {
    let mut groups = sample_groups(
        std::slice::from_ref(prompt),
        planner,
        optimizer,
        templates,
        taxonomy,
        harness,
        settings,
    )
    .await?;
    Ok(groups.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_block_extraction() {
        assert_eq!(
            extract_code_block("x\n```cpp\nint a;\n```\n").as_deref(),
            Some("int a;")
        );
        assert_eq!(
            extract_code_block("```\nfirst\n```\ntext\n```cpp\nsecond\n```").as_deref(),
            Some("second")
        );
        assert_eq!(extract_code_block("no code here"), None);
        assert_eq!(extract_code_block("```cpp\nunterminated"), None);
        let packed = "[SUGG/]\n1. A: b\n[/SUGG]\n[OPT/]\nint main(){}\n";
        assert_eq!(extract_code_block(packed).as_deref(), Some("int main(){}"));
    }

    #[test]
    fn plan_reply_parsing() {
        let one = parse_plan_reply("[SUGG/]\n1. Loop Efficiency Techniques: hoist the bound\n").unwrap();
        assert_eq!(one.len(), 1);
        let two = parse_plan_reply("[SUGG/]\n1. A: x\n2. B: y\n[/SUGG]").unwrap();
        assert_eq!(two[1].category, "B");
        assert!(matches!(
            parse_plan_reply("[SUGG/]\n"),
            Err(OrchestrateError::EmptyPlan { .. })
        ));
        assert!(matches!(
            parse_plan_reply("I would unroll the loop."),
            Err(OrchestrateError::MalformedPlan { .. })
        ));
    }
}
