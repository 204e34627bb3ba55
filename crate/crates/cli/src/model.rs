//! Stages that talk to chat models: annotate, plan, optimize, grpo-sample,
//! plus the mock server used to run them offline.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use futures::future::join_all;
use perfforge_core::corpus::CodePair;
use perfforge_core::evalbench::{EvalResult, Harness};
use perfforge_core::orchestrate::prompts::PromptTemplates;
use perfforge_core::orchestrate::{
    self, ChatClientConfig, ChatModel, GroupPrompt, GroupSettings, HttpChatClient, Journal, MockConfig, MockServer,
    OrchestrateError, SingleStepOutcome, TwoStepTrace,
};
use perfforge_core::rlmath::GrpoConfig;
use perfforge_core::strategy::{self, AnnotateMode, CategorizedStrategy, CategoryTaxonomy};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::runtime::Runtime;

use crate::config::{require, ClientSection};
use crate::error::{StageError, StageResult};
use crate::output::{read_input, summary, Artifact};
use crate::stages::{load_taxonomy, reward_config, Ctx, PolicyFlag, RunFlags, TestBundles};

/// Client flags; each overrides the matching config-file field.
#[derive(Debug, Args, Default)]
pub struct ClientFlags {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Maximum requests in flight per endpoint.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Request journal; completed calls are replayed from it on rerun.
    /// Defaults to `<out>.journal`.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Prompt template directory overriding the built-in templates.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

impl ClientFlags {
    fn section(&self, endpoint: Option<String>, model: Option<String>) -> ClientSection {
        ClientSection {
            endpoint_url: endpoint,
            model_name: model,
            api_key_env_var: self.api_key_env.clone(),
            temperature: self.temperature,
            max_retries: self.max_retries,
            concurrency_limit: self.concurrency,
            ..Default::default()
        }
    }
}

fn journal_for(flags: &ClientFlags, out: &Path) -> StageResult<Arc<Journal>> {
    let path = flags
        .journal
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.journal", out.display())));
    Ok(Arc::new(Journal::open(&path)?))
}

fn client(config: ChatClientConfig, journal: &Arc<Journal>) -> StageResult<Arc<dyn ChatModel>> {
    Ok(Arc::new(HttpChatClient::new(config)?.with_journal(journal.clone())))
}

/// What determines a model's output: everything but where it is served.
fn client_fingerprint(cfg: &ChatClientConfig) -> serde_json::Value {
    json!({
        "model_name": cfg.model_name,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "stop_sequences": cfg.stop_sequences,
    })
}

fn templates(
    artifact: &mut Artifact,
    flags: &ClientFlags,
    config_dir: &Option<PathBuf>,
) -> StageResult<PromptTemplates> {
    match flags.prompts.as_ref().or(config_dir.as_ref()) {
        Some(dir) => {
            artifact.input(dir)?;
            Ok(PromptTemplates::load_dir(dir)?)
        }
        None => Ok(PromptTemplates::default()),
    }
}

fn runtime() -> StageResult<Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(StageError::from)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeFlag {
    Reextract,
    Classify,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// `reextract`: one category-grounded call per pair; `classify`: raw
    /// extraction followed by per-name classification.
    #[arg(long, value_enum)]
    pub mode: Option<ModeFlag>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub client: ClientFlags,
}

pub fn annotate(ctx: &Ctx, args: AnnotateArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.pairs, &cfg.paths.pairs, "--pairs")?;
    let out = require(args.out, &cfg.paths.annotated, "--out")?;
    let mode = match args.mode {
        Some(ModeFlag::Reextract) => AnnotateMode::Reextract,
        Some(ModeFlag::Classify) => AnnotateMode::Classify,
        None => cfg.annotate.mode.unwrap_or_default(),
    };
    let concurrency = args.client.concurrency.or(cfg.annotate.concurrency).unwrap_or(4);
    let mut section = args.client.section(args.endpoint, args.model);
    section.concurrency_limit = Some(concurrency);
    let client_cfg = cfg.extractor.overlay(&section).resolve("extractor")?;

    let mut artifact = Artifact::new(
        "annotate",
        ctx.seed,
        &json!({"mode": mode, "client": client_fingerprint(&client_cfg)}),
    );
    artifact.input(&input)?;
    let taxonomy = load_taxonomy(&mut artifact, args.taxonomy.as_ref().or(cfg.paths.taxonomy.as_ref()))?;
    let templates = templates(&mut artifact, &args.client, &cfg.paths.prompts)?;
    let pairs: Vec<CodePair> = read_input(&input)?;
    let journal = journal_for(&args.client, &out)?;
    let model = client(client_cfg, &journal)?;

    let outcome = runtime()?.block_on(strategy::annotate_corpus(
        &pairs,
        &taxonomy,
        model,
        &templates,
        mode,
        concurrency,
    ))?;
    artifact.write_jsonl(&out, &outcome.annotated)?;
    summary("annotate", json!({"out": out, "summary": outcome.summary}));
    Ok(())
}

/// A program to optimize: `{id, problem_id, slow_code}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramRecord {
    pub id: String,
    pub problem_id: String,
    pub slow_code: String,
}

#[derive(Debug, Args)]
pub struct ProgramInput {
    /// Code pairs JSONL; the slow side of each pair is optimized.
    #[arg(long, conflicts_with = "programs")]
    pub pairs: Option<PathBuf>,
    /// Programs JSONL `{id, problem_id, slow_code}`.
    #[arg(long)]
    pub programs: Option<PathBuf>,
}

impl ProgramInput {
    fn load(&self, ctx: &Ctx, artifact: &mut Artifact) -> StageResult<Vec<ProgramRecord>> {
        if let Some(path) = &self.programs {
            artifact.input(path)?;
            return read_input(path);
        }
        let path = require(self.pairs.clone(), &ctx.config.paths.pairs, "--pairs or --programs")?;
        artifact.input(&path)?;
        let pairs: Vec<CodePair> = read_input(&path)?;
        Ok(pairs
            .into_iter()
            .map(|p| ProgramRecord {
                id: p.pair_id,
                problem_id: p.problem_id,
                slow_code: p.slow.source_code,
            })
            .collect())
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub input: ProgramInput,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientFlags,
}

#[derive(Debug, Serialize)]
struct PlanRecord {
    id: String,
    problem_id: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    strategies: Option<Vec<CategorizedStrategy>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    raw: String,
}

pub fn plan(ctx: &Ctx, args: PlanArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let client_cfg = cfg
        .planner
        .overlay(&args.client.section(args.endpoint, args.model))
        .resolve("planner")?;
    let mut artifact = Artifact::new("plan", ctx.seed, &json!({"planner": client_fingerprint(&client_cfg)}));
    let programs = args.input.load(ctx, &mut artifact)?;
    let taxonomy = CategoryTaxonomy::builtin();
    let templates = templates(&mut artifact, &args.client, &cfg.paths.prompts)?;
    let journal = journal_for(&args.client, &args.out)?;
    let planner = client(client_cfg, &journal)?;
    let seed = Some(ctx.seed);

    let results =
        runtime()?.block_on(join_all(programs.iter().map(|p| {
            orchestrate::plan_only_raw(&p.slow_code, planner.as_ref(), &templates, &taxonomy, seed)
        })));
    let mut records = Vec::with_capacity(programs.len());
    for (p, result) in programs.iter().zip(results) {
        let (strategies, error, raw) = match result {
            Ok((s, raw)) => (Some(s), None, raw),
            Err(OrchestrateError::EmptyPlan { raw }) => (None, Some("empty plan".to_string()), raw),
            Err(OrchestrateError::MalformedPlan { raw, error }) => (None, Some(error.to_string()), raw),
            Err(e) => return Err(e.into()),
        };
        records.push(PlanRecord {
            id: p.id.clone(),
            problem_id: p.problem_id.clone(),
            seed: ctx.seed,
            strategies,
            error,
            raw,
        });
    }
    artifact.write_jsonl(&args.out, &records)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    summary(
        "plan",
        json!({"out": args.out, "programs": records.len(), "failed": failed}),
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizeMode {
    Single,
    TwoStep,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub input: ProgramInput,
    #[arg(long, value_enum, default_value = "two-step")]
    pub mode: OptimizeMode,
    /// Single-step model, or the planner in two-step mode.
    #[arg(long)]
    pub planner_endpoint: Option<String>,
    #[arg(long)]
    pub planner_model: Option<String>,
    #[arg(long)]
    pub optimizer_endpoint: Option<String>,
    #[arg(long)]
    pub optimizer_model: Option<String>,
    /// Evaluate generated code against `<dir>/<problem_id>/tests/`.
    #[arg(long)]
    pub tests: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub client: ClientFlags,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Serialize)]
struct SingleRecord {
    id: String,
    problem_id: String,
    outcome: SingleStepOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<EvalResult>,
}

#[derive(Debug, Serialize)]
struct TwoStepRecord {
    id: String,
    problem_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<TwoStepTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn optimize(ctx: &Ctx, args: OptimizeArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let planner_cfg = cfg
        .planner
        .overlay(
            &args
                .client
                .section(args.planner_endpoint.clone(), args.planner_model.clone()),
        )
        .resolve("planner")?;
    let optimizer_cfg = match args.mode {
        OptimizeMode::TwoStep => Some(
            cfg.optimizer
                .overlay(
                    &args
                        .client
                        .section(args.optimizer_endpoint.clone(), args.optimizer_model.clone()),
                )
                .resolve("optimizer")?,
        ),
        OptimizeMode::Single => None,
    };
    let run = args.run.resolve(cfg.run.as_ref());
    let tests_root = args.tests.clone();
    let mut artifact = Artifact::new(
        "optimize",
        ctx.seed,
        &json!({
            "mode": args.mode,
            "planner": client_fingerprint(&planner_cfg),
            "optimizer": optimizer_cfg.as_ref().map(client_fingerprint),
            "run": tests_root.as_ref().map(|_| &run),
        }),
    );
    let programs = args.input.load(ctx, &mut artifact)?;
    if let Some(root) = &tests_root {
        artifact.input(root)?;
    }
    let taxonomy = CategoryTaxonomy::builtin();
    let templates = templates(&mut artifact, &args.client, &cfg.paths.prompts)?;
    let journal = journal_for(&args.client, &args.out)?;
    let planner = client(planner_cfg, &journal)?;
    let optimizer = optimizer_cfg.map(|c| client(c, &journal)).transpose()?;
    let seed = Some(ctx.seed);
    let rt = runtime()?;

    let mut judge = match &tests_root {
        Some(root) => Some((Harness::new(run.clone())?, TestBundles::new(root.clone(), &run)?)),
        None => None,
    };
    let mut evaluate = |p: &ProgramRecord, code: &str| -> StageResult<EvalResult> {
        let (harness, bundles) = judge.as_mut().expect("only called with tests");
        let tests = bundles.get(&p.problem_id)?;
        let baseline = harness.baseline_runtime(&p.slow_code, &tests)?;
        Ok(harness.evaluate(code, &tests, baseline)?)
    };

    match optimizer {
        None => {
            let outcomes =
                rt.block_on(join_all(programs.iter().map(|p| {
                    orchestrate::single_step_optimize(&p.slow_code, planner.as_ref(), &templates, seed)
                })));
            let mut records = Vec::new();
            for (p, outcome) in programs.iter().zip(outcomes) {
                let outcome = outcome?;
                let code = match &outcome {
                    SingleStepOutcome::Parsed { output, .. } => output.code.clone(),
                    SingleStepOutcome::Malformed { .. } => None,
                };
                let eval = match (&tests_root, code) {
                    (Some(_), Some(code)) => Some(evaluate(p, &code)?),
                    _ => None,
                };
                records.push(SingleRecord {
                    id: p.id.clone(),
                    problem_id: p.problem_id.clone(),
                    outcome,
                    eval,
                });
            }
            artifact.write_jsonl(&args.out, &records)?;
            summary(
                "optimize",
                json!({"out": args.out, "mode": "single", "programs": records.len()}),
            );
        }
        Some(optimizer) => {
            let traces = rt.block_on(join_all(programs.iter().map(|p| {
                orchestrate::two_step(
                    &p.slow_code,
                    planner.as_ref(),
                    optimizer.as_ref(),
                    &templates,
                    &taxonomy,
                    seed,
                )
            })));
            let mut records = Vec::new();
            for (p, trace) in programs.iter().zip(traces) {
                let record = match trace {
                    Ok(mut trace) => {
                        if let (Some(_), Some(code)) = (&tests_root, trace.extracted_code.clone()) {
                            trace.eval = Some(evaluate(p, &code)?);
                        }
                        TwoStepRecord {
                            id: p.id.clone(),
                            problem_id: p.problem_id.clone(),
                            trace: Some(trace),
                            error: None,
                        }
                    }
                    Err(e) if e.is_malformed_plan() => TwoStepRecord {
                        id: p.id.clone(),
                        problem_id: p.problem_id.clone(),
                        trace: None,
                        error: Some(e.to_string()),
                    },
                    Err(e) => return Err(e.into()),
                };
                records.push(record);
            }
            artifact.write_jsonl(&args.out, &records)?;
            summary(
                "optimize",
                json!({"out": args.out, "mode": "two-step", "programs": records.len()}),
            );
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GrpoSampleArgs {
    #[command(flatten)]
    pub input: ProgramInput,
    /// Group size G.
    #[arg(long)]
    pub g: Option<usize>,
    #[arg(long)]
    pub planner_endpoint: Option<String>,
    #[arg(long)]
    pub planner_model: Option<String>,
    #[arg(long)]
    pub optimizer_endpoint: Option<String>,
    #[arg(long)]
    pub optimizer_model: Option<String>,
    #[arg(long)]
    pub tests: Option<PathBuf>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long, value_enum)]
    pub incorrect_policy: Option<PolicyFlag>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub client: ClientFlags,
    #[command(flatten)]
    pub run: RunFlags,
}

pub fn grpo_sample(ctx: &Ctx, args: GrpoSampleArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let out = require(args.out.clone(), &cfg.paths.groups, "--out")?;
    let tests_root = require(args.tests.clone(), &cfg.paths.tests, "--tests")?;
    let planner_cfg = cfg
        .planner
        .overlay(
            &args
                .client
                .section(args.planner_endpoint.clone(), args.planner_model.clone()),
        )
        .resolve("planner")?;
    let optimizer_cfg = cfg
        .optimizer
        .overlay(
            &args
                .client
                .section(args.optimizer_endpoint.clone(), args.optimizer_model.clone()),
        )
        .resolve("optimizer")?;
    let reward = reward_config(cfg.reward.as_ref(), args.omega, args.incorrect_policy)?;
    let mut grpo: GrpoConfig = cfg.grpo.unwrap_or_default();
    if let Some(g) = args.g {
        grpo.group_size = g;
    }
    grpo.validate()?;
    let run = args.run.resolve(cfg.run.as_ref());
    let settings = GroupSettings {
        group_size: grpo.group_size,
        run_seed: ctx.seed,
        reward,
        grpo,
    };

    let mut artifact = Artifact::new(
        "grpo-sample",
        ctx.seed,
        &json!({
            "planner": client_fingerprint(&planner_cfg),
            "optimizer": client_fingerprint(&optimizer_cfg),
            "reward": reward,
            "grpo": grpo,
            "run": run,
        }),
    );
    let programs = args.input.load(ctx, &mut artifact)?;
    artifact.input(&tests_root)?;
    let templates = templates(&mut artifact, &args.client, &cfg.paths.prompts)?;
    let taxonomy = CategoryTaxonomy::builtin();
    let harness = Harness::new(run.clone())?;
    let mut bundles = TestBundles::new(tests_root, &run)?;
    let prompts = programs
        .iter()
        .map(|p| {
            Ok(GroupPrompt {
                id: p.id.clone(),
                slow_code: p.slow_code.clone(),
                tests: bundles.get(&p.problem_id)?,
            })
        })
        .collect::<StageResult<Vec<_>>>()?;
    let journal = journal_for(&args.client, &out)?;
    let planner = client(planner_cfg, &journal)?;
    let optimizer = client(optimizer_cfg, &journal)?;

    let groups = runtime()?.block_on(orchestrate::sample_groups(
        &prompts,
        planner.as_ref(),
        optimizer.as_ref(),
        &templates,
        &taxonomy,
        &harness,
        &settings,
    ))?;
    artifact.write_jsonl(&out, &groups)?;
    let failed: usize = groups
        .iter()
        .map(|g| g.members.iter().filter(|m| m.eval.is_none()).count())
        .sum();
    summary(
        "grpo-sample",
        json!({"out": out, "groups": groups.len(), "group_size": settings.group_size, "members_without_code": failed, "journal": journal.path()}),
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    /// JSON file with `{rules: [...], default_reply}`.
    #[arg(long)]
    pub rules: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 0)]
    pub port: u16,
}

pub fn serve_mock(args: ServeMockArgs) -> StageResult<()> {
    let text = std::fs::read_to_string(&args.rules)
        .map_err(|e| StageError::input(format!("{}: {e}", args.rules.display())))?;
    let config: MockConfig =
        serde_json::from_str(&text).map_err(|e| StageError::input(format!("{}: {e}", args.rules.display())))?;
    let addr: std::net::SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| StageError::usage(format!("bad listen address: {e}")))?;
    runtime()?.block_on(async move {
        let server = MockServer::bind(config, addr).await?;
        summary("serve-mock", json!({"url": server.url()}));
        server.wait().await;
        Ok::<_, StageError>(())
    })
}
