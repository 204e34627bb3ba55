//! Offline stages: curate, balance, pack, eval, report, reward, grpo-objective.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use perfforge_core::corpus::{self, CodePair, Origin, Submission};
use perfforge_core::evalbench::{self, EvalJob, EvalResult, Harness, RunConfig, TestCase};
use perfforge_core::rlmath::{GroupSample, GrpoConfig, IncorrectPolicy, RewardConfig};
use perfforge_core::sampling;
use perfforge_core::serialize::{self, TrainingExample};
use perfforge_core::strategy::{AnnotatedPair, CategoryTaxonomy};
use perfforge_core::template;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{require, PipelineConfig};
use crate::error::{StageError, StageResult};
use crate::output::{finish_csv, read_input, summary, Artifact};

pub struct Ctx {
    pub config: PipelineConfig,
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Submissions JSONL.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace targets slower than FACTOR x the problem's best solution.
    #[arg(long)]
    pub factor: Option<f64>,
    #[arg(long)]
    pub min_speedup: Option<f64>,
}

pub fn curate(ctx: &Ctx, args: CurateArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.input, &cfg.paths.submissions, "--in")?;
    let out = require(args.out, &cfg.paths.pairs, "--out")?;
    let factor = args.factor.or(cfg.curate.factor).unwrap_or(2.0);
    let min_speedup = args.min_speedup.or(cfg.curate.min_speedup).unwrap_or(1.1);

    let mut artifact = Artifact::new(
        "curate",
        ctx.seed,
        &json!({"factor": factor, "min_speedup": min_speedup}),
    );
    artifact.input(&input)?;
    let submissions: Vec<Submission> = read_input(&input)?;
    let corpus = corpus::build_trajectories(submissions)?;
    let pairs = corpus::reconstruct(&corpus, min_speedup, factor)?;
    artifact.write_jsonl(&out, &pairs)?;

    let cross = pairs.iter().filter(|p| p.origin == Origin::CrossUser).count();
    summary(
        "curate",
        json!({"out": out, "trajectories": corpus.len(), "pairs": pairs.len(), "cross_user": cross}),
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    #[arg(long)]
    pub annotated: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Before/after category shares as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn balance(ctx: &Ctx, args: BalanceArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.annotated, &cfg.paths.annotated, "--annotated")?;
    let out = require(args.out, &cfg.paths.balanced, "--out")?;
    let budget = args.budget.or(cfg.balance.budget).unwrap_or(5000);

    let mut artifact = Artifact::new("balance", ctx.seed, &json!({"budget": budget}));
    artifact.input(&input)?;
    let pairs: Vec<AnnotatedPair> = read_input(&input)?;
    let freqs = sampling::strategy_frequencies(&pairs);
    let subset = sampling::balanced_select(&pairs, budget, &freqs)?;
    artifact.write_jsonl(&out, &subset.selections)?;

    let selected = subset.pairs();
    let mut report_summary = json!(null);
    if !pairs.is_empty() && !selected.is_empty() {
        let before = sampling::category_distribution(&pairs)?;
        let after = sampling::category_distribution(&selected)?;
        report_summary = json!({
            "entropy_before": sampling::entropy(&before),
            "entropy_after": sampling::entropy(&after),
        });
        if let Some(report) = &args.report {
            let rows = sampling::distribution_report(&pairs, &selected)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["category", "before_percent", "after_percent"])?;
            for row in rows {
                w.write_record([
                    row.category,
                    format!("{:.4}", row.before_percent),
                    format!("{:.4}", row.after_percent),
                ])?;
            }
            artifact.write_csv(report, &finish_csv(w)?)?;
        }
    }
    let cross = selected.iter().filter(|p| p.pair.origin == Origin::CrossUser).count();
    summary(
        "balance",
        json!({"out": out, "pairs_in": pairs.len(), "selected": subset.len(), "cross_user": cross, "distribution": report_summary}),
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub annotated: Option<PathBuf>,
    /// Instruction template; may reference {taxonomy}.
    #[arg(long)]
    pub instruction_template: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn load_taxonomy(artifact: &mut Artifact, path: Option<&PathBuf>) -> StageResult<CategoryTaxonomy> {
    match path {
        Some(p) => {
            artifact.input(p)?;
            Ok(CategoryTaxonomy::from_path(p)?)
        }
        None => Ok(CategoryTaxonomy::builtin()),
    }
}

pub fn pack(ctx: &Ctx, args: PackArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.annotated, &cfg.paths.balanced, "--annotated")?;
    let out = require(args.out, &cfg.paths.packed, "--out")?;
    let template_path = args
        .instruction_template
        .or_else(|| cfg.pack.instruction_template.clone());
    let taxonomy_path = args.taxonomy.or_else(|| cfg.paths.taxonomy.clone());

    let mut artifact = Artifact::new("pack", ctx.seed, &json!({"format": "sugg-opt-v1"}));
    artifact.input(&input)?;
    let instruction_template = match &template_path {
        Some(p) => {
            artifact.input(p)?;
            std::fs::read_to_string(p)?
        }
        None => perfforge_core::orchestrate::PromptTemplates::default().instruction,
    };
    let taxonomy = load_taxonomy(&mut artifact, taxonomy_path.as_ref())?;
    let instruction = template::render(
        instruction_template.trim_end(),
        &[("taxonomy", &taxonomy.prompt_listing())],
    )?;

    let pairs: Vec<AnnotatedPair> = read_input(&input)?;
    let mut examples = Vec::with_capacity(pairs.len());
    let mut rejected = Vec::new();
    for p in &pairs {
        match serialize::pack(&p.strategies, &p.pair.fast.source_code) {
            Ok(output) => examples.push(TrainingExample {
                instruction: instruction.clone(),
                input: p.pair.slow.source_code.clone(),
                output,
            }),
            Err(e) => {
                tracing::warn!(pair_id = %p.pair.pair_id, error = %e, "pair not packed");
                rejected.push(json!({"pair_id": p.pair.pair_id, "reason": e.to_string()}));
            }
        }
    }
    artifact.write_jsonl(&out, &examples)?;
    summary(
        "pack",
        json!({"out": out, "examples": examples.len(), "rejected": rejected}),
    );
    Ok(())
}

/// Harness flags shared by every stage that evaluates code.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    #[arg(long)]
    pub repetitions: Option<u32>,
    #[arg(long)]
    pub warmups: Option<u32>,
    /// Per-test wall-clock limit in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Round reported runtimes to multiples of this many seconds.
    #[arg(long)]
    pub quantum: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub compile_command: Option<String>,
}

impl RunFlags {
    pub fn resolve(&self, base: Option<&RunConfig>) -> RunConfig {
        let mut run = base.cloned().unwrap_or_default();
        if let Some(v) = self.repetitions {
            run.repetitions = v;
        }
        if let Some(v) = self.warmups {
            run.warmups = v;
        }
        if let Some(v) = self.time_limit {
            run.per_test_time_limit_seconds = v;
        }
        if let Some(v) = self.quantum {
            run.runtime_quantum_seconds = v;
        }
        if let Some(v) = self.workers {
            run.workers = v;
        }
        if let Some(v) = &self.compile_command {
            run.compile_command = v.clone();
        }
        run
    }
}

/// Per-problem test bundles under `<root>/<problem_id>/tests/`, loaded once.
pub struct TestBundles {
    root: PathBuf,
    comparison: evalbench::Comparison,
    loaded: HashMap<String, Arc<Vec<TestCase>>>,
}

impl TestBundles {
    pub fn new(root: PathBuf, run: &RunConfig) -> StageResult<Self> {
        if !root.is_dir() {
            return Err(StageError::input(format!(
                "missing test bundle directory {}",
                root.display()
            )));
        }
        Ok(Self {
            root,
            comparison: run.comparison,
            loaded: HashMap::new(),
        })
    }

    pub fn get(&mut self, problem_id: &str) -> StageResult<Arc<Vec<TestCase>>> {
        if let Some(t) = self.loaded.get(problem_id) {
            return Ok(t.clone());
        }
        let tests = Arc::new(evalbench::load_problem_tests(&self.root, problem_id, self.comparison)?);
        self.loaded.insert(problem_id.to_string(), tests.clone());
        Ok(tests)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct Candidate {
    pub pair_id: String,
    #[serde(default)]
    pub candidate_id: Option<String>,
    pub code: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<String>,
    pub result: EvalResult,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Candidate programs `{pair_id, candidate_id?, code}`.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Test bundle root: `<dir>/<problem_id>/tests/<n>.in|.out`.
    #[arg(long)]
    pub tests: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunFlags,
}

pub fn eval(ctx: &Ctx, args: EvalArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let pairs_path = require(args.pairs, &cfg.paths.pairs, "--pairs")?;
    let cand_path = require(args.candidates, &cfg.paths.candidates, "--candidates")?;
    let tests_root = require(args.tests, &cfg.paths.tests, "--tests")?;
    let out = require(args.out, &cfg.paths.results, "--out")?;
    let run = args.run.resolve(cfg.run.as_ref());

    let mut artifact = Artifact::new("eval", ctx.seed, &run);
    artifact.input(&pairs_path)?;
    artifact.input(&cand_path)?;
    artifact.input(&tests_root)?;
    let pairs: Vec<CodePair> = read_input(&pairs_path)?;
    let candidates: Vec<Candidate> = read_input(&cand_path)?;
    let by_id: HashMap<&str, &CodePair> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();

    let harness = Harness::new(run.clone())?;
    let mut bundles = TestBundles::new(tests_root, &run)?;
    let mut baselines: BTreeMap<&str, f64> = BTreeMap::new();
    let mut jobs = Vec::with_capacity(candidates.len());
    let referenced: BTreeSet<&str> = candidates.iter().map(|c| c.pair_id.as_str()).collect();
    for pair_id in referenced {
        let pair = by_id
            .get(pair_id)
            .ok_or_else(|| StageError::input(format!("candidate references unknown pair {pair_id}")))?;
        let tests = bundles.get(&pair.problem_id)?;
        let t = harness
            .baseline_runtime(&pair.slow.source_code, &tests)
            .map_err(|e| StageError::from(e).context(format!("baseline of pair {pair_id}")))?;
        baselines.insert(pair_id, t);
    }
    for c in &candidates {
        let pair = by_id[c.pair_id.as_str()];
        jobs.push(EvalJob {
            source: c.code.clone(),
            tests: bundles.get(&pair.problem_id)?,
            baseline_seconds: baselines[c.pair_id.as_str()],
        });
    }

    let results = harness.evaluate_batch(&jobs);
    let mut records = Vec::with_capacity(results.len());
    for (c, result) in candidates.iter().zip(results) {
        records.push(EvalRecord {
            pair_id: c.pair_id.clone(),
            problem_id: by_id[c.pair_id.as_str()].problem_id.clone(),
            candidate_id: c.candidate_id.clone(),
            result: result?,
        });
    }
    records.sort_by(|a, b| (&a.pair_id, &a.candidate_id).cmp(&(&b.pair_id, &b.candidate_id)));
    artifact.write_jsonl(&out, &records)?;

    let results: Vec<EvalResult> = records.iter().map(|r| r.result.clone()).collect();
    let metrics = evalbench::aggregate_metrics(&results).ok();
    summary(
        "eval",
        json!({"out": out, "evaluated": records.len(), "metrics": metrics}),
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Three-metric table: one `all` row, then one row per problem.
pub fn metrics_csv(records: &[EvalRecord]) -> StageResult<String> {
    let mut scopes: Vec<(String, Vec<EvalResult>)> =
        vec![("all".into(), records.iter().map(|r| r.result.clone()).collect())];
    let mut per_problem: BTreeMap<&str, Vec<EvalResult>> = BTreeMap::new();
    for r in records {
        per_problem.entry(&r.problem_id).or_default().push(r.result.clone());
    }
    scopes.extend(per_problem.into_iter().map(|(p, v)| (format!("problem:{p}"), v)));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scope",
        "count",
        "mean_speedup",
        "effective_rate_percent",
        "accuracy_percent",
    ])?;
    for (scope, results) in scopes {
        let m = evalbench::aggregate_metrics(&results)?;
        w.write_record([
            scope,
            m.count.to_string(),
            format!("{:.6}", m.mean_speedup),
            format!("{:.6}", m.effective_rate_percent),
            format!("{:.6}", m.accuracy_percent),
        ])?;
    }
    finish_csv(w)
}

pub fn report(ctx: &Ctx, args: ReportArgs) -> StageResult<()> {
    let input = require(args.results, &ctx.config.paths.results, "--results")?;
    let mut artifact = Artifact::new("report", ctx.seed, &json!({"format": "metrics-v1"}));
    artifact.input(&input)?;
    let records: Vec<EvalRecord> = read_input(&input)?;
    if let Some(bad) = records.iter().find_map(|r| r.result.protocol_violation()) {
        return Err(StageError::input(format!(
            "results violate the evaluation protocol: {bad}"
        )));
    }
    let table = metrics_csv(&records)?;
    if let Some(out) = &args.out {
        artifact.write_csv(out, &table)?;
    }
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFlag {
    AsRegression,
    AsCompileFailure,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long, value_enum)]
    pub incorrect_policy: Option<PolicyFlag>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn reward_config(
    base: Option<&RewardConfig>,
    omega: Option<f64>,
    policy: Option<PolicyFlag>,
) -> StageResult<RewardConfig> {
    let mut cfg = base.copied().unwrap_or_default();
    if let Some(o) = omega {
        cfg.omega = o;
    }
    if let Some(p) = policy {
        cfg.incorrect_policy = match p {
            PolicyFlag::AsRegression => IncorrectPolicy::AsRegression,
            PolicyFlag::AsCompileFailure => IncorrectPolicy::AsCompileFailure,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn reward(ctx: &Ctx, args: RewardArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.groups, &cfg.paths.groups, "--groups")?;
    let reward_cfg = reward_config(cfg.reward.as_ref(), args.omega, args.incorrect_policy)?;
    let grpo = cfg.grpo.unwrap_or_default();

    let mut artifact = Artifact::new(
        "reward",
        ctx.seed,
        &json!({"reward": reward_cfg, "degenerate_std_epsilon": grpo.degenerate_std_epsilon}),
    );
    artifact.input(&input)?;
    let mut groups: Vec<GroupSample> = read_input(&input)?;
    for g in &mut groups {
        g.rescore(&reward_cfg, &grpo)
            .map_err(|e| StageError::from(e).context(format!("group {}", g.prompt_id)))?;
    }
    artifact.write_jsonl(&args.out, &groups)?;
    summary("reward", json!({"out": args.out, "groups": groups.len()}));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ObjectiveArgs {
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Clip range epsilon.
    #[arg(long)]
    pub eps: Option<f64>,
    /// KL coefficient.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ObjectiveRecord {
    prompt_id: String,
    objective: f64,
}

pub fn grpo_objective(ctx: &Ctx, args: ObjectiveArgs) -> StageResult<()> {
    let cfg = &ctx.config;
    let input = require(args.groups, &cfg.paths.groups, "--groups")?;
    let mut grpo: GrpoConfig = cfg.grpo.unwrap_or_default();
    if let Some(e) = args.eps {
        grpo.clip_epsilon = e;
    }
    if let Some(b) = args.beta {
        grpo.kl_beta = b;
    }
    grpo.validate()?;

    let mut artifact = Artifact::new("grpo-objective", ctx.seed, &grpo);
    artifact.input(&input)?;
    let groups: Vec<GroupSample> = read_input(&input)?;
    let records = groups
        .iter()
        .map(|g| {
            g.objective(&grpo)
                .map(|objective| ObjectiveRecord {
                    prompt_id: g.prompt_id.clone(),
                    objective,
                })
                .map_err(|e| StageError::from(e).context(format!("group {}", g.prompt_id)))
        })
        .collect::<StageResult<Vec<_>>>()?;
    if let Some(out) = &args.out {
        artifact.write_jsonl(out, &records)?;
    }
    summary(
        "grpo-objective",
        json!({"groups": records.len(), "objectives": records}),
    );
    Ok(())
}
