//! `guiagent`: run rollouts, check rewards, evaluate objectives and metrics,
//! generate task packs.
//!
//! Exit codes: 0 success, 1 check failed (reward mismatch, invalid task),
//! 2 configuration or usage error, 3 backend failure, 4 input or I/O error.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use guiagent_core::env::{self, TaskSpec};
use guiagent_core::eval::{build_report, synth_tool_tasks, RuleJudge, ToolRatio};
use guiagent_core::memory::HistoryParadigm;
use guiagent_core::model::{scripted_from_golden, HttpBackend, ModelBackend, ScriptedBackend};
use guiagent_core::objective::{sft_loss, clipped_objective};
use guiagent_core::protocol::parse_turn;
use guiagent_core::reward::{advantage_spread, group_advantages};
use guiagent_core::rollout::{
    group_returns, read_log_records, read_trajectory_log, run_gated_group, run_group,
    score_step, write_trajectory_log, EpisodeConfig, RolloutError, ToolSet, Trajectory,
};
use guiagent_core::{ObjectiveConfigF64, TokenBatchF64};
use serde::Serialize;
use serde_json::json;

use crate::config::{BackendConfig, HarnessConfig};

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_INPUT: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn fail(code: u8, err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        err: err.into(),
    }
}

type CmdResult = Result<u8, Failure>;

#[derive(Parser)]
#[command(name = "guiagent", version, about = "Tool-integrated GUI agent rollout harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run groups of episodes and write trajectories, metrics and a manifest.
    Rollout(RolloutArgs),
    /// Recompute logged step rewards and list mismatches.
    RewardCheck(RewardCheckArgs),
    /// Evaluate the clipped objective over a token batch.
    Objective(ObjectiveArgs),
    /// Metrics report from a trajectory log.
    Eval(EvalArgs),
    /// Generate a labeled tool-prediction task pack into `<out>/tasks`.
    Taskgen(TaskgenArgs),
    /// Validate task packs.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct PackArgs {
    /// Harness config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task file or directory; repeatable. Overrides the config.
    #[arg(long = "task-pack")]
    task_packs: Vec<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    pack: PackArgs,
    /// Comma-separated task ids to run.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long)]
    group: Option<usize>,
    /// ao, at, mc or ms.
    #[arg(long)]
    paradigm: Option<HistoryParadigm>,
    /// none, cal, ret or both.
    #[arg(long)]
    tools: Option<ToolSet>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Resample groups until they pass the variance gate.
    #[arg(long)]
    gate: bool,
    /// Generate whole turns instead of stopping at the tool tag.
    #[arg(long)]
    single_phase: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RewardCheckArgs {
    #[command(flatten)]
    pack: PackArgs,
    /// Trajectory log (JSONL).
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct ObjectiveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Token records (JSONL of i, t, k, logp_current, logp_old, logp_ref, A).
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Also report the SFT loss over the batch's current log-probs.
    #[arg(long)]
    sft: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    pack: PackArgs,
    #[arg(long)]
    log: PathBuf,
    /// Comma-separated k values for pass@k.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Also write a CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TaskgenArgs {
    #[arg(long, default_value_t = 350)]
    none: usize,
    #[arg(long, default_value_t = 170)]
    retriever: usize,
    #[arg(long, default_value_t = 80)]
    calculator: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    pack: PackArgs,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rollout(a) => cmd_rollout(a),
        Command::RewardCheck(a) => cmd_reward_check(a),
        Command::Objective(a) => cmd_objective(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Taskgen(a) => cmd_taskgen(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<HarnessConfig, Failure> {
    match path {
        Some(p) => HarnessConfig::load(p).map_err(|e| fail(EXIT_CONFIG, anyhow!(e))),
        None => Ok(HarnessConfig::default()),
    }
}

fn load_packs(paths: &[PathBuf]) -> Result<Vec<TaskSpec>, Failure> {
    if paths.is_empty() {
        return Ok(env::bundled_tasks());
    }
    let mut out = Vec::new();
    for p in paths {
        let loaded = if p.is_dir() {
            env::load_task_dir(p)
        } else {
            env::load_task(p).map(|t| vec![t])
        };
        out.extend(loaded.map_err(|e| fail(EXIT_INPUT, e))?);
    }
    Ok(out)
}

fn resolve_packs(args: &PackArgs, cfg: &HarnessConfig) -> Result<Vec<TaskSpec>, Failure> {
    if args.task_packs.is_empty() {
        load_packs(&cfg.task_packs)
    } else {
        load_packs(&args.task_packs)
    }
}

fn build_backend(
    cfg: &BackendConfig,
    tasks: &[TaskSpec],
) -> Result<Arc<dyn ModelBackend>, Failure> {
    match cfg {
        BackendConfig::ScriptedGolden => {
            let mut b = ScriptedBackend::new();
            for t in tasks {
                b.merge(scripted_from_golden(t));
            }
            Ok(Arc::new(b))
        }
        BackendConfig::Http(h) => Ok(Arc::new(
            HttpBackend::new(h.clone()).map_err(|e| fail(EXIT_BACKEND, e))?,
        )),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_INPUT, e))?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| fail(EXIT_INPUT, e))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_INPUT, e))?;
    println!("{text}");
    Ok(())
}

fn rollout_failure(e: RolloutError) -> Failure {
    let code = match &e {
        e if e.is_resumable() => EXIT_BACKEND,
        RolloutError::InvalidTask(..) | RolloutError::BadConfig(_) | RolloutError::Reward(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_INPUT,
    };
    fail(code, e)
}

#[derive(Serialize)]
struct GroupSummary {
    task_id: String,
    passed_gate: Option<bool>,
    attempts: usize,
    spreads: Vec<f64>,
    advantages: Option<Vec<Vec<f64>>>,
}

fn cmd_rollout(a: RolloutArgs) -> CmdResult {
    let mut cfg = load_config(a.pack.config.as_deref())?;
    if let Some(g) = a.group {
        cfg.episode.group_size = g;
    }
    if let Some(p) = a.paradigm {
        cfg.episode.paradigm = p.short_name().into();
    }
    if let Some(t) = a.tools {
        cfg.episode.tools = t.short_name().into();
    }
    if let Some(g) = a.gamma {
        cfg.reward.gamma = g;
    }
    if let Some(e) = a.eta {
        cfg.reward.eta = e;
    }
    if let Some(s) = a.seed {
        cfg.episode.seed = s;
    }
    if let Some(j) = a.jobs {
        cfg.episode.jobs = Some(j);
    }
    if let Some(m) = a.max_steps {
        cfg.episode.max_steps = m;
    }
    if a.gate {
        cfg.episode.gate = true;
    }
    if a.single_phase {
        cfg.episode.two_phase_decoding = false;
    }
    if let Some(o) = a.out {
        cfg.out_dir = Some(o);
    }
    if !a.pack.task_packs.is_empty() {
        cfg.task_packs = a.pack.task_packs.clone();
    }
    cfg.check().map_err(|e| fail(EXIT_CONFIG, anyhow!(e)))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| fail(EXIT_CONFIG, anyhow!("no output directory (--out or out_dir)")))?;

    let mut tasks = load_packs(&cfg.task_packs)?;
    if !a.tasks.is_empty() {
        for id in &a.tasks {
            if !tasks.iter().any(|t| &t.task_id == id) {
                return Err(fail(EXIT_CONFIG, anyhow!("unknown task `{id}`")));
            }
        }
        tasks.retain(|t| a.tasks.contains(&t.task_id));
    }
    if tasks.is_empty() {
        return Err(fail(EXIT_CONFIG, anyhow!("no tasks selected")));
    }

    let policy = build_backend(&cfg.policy, &tasks)?;
    let copilot = build_backend(cfg.copilot(), &tasks)?;
    let ep = EpisodeConfig {
        paradigm: cfg.episode.paradigm().expect("checked"),
        tools_enabled: cfg.episode.tools().expect("checked"),
        max_steps: cfg.episode.max_steps,
        group_size: cfg.episode.group_size,
        seed: cfg.episode.seed,
        two_phase_decoding: cfg.episode.two_phase_decoding,
        matching: cfg.reward.match_config(),
        executor: cfg.episode.executor.build(),
        exec_limits: cfg.episode.exec_limits,
        knowledge_dir: cfg.episode.knowledge_dir.clone(),
        jobs: 1,
    };
    let jobs = cfg.episode.jobs.unwrap_or(tasks.len().min(8)).max(1);

    // Each task's outcome lands in its own slot so output order follows the pack.
    let next = AtomicUsize::new(0);
    type Slot = Option<Result<(Vec<Trajectory>, GroupSummary), RolloutError>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(tasks.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = tasks.get(i) else { break };
                tracing::info!(task = %spec.task_id, "rollout");
                let r = run_task(spec, policy.as_ref(), copilot.as_ref(), &ep, &cfg);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    let mut trajectories = Vec::new();
    let mut groups = Vec::new();
    for slot in slots.into_inner().expect("slot lock") {
        let (trs, summary) = slot.expect("every task ran").map_err(rollout_failure)?;
        trajectories.extend(trs);
        groups.push(summary);
    }

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    let log_path = out_dir.join("trajectories.jsonl");
    let f = File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    let mut w = BufWriter::new(f);
    write_trajectory_log(&mut w, &trajectories).map_err(|e| fail(EXIT_INPUT, e))?;
    w.flush().map_err(|e| fail(EXIT_INPUT, e))?;

    let report = build_report(
        &trajectories,
        &tasks,
        &cfg.eval.pass_k,
        &cfg.reward.match_config(),
        &RuleJudge::default(),
    )
    .map_err(|e| fail(EXIT_INPUT, e))?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    let csv = File::create(out_dir.join("metrics.csv")).map_err(|e| fail(EXIT_INPUT, e))?;
    report.write_csv(csv).map_err(|e| fail(EXIT_INPUT, e))?;
    write_json(&out_dir.join("groups.json"), &groups)?;
    let manifest = json!({
        "command": "rollout",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "tasks": tasks.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        "seeds": trajectories
            .iter()
            .map(|t| json!({"task_id": t.task_id, "rollout_index": t.rollout_index, "seed": t.seed}))
            .collect::<Vec<_>>(),
    });
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    print_json(&report.aggregate)?;
    Ok(0)
}

fn run_task(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    ep: &EpisodeConfig,
    cfg: &HarnessConfig,
) -> Result<(Vec<Trajectory>, GroupSummary), RolloutError> {
    if cfg.episode.gate && ep.group_size >= 2 {
        let g = run_gated_group(spec, policy, copilot, ep, &cfg.reward)?;
        let summary = GroupSummary {
            task_id: spec.task_id.clone(),
            passed_gate: Some(g.passed),
            attempts: g.attempts.len(),
            spreads: g.attempts.iter().map(|a| a.spread).collect(),
            advantages: Some(g.advantages.advantages.clone()),
        };
        return Ok((g.trajectories, summary));
    }
    let trs = run_group(spec, policy, copilot, ep)?;
    let (passed_gate, spreads, advantages) = if trs.len() >= 2 {
        let adv = group_advantages(
            group_returns(&trs, cfg.reward.gamma),
            cfg.reward.gamma,
            cfg.reward.eps_std,
        )?;
        let spread = advantage_spread(&adv);
        (Some(spread > cfg.reward.eta), vec![spread], Some(adv.advantages))
    } else {
        (None, Vec::new(), None)
    };
    Ok((
        trs,
        GroupSummary {
            task_id: spec.task_id.clone(),
            passed_gate,
            attempts: 1,
            spreads,
            advantages,
        },
    ))
}

#[derive(Serialize)]
struct Mismatch {
    line: usize,
    task_id: String,
    rollout_index: usize,
    step: usize,
    logged: Option<f64>,
    recomputed: Option<f64>,
    reason: String,
}

fn cmd_reward_check(a: RewardCheckArgs) -> CmdResult {
    let cfg = load_config(a.pack.config.as_deref())?;
    let tasks = resolve_packs(&a.pack, &cfg)?;
    let f = File::open(&a.log)
        .with_context(|| format!("opening {}", a.log.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    let records = read_log_records(BufReader::new(f)).map_err(|e| fail(EXIT_INPUT, e))?;
    let matching = cfg.reward.match_config();
    let mut mismatches = Vec::new();
    for (line, rec) in &records {
        let mut push = |logged, recomputed, reason: String| {
            mismatches.push(Mismatch {
                line: *line,
                task_id: rec.task_id.clone(),
                rollout_index: rec.rollout_index,
                step: rec.step.index,
                logged,
                recomputed,
                reason,
            })
        };
        let logged = rec.step.reward;
        if logged.total != logged.recompute() {
            push(
                Some(logged.total),
                Some(logged.recompute()),
                "logged total disagrees with its components".into(),
            );
            continue;
        }
        let Some(spec) = tasks.iter().find(|t| t.task_id == rec.task_id) else {
            push(Some(logged.total), None, "task not in pack".into());
            continue;
        };
        let turn = parse_turn(&rec.step.raw_output).ok();
        let fresh = score_step(spec, rec.step.index, turn.as_ref(), &matching);
        if fresh != logged {
            push(
                Some(logged.total),
                Some(fresh.total),
                format!(
                    "components logged ({}, {}, {}) recomputed ({}, {}, {})",
                    logged.r_format, logged.r_type, logged.r_acc, fresh.r_format, fresh.r_type, fresh.r_acc
                ),
            );
        }
    }
    for m in &mismatches {
        eprintln!(
            "mismatch: line {} task {} rollout {} step {}: {}",
            m.line, m.task_id, m.rollout_index, m.step, m.reason
        );
    }
    print_json(&json!({
        "checked": records.len(),
        "mismatch_count": mismatches.len(),
        "mismatches": mismatches,
    }))?;
    Ok(if mismatches.is_empty() { 0 } else { EXIT_CHECK })
}

fn cmd_objective(a: ObjectiveArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let ocfg = ObjectiveConfigF64 {
        clip_eps: a.eps.unwrap_or(cfg.objective.clip_eps),
        kl_beta: a.beta.unwrap_or(cfg.objective.kl_beta),
    };
    ocfg.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    let f = File::open(&a.batch)
        .with_context(|| format!("opening {}", a.batch.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    let batch = TokenBatchF64::read_jsonl(BufReader::new(f)).map_err(|e| fail(EXIT_INPUT, e))?;
    let v = clipped_objective(&batch, &ocfg).map_err(|e| fail(EXIT_INPUT, e))?;
    let mut out = serde_json::to_value(v).map_err(|e| fail(EXIT_INPUT, e))?;
    if a.sft {
        let logps: Vec<f64> = batch.tokens.iter().map(|r| r.logp_current).collect();
        let loss = sft_loss(&logps).map_err(|e| fail(EXIT_INPUT, e))?;
        out["sft_loss"] = json!(loss);
    }
    print_json(&out)?;
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = load_config(a.pack.config.as_deref())?;
    let tasks = resolve_packs(&a.pack, &cfg)?;
    let f = File::open(&a.log)
        .with_context(|| format!("opening {}", a.log.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    let trajectories = read_trajectory_log(BufReader::new(f)).map_err(|e| fail(EXIT_INPUT, e))?;
    let ks = if a.k.is_empty() { cfg.eval.pass_k.clone() } else { a.k };
    let report = build_report(
        &trajectories,
        &tasks,
        &ks,
        &cfg.reward.match_config(),
        &RuleJudge::default(),
    )
    .map_err(|e| fail(EXIT_INPUT, e))?;
    if let Some(path) = &a.csv {
        let f = File::create(path).map_err(|e| fail(EXIT_INPUT, e))?;
        report.write_csv(f).map_err(|e| fail(EXIT_INPUT, e))?;
    }
    print_json(&report)?;
    Ok(0)
}

fn cmd_taskgen(a: TaskgenArgs) -> CmdResult {
    let ratio = ToolRatio {
        none: a.none,
        retriever: a.retriever,
        calculator: a.calculator,
    };
    let pack = synth_tool_tasks(ratio, a.seed);
    let task_dir = a.out.join("tasks");
    fs::create_dir_all(&task_dir)
        .with_context(|| format!("creating {}", task_dir.display()))
        .map_err(|e| fail(EXIT_INPUT, e))?;
    for t in &pack {
        fs::write(task_dir.join(format!("{}.json", t.task_id)), t.to_json_pretty() + "\n")
            .map_err(|e| fail(EXIT_INPUT, e))?;
    }
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for t in &pack {
        *labels.entry(t.tool_label.to_string()).or_default() += 1;
    }
    let summary = json!({
        "command": "taskgen",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": a.seed,
        "ratio": ratio,
        "tasks": pack.len(),
        "labels": labels,
    });
    write_json(&a.out.join("manifest.json"), &summary)?;
    print_json(&summary)?;
    Ok(0)
}

fn cmd_validate(a: ValidateArgs) -> CmdResult {
    let cfg = load_config(a.pack.config.as_deref())?;
    let tasks = resolve_packs(&a.pack, &cfg)?;
    let mut problems = BTreeMap::new();
    for t in &tasks {
        let diags = env::validate(t);
        if !diags.is_empty() {
            problems.insert(t.task_id.clone(), diags);
        }
    }
    print_json(&json!({"tasks": tasks.len(), "problems": problems}))?;
    Ok(if problems.is_empty() { 0 } else { EXIT_CHECK })
}
