//! Episode orchestration: the multi-turn loop on the policy's own history,
//! single-turn tool prediction on expert history, and group sampling.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actions::{accuracy_reward, type_reward, Action, MatchConfig};
use crate::copilot::{
    dispatch, ArithmeticExecutor, CodeExecutor, CopilotRole, ExecLimits, SubprocessExecutor,
    ToolRequest, ToolResult,
};
use crate::env::{self, EnvError, TaskSpec};
use crate::memory::{
    append_step, build_context, knowledge_path, skip_step, DialogueHistory, HistoryParadigm,
    KnowledgeStore, MemoryError, PromptContext,
};
use crate::model::{
    ChatMessage, CompletionRequest, ModelBackend, ModelError, Phase, Role, ScriptKey,
};
use crate::protocol::{
    parse_turn, peek_tool, render_result, render_tool_call, strip_results, truncate_after_tool,
    FormatFailure, ToolChoice, Turn, TOOL_TAG,
};
use crate::reward::{
    advantage_spread, discounted_returns, group_advantages, pad_returns, RewardBreakdown,
    RewardConfig, RewardError,
};

type Reward = RewardBreakdown<f64>;

/// Which copilot roles the policy may call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolSet {
    pub calculator: bool,
    pub retriever: bool,
}

impl ToolSet {
    pub const NONE: ToolSet = ToolSet {
        calculator: false,
        retriever: false,
    };
    pub const BOTH: ToolSet = ToolSet {
        calculator: true,
        retriever: true,
    };

    pub fn allows(&self, tool: ToolChoice) -> bool {
        match tool {
            ToolChoice::Calculator => self.calculator,
            ToolChoice::Retriever => self.retriever,
            ToolChoice::None => true,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match (self.calculator, self.retriever) {
            (false, false) => "none",
            (true, false) => "cal",
            (false, true) => "ret",
            (true, true) => "both",
        }
    }
}

impl Default for ToolSet {
    fn default() -> Self {
        Self::BOTH
    }
}

impl fmt::Display for ToolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ToolSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::NONE),
            "cal" | "calculator" => Ok(ToolSet {
                calculator: true,
                retriever: false,
            }),
            "ret" | "retriever" => Ok(ToolSet {
                calculator: false,
                retriever: true,
            }),
            "both" | "all" => Ok(Self::BOTH),
            other => Err(format!("unknown tool set `{other}` (none, cal, ret, both)")),
        }
    }
}

/// Which code executor the Calculator uses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecutorChoice {
    /// `python3` on `PATH` if present, else arithmetic.
    #[default]
    Auto,
    Arithmetic,
    Subprocess {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl ExecutorChoice {
    pub fn build(&self) -> Arc<dyn CodeExecutor> {
        match self {
            ExecutorChoice::Auto => match SubprocessExecutor::python() {
                Some(py) => Arc::new(py),
                None => Arc::new(ArithmeticExecutor),
            },
            ExecutorChoice::Arithmetic => Arc::new(ArithmeticExecutor),
            ExecutorChoice::Subprocess { program, args } => Arc::new(SubprocessExecutor {
                program: program.clone(),
                args: args.clone(),
            }),
        }
    }
}

#[derive(Clone)]
pub struct EpisodeConfig {
    pub paradigm: HistoryParadigm,
    pub tools_enabled: ToolSet,
    pub max_steps: usize,
    pub group_size: usize,
    pub seed: u64,
    pub two_phase_decoding: bool,
    pub matching: MatchConfig,
    pub executor: Arc<dyn CodeExecutor>,
    pub exec_limits: ExecLimits,
    /// Where per-rollout knowledge stores are written, if anywhere.
    pub knowledge_dir: Option<PathBuf>,
    /// Worker threads for [`run_group`]; 0 means one per rollout.
    pub jobs: usize,
}

impl fmt::Debug for EpisodeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpisodeConfig")
            .field("paradigm", &self.paradigm)
            .field("tools_enabled", &self.tools_enabled)
            .field("max_steps", &self.max_steps)
            .field("group_size", &self.group_size)
            .field("seed", &self.seed)
            .field("two_phase_decoding", &self.two_phase_decoding)
            .field("matching", &self.matching)
            .field("exec_limits", &self.exec_limits)
            .field("knowledge_dir", &self.knowledge_dir)
            .field("jobs", &self.jobs)
            .finish_non_exhaustive()
    }
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            paradigm: HistoryParadigm::MultiTurnSummary,
            tools_enabled: ToolSet::BOTH,
            max_steps: 30,
            group_size: 8,
            seed: 0,
            two_phase_decoding: true,
            matching: MatchConfig::default(),
            executor: Arc::new(ArithmeticExecutor),
            exec_limits: ExecLimits::default(),
            knowledge_dir: None,
            jobs: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.group_size < 1 {
            return Err(RolloutError::BadConfig("group_size must be >= 1".into()));
        }
        if self.max_steps < 1 {
            return Err(RolloutError::BadConfig("max_steps must be >= 1".into()));
        }
        self.matching
            .validate()
            .map_err(|e| RolloutError::BadConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    MultiTurnAction,
    SingleTurnTool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub screen_id: String,
    /// Full output as scored, with the harness result spliced in.
    pub raw_output: String,
    pub turn: Option<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_failure: Option<FormatFailure>,
    pub tool_result: Option<ToolResult>,
    pub reward: Reward,
    /// SHA-256 of the user prompt the policy saw.
    pub context_digest: String,
    /// Texts carried by the dialogue history in that prompt.
    pub history_texts: Vec<String>,
    pub started_at: DateTime<Utc>,
    pub policy_latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copilot_latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub rollout_index: usize,
    pub seed: u64,
    pub mode: RolloutMode,
    pub paradigm: HistoryParadigm,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub final_screen: String,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward.total).collect()
    }

    /// Steps that called an enabled tool.
    pub fn tool_calls(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.tool_result.is_some())
            .count()
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout {rollout_index} of {task_id}, step {step}: backend failed: {source}")]
    Backend {
        task_id: String,
        rollout_index: usize,
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("{task_id}: golden step {step} has no expert summary")]
    MissingExpertSummary { task_id: String, step: usize },
    #[error("{task_id}: step {step} is outside the golden trajectory of length {len}")]
    StepOutOfRange {
        task_id: String,
        step: usize,
        len: usize,
    },
    #[error("task {0} failed validation: {1}")]
    InvalidTask(String, String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("bad episode config: {0}")]
    BadConfig(String),
    #[error("log io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Log(LogDecodeError),
}

impl RolloutError {
    /// Transport and server failures can be retried by rerunning the
    /// rollout with the same seed.
    pub fn is_resumable(&self) -> bool {
        matches!(self, RolloutError::Backend { .. })
    }
}

fn digest(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn millis(since: Instant) -> u64 {
    since.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}

/// Replace the tool block at the head of `text` with `<tool>None</tool>`.
fn rewrite_tool_none(text: &str) -> String {
    match truncate_after_tool(text) {
        Some(prefix) => format!("{}{}", render_tool_call(ToolChoice::None), &text[prefix.len()..]),
        None => text.to_owned(),
    }
}

/// Insert `<result>` right after the `</tool>` close tag.
fn splice_result(text: &str, result: &str) -> String {
    match truncate_after_tool(text) {
        Some(prefix) => format!(
            "{prefix}\n{}{}",
            render_result(result),
            &text[prefix.len()..]
        ),
        None => text.to_owned(),
    }
}

/// Step reward of a parsed turn against golden step `t`. Steps past the
/// golden trajectory only earn the format term; `None` scores zero.
pub fn score_step(spec: &TaskSpec, t: usize, turn: Option<&Turn>, matching: &MatchConfig) -> Reward {
    let Some(turn) = turn else {
        return Reward::format_failure();
    };
    let Some(golden) = spec.golden.get(t) else {
        return Reward::step(1, 0, 0);
    };
    let gt = golden.ground_truth();
    let r_type = type_reward(&turn.action, &gt.action);
    let r_acc = if r_type == 1 {
        accuracy_reward(&turn.action, &gt, matching).unwrap_or(0)
    } else {
        0
    };
    Reward::step(1, r_type, r_acc)
}

struct Decoded {
    raw: String,
    tool_result: Option<ToolResult>,
    copilot_latency_ms: Option<u64>,
    notes: Vec<String>,
}

struct EpisodeCtx<'a> {
    spec: &'a TaskSpec,
    policy: &'a dyn ModelBackend,
    copilot: &'a dyn ModelBackend,
    cfg: &'a EpisodeConfig,
    rollout_index: usize,
    seed: u64,
}

impl EpisodeCtx<'_> {
    fn request(&self, messages: Vec<ChatMessage>, t: usize, phase: Phase) -> CompletionRequest {
        CompletionRequest::new(messages)
            .with_seed(self.seed)
            .with_key(ScriptKey::new(&self.spec.task_id, t, phase))
    }

    fn complete(&self, req: &CompletionRequest, t: usize) -> Result<String, RolloutError> {
        self.policy
            .complete(req)
            .map(|c| c.text)
            .map_err(|source| RolloutError::Backend {
                task_id: self.spec.task_id.clone(),
                rollout_index: self.rollout_index,
                step: t,
                source,
            })
    }

    fn call_tool(
        &self,
        tool: ToolChoice,
        t: usize,
        summaries: &[String],
        store: &KnowledgeStore,
    ) -> (ToolResult, u64) {
        let req = match CopilotRole::from_tool(tool).expect("called with a tool") {
            CopilotRole::Retriever => {
                ToolRequest::retriever(&self.spec.instruction, summaries.to_vec(), store.clone())
            }
            CopilotRole::Calculator => {
                ToolRequest::calculator(&self.spec.instruction, summaries.to_vec())
            }
        };
        let started = Instant::now();
        let result = dispatch(
            &req,
            self.copilot,
            self.cfg.executor.as_ref(),
            &self.cfg.exec_limits,
            Some(ScriptKey::new(&self.spec.task_id, t, Phase::Copilot)),
        );
        (result, millis(started))
    }

    /// Decode one turn, dispatching the copilot when a permitted tool is named.
    fn decode(
        &self,
        ctx: &PromptContext,
        t: usize,
        summaries: &[String],
        store: &KnowledgeStore,
    ) -> Result<Decoded, RolloutError> {
        let mut notes = Vec::new();
        let two_phase = self.cfg.two_phase_decoding;
        let close_tool = format!("</{TOOL_TAG}>");

        let first = if two_phase {
            let stop_ok = self.policy.capabilities().supports_stop_sequences;
            let mut req = self.request(ctx.messages(), t, Phase::ToolCall);
            if stop_ok {
                req = req.with_stop(close_tool.clone());
            }
            let text = self.complete(&req, t)?;
            if stop_ok {
                format!("{text}{close_tool}")
            } else {
                match truncate_after_tool(&text) {
                    Some(prefix) => prefix.to_owned(),
                    None => text,
                }
            }
        } else {
            let req = self.request(ctx.messages(), t, Phase::FullTurn);
            let text = self.complete(&req, t)?;
            let stripped = strip_results(&text);
            if stripped != text {
                notes.push("discarded model-written <result>".to_owned());
            }
            stripped
        };

        let mut head = first;
        let mut tool_result = None;
        let mut copilot_latency_ms = None;
        if let Some(tool) = peek_tool(&head).filter(ToolChoice::is_tool) {
            if self.cfg.tools_enabled.allows(tool) {
                let (result, ms) = self.call_tool(tool, t, summaries, store);
                head = splice_result(&head, &result.text);
                tool_result = Some(result);
                copilot_latency_ms = Some(ms);
            } else {
                notes.push(format!("tool {tool} disabled; treated as None"));
                head = rewrite_tool_none(&head);
            }
        }

        let raw = if two_phase && truncate_after_tool(&head).is_some() {
            let mut messages = ctx.messages();
            messages.push(ChatMessage::new(Role::Assistant, head.clone()));
            let cont = self.complete(&self.request(messages, t, Phase::Continuation), t)?;
            format!("{head}\n{}", cont.trim_start())
        } else {
            head
        };
        Ok(Decoded {
            raw,
            tool_result,
            copilot_latency_ms,
            notes,
        })
    }
}

fn check_spec(spec: &TaskSpec) -> Result<(), RolloutError> {
    let problems = env::validate(spec);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(RolloutError::InvalidTask(
            spec.task_id.clone(),
            problems.join("; "),
        ))
    }
}

/// One multi-turn episode with rollout index 0.
pub fn run_episode(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    cfg: &EpisodeConfig,
) -> Result<Trajectory, RolloutError> {
    check_spec(spec)?;
    cfg.validate()?;
    episode(spec, policy, copilot, cfg, 0, cfg.seed)
}

fn episode(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    cfg: &EpisodeConfig,
    rollout_index: usize,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    let ep = EpisodeCtx {
        spec,
        policy,
        copilot,
        cfg,
        rollout_index,
        seed,
    };
    let budget = cfg.max_steps.min(spec.max_steps);
    let mut state = spec.initial_state();
    let mut history = DialogueHistory::new(cfg.paradigm);
    let mut store = match &cfg.knowledge_dir {
        Some(dir) => KnowledgeStore::with_path(knowledge_path(dir, &spec.task_id, rollout_index)),
        None => KnowledgeStore::new(),
    };
    let mut summaries: Vec<String> = Vec::new();
    let mut steps = Vec::new();

    for t in 0..budget {
        if state.terminated.is_some() {
            break;
        }
        let screen = spec
            .screen(&state.current_screen)
            .ok_or_else(|| EnvError::UnknownScreen(state.current_screen.clone()))?;
        let ctx = build_context(&spec.instruction, &history, screen);
        let history_texts: Vec<String> =
            history.carried_texts().map(str::to_owned).collect();
        let started_at = Utc::now();
        let clock = Instant::now();
        let decoded = ep.decode(&ctx, t, &summaries, &store)?;
        let copilot_ms = decoded.copilot_latency_ms.unwrap_or(0);
        let policy_latency_ms = millis(clock).saturating_sub(copilot_ms);

        let parsed = parse_turn(&decoded.raw);
        let reward = score_step(spec, t, parsed.as_ref().ok(), &cfg.matching);
        let (turn, format_failure) = match parsed {
            Ok(turn) => {
                state = env::step(&state, spec, &turn.action)?;
                append_step(&mut history, &mut store, &turn)?;
                summaries.push(turn.summary.clone());
                (Some(turn), None)
            }
            Err(f) => {
                state = env::step(&state, spec, &Action::Wait { time: 0.0 })?;
                skip_step(&mut history);
                (None, Some(f))
            }
        };
        steps.push(StepRecord {
            index: t,
            screen_id: screen.id.clone(),
            raw_output: decoded.raw,
            turn,
            format_failure,
            tool_result: decoded.tool_result,
            reward,
            context_digest: digest(&ctx.user),
            history_texts,
            started_at,
            policy_latency_ms,
            copilot_latency_ms: decoded.copilot_latency_ms,
            notes: decoded.notes,
        });
    }
    if store.path().is_some() {
        store.persist()?;
    }
    Ok(Trajectory {
        task_id: spec.task_id.clone(),
        rollout_index,
        seed,
        mode: RolloutMode::MultiTurnAction,
        paradigm: cfg.paradigm,
        steps,
        success: env::check_success(&state, spec),
        final_screen: state.current_screen,
    })
}

/// Label used by the tool reward at step `t`.
pub fn expected_tool(spec: &TaskSpec, t: usize) -> ToolChoice {
    match &spec.tool_step_indices {
        Some(idx) if idx.contains(&t) => spec.tool_label,
        Some(_) => ToolChoice::None,
        None => spec.tool_label,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPrediction {
    pub task_id: String,
    pub step: usize,
    pub label: ToolChoice,
    pub predicted_tool: Option<ToolChoice>,
    pub raw_output: String,
    pub reward: Reward,
    pub context: PromptContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_failure: Option<FormatFailure>,
}

/// Single-turn tool prediction at golden step `t`, conditioned on the
/// expert actions and summaries of steps before `t`.
pub fn run_tool_prediction(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    t: usize,
    seed: u64,
) -> Result<ToolPrediction, RolloutError> {
    let len = spec.golden.len();
    if t >= len {
        return Err(RolloutError::StepOutOfRange {
            task_id: spec.task_id.clone(),
            step: t,
            len,
        });
    }
    let mut pairs = Vec::with_capacity(t);
    for (k, g) in spec.golden[..t].iter().enumerate() {
        let summary = g.summary.clone().ok_or_else(|| RolloutError::MissingExpertSummary {
            task_id: spec.task_id.clone(),
            step: k,
        })?;
        pairs.push((g.action.clone(), summary));
    }
    let history = DialogueHistory::from_expert(pairs);
    let state = env::replay(spec, spec.golden[..t].iter().map(|g| &g.action))?;
    let screen = spec
        .screen(&state.current_screen)
        .ok_or_else(|| EnvError::UnknownScreen(state.current_screen.clone()))?;
    let context = build_context(&spec.instruction, &history, screen);

    let req = CompletionRequest::new(context.messages())
        .with_seed(seed)
        .with_key(ScriptKey::new(&spec.task_id, t, Phase::FullTurn));
    let text = policy
        .complete(&req)
        .map_err(|source| RolloutError::Backend {
            task_id: spec.task_id.clone(),
            rollout_index: 0,
            step: t,
            source,
        })?
        .text;
    let mut raw = strip_results(&text);
    if peek_tool(&raw).is_some_and(|tool| tool.is_tool()) {
        raw = splice_result(&raw, "");
    }
    let label = expected_tool(spec, t);
    let (predicted_tool, reward, format_failure) = match parse_turn(&raw) {
        Ok(turn) => (
            Some(turn.tool),
            Reward::tool(1, u8::from(turn.tool == label)),
            None,
        ),
        Err(f) => (peek_tool(&raw), Reward::tool(0, 0), Some(f)),
    };
    Ok(ToolPrediction {
        task_id: spec.task_id.clone(),
        step: t,
        label,
        predicted_tool,
        raw_output: raw,
        reward,
        context,
        format_failure,
    })
}

/// `G` rollouts with seeds `seed + i`, returned in rollout order.
pub fn run_group(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    cfg: &EpisodeConfig,
) -> Result<Vec<Trajectory>, RolloutError> {
    check_spec(spec)?;
    cfg.validate()?;
    group_with_seed(spec, policy, copilot, cfg, cfg.seed)
}

fn group_with_seed(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    cfg: &EpisodeConfig,
    base_seed: u64,
) -> Result<Vec<Trajectory>, RolloutError> {
    let g = cfg.group_size;
    let workers = if cfg.jobs == 0 { g } else { cfg.jobs.min(g) };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Trajectory, RolloutError>>>> =
        Mutex::new((0..g).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= g {
                    break;
                }
                let seed = base_seed.wrapping_add(i as u64);
                let r = episode(spec, policy, copilot, cfg, i, seed);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every rollout index is filled"))
        .collect()
}

/// Discounted returns of each trajectory, right-padded with zeros.
pub fn group_returns(trajectories: &[Trajectory], gamma: f64) -> Vec<Vec<f64>> {
    pad_returns(
        trajectories
            .iter()
            .map(|t| discounted_returns(&t.rewards(), gamma))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAttempt {
    pub base_seed: u64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedGroup {
    pub task_id: String,
    /// Trajectories of the last attempt.
    pub trajectories: Vec<Trajectory>,
    pub advantages: crate::reward::AdvantageGroup<f64>,
    pub attempts: Vec<GateAttempt>,
    /// False when the retry budget ran out; the group should be discarded.
    pub passed: bool,
}

/// Sample groups until the advantage spread exceeds `eta`, drawing fresh
/// seeds each attempt, for at most `1 + gate_retry_budget` attempts.
pub fn run_gated_group(
    spec: &TaskSpec,
    policy: &dyn ModelBackend,
    copilot: &dyn ModelBackend,
    cfg: &EpisodeConfig,
    rcfg: &RewardConfig<f64>,
) -> Result<GatedGroup, RolloutError> {
    check_spec(spec)?;
    cfg.validate()?;
    rcfg.validate()?;
    if cfg.group_size < 2 {
        return Err(RewardError::GroupTooSmall(cfg.group_size).into());
    }
    let mut attempts = Vec::new();
    let mut attempt = 0u64;
    loop {
        let base_seed = cfg
            .seed
            .wrapping_add(attempt.wrapping_mul(cfg.group_size as u64));
        let trajectories = group_with_seed(spec, policy, copilot, cfg, base_seed)?;
        let mut adv =
            group_advantages(group_returns(&trajectories, rcfg.gamma), rcfg.gamma, rcfg.eps_std)?;
        let spread = advantage_spread(&adv);
        attempts.push(GateAttempt { base_seed, spread });
        adv.passed_gate = spread > rcfg.eta;
        if adv.passed_gate || attempt >= u64::from(rcfg.gate_retry_budget) {
            tracing::debug!(task = %spec.task_id, attempts = attempts.len(), passed = adv.passed_gate, "gate");
            return Ok(GatedGroup {
                task_id: spec.task_id.clone(),
                trajectories,
                passed: adv.passed_gate,
                advantages: adv,
                attempts,
            });
        }
        attempt += 1;
    }
}

/// One line of the trajectory log: a step plus the fields of its
/// trajectory, repeated so each line stands alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub task_id: String,
    pub rollout_index: usize,
    pub seed: u64,
    pub mode: RolloutMode,
    pub paradigm: HistoryParadigm,
    pub success: bool,
    pub final_screen: String,
    #[serde(flatten)]
    pub step: StepRecord,
}

/// One JSON line per step.
pub fn write_trajectory_log<W: Write>(
    mut w: W,
    trajectories: &[Trajectory],
) -> Result<(), RolloutError> {
    for tr in trajectories {
        for step in &tr.steps {
            let line = LogRecord {
                task_id: tr.task_id.clone(),
                rollout_index: tr.rollout_index,
                seed: tr.seed,
                mode: tr.mode,
                paradigm: tr.paradigm,
                success: tr.success,
                final_screen: tr.final_screen.clone(),
                step: step.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
#[error("trajectory log line {line}: {source}")]
pub struct LogDecodeError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

/// Parse a log back into per-line records, keeping line numbers.
pub fn read_log_records<R: BufRead>(
    reader: R,
) -> Result<Vec<(usize, LogRecord)>, RolloutError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| {
            RolloutError::Log(LogDecodeError {
                line: n + 1,
                source,
            })
        })?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

/// Regroup log lines into trajectories, in first-appearance order.
pub fn read_trajectory_log<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, RolloutError> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (_, rec) in read_log_records(reader)? {
        let found = out.iter_mut().find(|t| {
            t.task_id == rec.task_id && t.rollout_index == rec.rollout_index && t.seed == rec.seed
        });
        match found {
            Some(t) => t.steps.push(rec.step),
            None => out.push(Trajectory {
                task_id: rec.task_id,
                rollout_index: rec.rollout_index,
                seed: rec.seed,
                mode: rec.mode,
                paradigm: rec.paradigm,
                steps: vec![rec.step],
                success: rec.success,
                final_screen: rec.final_screen,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scripted_from_golden, ScriptedBackend};

    fn golden(id: &str) -> (TaskSpec, ScriptedBackend) {
        let spec = env::bundled_task(id).unwrap();
        let b = scripted_from_golden(&spec);
        (spec, b)
    }

    #[test]
    fn settings_open_golden() {
        let (spec, b) = golden("settings_open");
        let tr = run_episode(&spec, &b, &b, &EpisodeConfig::default()).unwrap();
        assert!(tr.success);
        assert_eq!(tr.steps.len(), 2);
        for s in &tr.steps {
            assert_eq!(s.reward.total, 1.0);
        }
    }

    #[test]
    fn malformed_policy_fails_with_zero_rewards() {
        let spec = env::bundled_task("settings_open").unwrap();
        let bad = ScriptedBackend::constant("just some text");
        let cfg = EpisodeConfig {
            max_steps: 5,
            ..EpisodeConfig::default()
        };
        let tr = run_episode(&spec, &bad, &bad, &cfg).unwrap();
        assert!(!tr.success);
        assert_eq!(tr.steps.len(), 5);
        assert!(tr.steps.iter().all(|s| s.reward.total == 0.0 && s.turn.is_none()));
    }

    #[test]
    fn disabled_tool_is_rewritten() {
        let (spec, b) = golden("cart_total");
        let cfg = EpisodeConfig {
            tools_enabled: ToolSet::NONE,
            ..EpisodeConfig::default()
        };
        let tr = run_episode(&spec, &b, &b, &cfg).unwrap();
        let s = &tr.steps[2];
        assert!(s.tool_result.is_none());
        assert!(!s.raw_output.contains("<result>"));
        assert_eq!(s.turn.as_ref().unwrap().tool, ToolChoice::None);
        assert!(s.notes.iter().any(|n| n.contains("disabled")));
    }

    #[test]
    fn result_is_injected_on_tool_steps() {
        let (spec, b) = golden("cart_total");
        let cfg = EpisodeConfig::default();
        let tr = run_episode(&spec, &b, &b, &cfg).unwrap();
        assert!(tr.success);
        let s = &tr.steps[2];
        let r = s.tool_result.as_ref().unwrap();
        assert_eq!(r.text, "22.75");
        assert_eq!(s.turn.as_ref().unwrap().tool_result.as_deref(), Some("22.75"));
    }

    #[test]
    fn single_phase_matches_two_phase() {
        let (spec, b) = golden("form_fill_email");
        let two = run_episode(&spec, &b, &b, &EpisodeConfig::default()).unwrap();
        let one = run_episode(
            &spec,
            &b,
            &b,
            &EpisodeConfig {
                two_phase_decoding: false,
                ..EpisodeConfig::default()
            },
        )
        .unwrap();
        let turns = |t: &Trajectory| t.steps.iter().map(|s| s.turn.clone()).collect::<Vec<_>>();
        assert_eq!(turns(&one), turns(&two));
        let no_stop = b.clone().without_stop_support();
        let cut = run_episode(&spec, &no_stop, &no_stop, &EpisodeConfig::default()).unwrap();
        assert_eq!(turns(&cut), turns(&two));
    }

    #[test]
    fn tool_prediction_rewards() {
        let (spec, b) = golden("scores_product");
        let p = run_tool_prediction(&spec, &b, 1, 0).unwrap();
        assert_eq!(p.label, ToolChoice::Calculator);
        assert_eq!(p.predicted_tool, Some(ToolChoice::Calculator));
        assert_eq!(p.reward.total, 1.0);
        let bad = ScriptedBackend::constant("nope");
        assert_eq!(run_tool_prediction(&spec, &bad, 1, 0).unwrap().reward.total, 0.0);
    }

    #[test]
    fn group_is_ordered_and_deterministic() {
        let (spec, b) = golden("wifi_toggle");
        let cfg = EpisodeConfig {
            group_size: 8,
            ..EpisodeConfig::default()
        };
        let g = run_group(&spec, &b, &b, &cfg).unwrap();
        assert_eq!(g.len(), 8);
        for (i, t) in g.iter().enumerate() {
            assert_eq!(t.rollout_index, i);
            assert_eq!(t.seed, i as u64);
        }
        let single = run_group(&spec, &b, &b, &EpisodeConfig { group_size: 1, ..cfg }).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn gate_gives_up_on_identical_groups() {
        let (spec, b) = golden("settings_open");
        let rcfg = RewardConfig {
            gate_retry_budget: 2,
            ..RewardConfig::default()
        };
        let g = run_gated_group(&spec, &b, &b, &EpisodeConfig::default(), &rcfg).unwrap();
        assert!(!g.passed);
        assert_eq!(g.attempts.len(), 3);
        assert_eq!(g.attempts[1].base_seed, 8);
    }

    #[test]
    fn log_has_one_line_per_step() {
        let (spec, b) = golden("settings_open");
        let tr = run_episode(&spec, &b, &b, &EpisodeConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_log(&mut buf, std::slice::from_ref(&tr)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["task_id", "screen_id", "raw_output", "reward", "started_at", "policy_latency_ms"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back = read_trajectory_log(text.as_bytes()).unwrap();
        assert_eq!(back, vec![tr]);
    }
}
