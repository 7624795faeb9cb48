//! Metrics over trajectories: pass@k, TM/GR/SR, tool usage, average steps,
//! a rule-based failure judge, and a synthetic tool-prediction task pack.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{normalize_text, point_accuracy, Action, BBox, MatchConfig, Status};
use crate::env::{
    ActionPattern, Difficulty, GoldenStep, Screen, SuccessPredicate, TaskSpec, Transition,
    Widget, WidgetKind, FORMAT_VERSION,
};
use crate::protocol::ToolChoice;
use crate::rollout::{score_step, Trajectory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} exceeds the {attempts} recorded attempts")]
    KTooLarge { k: usize, attempts: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("run record for {0} has no attempts")]
    NoAttempts(String),
    #[error("nothing to aggregate")]
    Empty,
    #[error("no task spec for {0}")]
    UnknownTask(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCounts {
    pub calculator: usize,
    pub retriever: usize,
}

impl ToolCounts {
    pub fn of(traj: &Trajectory) -> Self {
        let mut c = ToolCounts::default();
        for s in &traj.steps {
            if s.tool_result.is_none() {
                continue;
            }
            match s.turn.as_ref().map(|t| t.tool) {
                Some(ToolChoice::Calculator) => c.calculator += 1,
                Some(ToolChoice::Retriever) => c.retriever += 1,
                _ => match s.tool_result.as_ref().map(|r| r.role.tool()) {
                    Some(ToolChoice::Calculator) => c.calculator += 1,
                    Some(ToolChoice::Retriever) => c.retriever += 1,
                    _ => {}
                },
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.calculator + self.retriever
    }
}

/// Steps of a trajectory, with tool invocations counted as steps.
pub fn effective_steps(traj: &Trajectory) -> usize {
    traj.steps.len() + ToolCounts::of(traj).total()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub success: bool,
    pub steps: usize,
    pub tool_calls_by_role: ToolCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub attempts: Vec<Attempt>,
}

impl RunRecord {
    /// Records per task, attempts ordered by rollout index.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Vec<RunRecord> {
        let mut by_task: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
        for t in trajs {
            by_task.entry(&t.task_id).or_default().push(t);
        }
        by_task
            .into_iter()
            .map(|(task_id, mut ts)| {
                ts.sort_by_key(|t| (t.rollout_index, t.seed));
                RunRecord {
                    task_id: task_id.to_owned(),
                    attempts: ts
                        .iter()
                        .map(|t| Attempt {
                            success: t.success,
                            steps: effective_steps(t),
                            tool_calls_by_role: ToolCounts::of(t),
                        })
                        .collect(),
                }
            })
            .collect()
    }
}

/// 1 iff one of the first `k` attempts succeeded.
pub fn pass_at_k(record: &RunRecord, k: usize) -> Result<u8, EvalError> {
    if record.attempts.is_empty() {
        return Err(EvalError::NoAttempts(record.task_id.clone()));
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > record.attempts.len() {
        return Err(EvalError::KTooLarge {
            k,
            attempts: record.attempts.len(),
        });
    }
    Ok(u8::from(record.attempts[..k].iter().any(|a| a.success)))
}

/// Mean pass@k over tasks.
pub fn pass_at_k_rate(records: &[RunRecord], k: usize) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for r in records {
        hits += usize::from(pass_at_k(r, k)?);
    }
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepJudgment {
    pub type_match: bool,
    /// `None` when the golden action is not coordinate-based.
    pub grounded: Option<bool>,
    pub step_success: bool,
}

/// Judge each step against the golden step with the same index.
pub fn step_judgments(traj: &Trajectory, spec: &TaskSpec, cfg: &MatchConfig) -> Vec<StepJudgment> {
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let Some(golden) = spec.golden.get(t) else {
                return StepJudgment {
                    type_match: false,
                    grounded: None,
                    step_success: false,
                };
            };
            let gt = golden.ground_truth();
            let coord_step = gt.action.kind().is_coordinate_based();
            let Some(turn) = &step.turn else {
                return StepJudgment {
                    type_match: false,
                    grounded: coord_step.then_some(false),
                    step_success: false,
                };
            };
            let r = score_step(spec, t, Some(turn), cfg);
            let grounded = coord_step.then(|| {
                turn.action
                    .coordinate()
                    .is_some_and(|p| point_accuracy(p, &gt, cfg).unwrap_or(0) == 1)
            });
            StepJudgment {
                type_match: r.r_type == 1,
                grounded,
                step_success: r.total == 1.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub tm: f64,
    /// `None` when no judged step is coordinate-based.
    pub gr: Option<f64>,
    pub sr: f64,
    pub steps: usize,
    pub grounding_steps: usize,
}

fn summarize(judgments: &[StepJudgment]) -> StepMetrics {
    let n = judgments.len();
    let rate = |hits: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    };
    let tm = judgments.iter().filter(|j| j.type_match).count();
    let sr = judgments.iter().filter(|j| j.step_success).count();
    let grounding: Vec<bool> = judgments.iter().filter_map(|j| j.grounded).collect();
    let gr_hits = grounding.iter().filter(|&&g| g).count();
    StepMetrics {
        tm: rate(tm, n),
        gr: (!grounding.is_empty()).then(|| rate(gr_hits, grounding.len())),
        sr: rate(sr, n),
        steps: n,
        grounding_steps: grounding.len(),
    }
}

pub fn step_metrics(traj: &Trajectory, spec: &TaskSpec, cfg: &MatchConfig) -> StepMetrics {
    summarize(&step_judgments(traj, spec, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    pub calculator: f64,
    pub retriever: f64,
}

/// Tool calls per role divided by total steps (tool calls included).
pub fn tool_usage(trajs: &[Trajectory]) -> Result<ToolUsage, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = ToolCounts::default();
    let mut steps = 0usize;
    for t in trajs {
        let c = ToolCounts::of(t);
        counts.calculator += c.calculator;
        counts.retriever += c.retriever;
        steps += t.steps.len() + c.total();
    }
    if steps == 0 {
        return Ok(ToolUsage {
            calculator: 0.0,
            retriever: 0.0,
        });
    }
    Ok(ToolUsage {
        calculator: counts.calculator as f64 / steps as f64,
        retriever: counts.retriever as f64 / steps as f64,
    })
}

/// Mean steps per trajectory, tool calls included.
pub fn avg_steps(trajs: &[Trajectory]) -> Result<f64, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: usize = trajs.iter().map(effective_steps).sum();
    Ok(total as f64 / trajs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Memory,
    Progress,
    Math,
    Other,
}

/// Assigns a failure category to an unsuccessful trajectory.
pub trait ErrorJudge {
    /// `None` for successful trajectories.
    fn judge(&self, traj: &Trajectory, spec: &TaskSpec) -> Option<ErrorCategory>;
}

/// Default judge:
/// - the same action on the same screen `loop_len` times in a row is Progress;
/// - a wrong numeric answer on a Calculator task is Math;
/// - a wrong answer on a Retriever task is Memory;
/// - anything else is Other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleJudge {
    pub loop_len: usize,
}

impl Default for RuleJudge {
    fn default() -> Self {
        Self { loop_len: 3 }
    }
}

fn expected_answer(spec: &TaskSpec) -> Option<&str> {
    spec.golden.iter().rev().find_map(|g| match &g.action {
        Action::Answer { text } => Some(text.as_str()),
        _ => None,
    })
}

fn looks_numeric(s: &str) -> bool {
    let t = s.trim().trim_end_matches('.');
    !t.is_empty() && t.replace([',', '_'], "").parse::<f64>().is_ok()
}

impl ErrorJudge for RuleJudge {
    fn judge(&self, traj: &Trajectory, spec: &TaskSpec) -> Option<ErrorCategory> {
        if traj.success {
            return None;
        }
        let keyed: Vec<Option<(String, String)>> = traj
            .steps
            .iter()
            .map(|s| {
                s.turn
                    .as_ref()
                    .map(|t| (s.screen_id.clone(), t.action.to_json()))
            })
            .collect();
        if self.loop_len >= 2
            && keyed.windows(self.loop_len).any(|w| {
                w[0].is_some() && w.iter().all(|k| k == &w[0])
            })
        {
            return Some(ErrorCategory::Progress);
        }
        let answers: Vec<&str> = traj
            .steps
            .iter()
            .filter_map(|s| match s.turn.as_ref().map(|t| &t.action) {
                Some(Action::Answer { text }) => Some(text.as_str()),
                _ => None,
            })
            .collect();
        if let (Some(want), Some(got)) = (expected_answer(spec), answers.last()) {
            if normalize_text(want) != normalize_text(got) {
                match spec.tool_label {
                    ToolChoice::Calculator if looks_numeric(got) => {
                        return Some(ErrorCategory::Math)
                    }
                    ToolChoice::Retriever => return Some(ErrorCategory::Memory),
                    _ => {}
                }
            }
        }
        Some(ErrorCategory::Other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub attempts: usize,
    pub successes: usize,
    pub pass_at: BTreeMap<usize, u8>,
    pub metrics: StepMetrics,
    pub avg_steps: f64,
    pub tool_usage: ToolUsage,
    pub error_categories: BTreeMap<ErrorCategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub tasks: usize,
    pub trajectories: usize,
    pub success_rate: f64,
    /// Mean over tasks that have at least `k` attempts.
    pub pass_at: BTreeMap<usize, f64>,
    pub metrics: StepMetrics,
    pub avg_steps: f64,
    pub tool_usage: ToolUsage,
    pub error_categories: BTreeMap<ErrorCategory, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_task: Vec<TaskReport>,
    pub aggregate: AggregateReport,
}

fn count_errors(
    trajs: &[&Trajectory],
    spec: &TaskSpec,
    judge: &dyn ErrorJudge,
    into: &mut BTreeMap<ErrorCategory, usize>,
) {
    for t in trajs {
        if let Some(c) = judge.judge(t, spec) {
            *into.entry(c).or_default() += 1;
        }
    }
}

/// Per-task and pooled metrics. Step metrics pool steps across trajectories.
pub fn build_report(
    trajs: &[Trajectory],
    specs: &[TaskSpec],
    ks: &[usize],
    cfg: &MatchConfig,
    judge: &dyn ErrorJudge,
) -> Result<MetricsReport, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::Empty);
    }
    let spec_of = |id: &str| {
        specs
            .iter()
            .find(|s| s.task_id == id)
            .ok_or_else(|| EvalError::UnknownTask(id.to_owned()))
    };
    let records = RunRecord::from_trajectories(trajs);
    let mut per_task = Vec::with_capacity(records.len());
    let mut all_judgments = Vec::new();
    let mut all_errors = BTreeMap::new();
    for rec in &records {
        let spec = spec_of(&rec.task_id)?;
        let mine: Vec<&Trajectory> = trajs.iter().filter(|t| t.task_id == rec.task_id).collect();
        let owned: Vec<Trajectory> = mine.iter().map(|t| (*t).clone()).collect();
        let judgments: Vec<StepJudgment> = mine
            .iter()
            .flat_map(|t| step_judgments(t, spec, cfg))
            .collect();
        let mut errors = BTreeMap::new();
        count_errors(&mine, spec, judge, &mut errors);
        for (c, n) in &errors {
            *all_errors.entry(*c).or_default() += n;
        }
        let mut pass_at = BTreeMap::new();
        for &k in ks {
            if k >= 1 && k <= rec.attempts.len() {
                pass_at.insert(k, pass_at_k(rec, k)?);
            }
        }
        per_task.push(TaskReport {
            task_id: rec.task_id.clone(),
            attempts: rec.attempts.len(),
            successes: rec.attempts.iter().filter(|a| a.success).count(),
            pass_at,
            metrics: summarize(&judgments),
            avg_steps: avg_steps(&owned)?,
            tool_usage: tool_usage(&owned)?,
            error_categories: errors,
        });
        all_judgments.extend(judgments);
    }
    let mut pass_at = BTreeMap::new();
    for &k in ks {
        let eligible: Vec<RunRecord> = records
            .iter()
            .filter(|r| k >= 1 && k <= r.attempts.len())
            .cloned()
            .collect();
        if !eligible.is_empty() {
            pass_at.insert(k, pass_at_k_rate(&eligible, k)?);
        }
    }
    let aggregate = AggregateReport {
        tasks: records.len(),
        trajectories: trajs.len(),
        success_rate: trajs.iter().filter(|t| t.success).count() as f64 / trajs.len() as f64,
        pass_at,
        metrics: summarize(&all_judgments),
        avg_steps: avg_steps(trajs)?,
        tool_usage: tool_usage(trajs)?,
        error_categories: all_errors,
    };
    Ok(MetricsReport {
        per_task,
        aggregate,
    })
}

impl MetricsReport {
    /// One row per task plus a final `ALL` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let ks: Vec<usize> = self.aggregate.pass_at.keys().copied().collect();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = [
            "task_id",
            "attempts",
            "successes",
            "tm",
            "gr",
            "sr",
            "avg_steps",
            "calculator_freq",
            "retriever_freq",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(ks.iter().map(|k| format!("pass@{k}")));
        out.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.per_task {
            let mut row = vec![
                t.task_id.clone(),
                t.attempts.to_string(),
                t.successes.to_string(),
                t.metrics.tm.to_string(),
                opt(t.metrics.gr),
                t.metrics.sr.to_string(),
                t.avg_steps.to_string(),
                t.tool_usage.calculator.to_string(),
                t.tool_usage.retriever.to_string(),
            ];
            row.extend(ks.iter().map(|k| t.pass_at.get(k).map(|v| v.to_string()).unwrap_or_default()));
            out.write_record(&row)?;
        }
        let a = &self.aggregate;
        let mut row = vec![
            "ALL".to_owned(),
            a.trajectories.to_string(),
            a.success_rate.to_string(),
            a.metrics.tm.to_string(),
            opt(a.metrics.gr),
            a.metrics.sr.to_string(),
            a.avg_steps.to_string(),
            a.tool_usage.calculator.to_string(),
            a.tool_usage.retriever.to_string(),
        ];
        row.extend(ks.iter().map(|k| a.pass_at[k].to_string()));
        out.write_record(&row)?;
        out.flush()?;
        Ok(())
    }
}

/// Label counts for [`synth_tool_tasks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRatio {
    pub none: usize,
    pub retriever: usize,
    pub calculator: usize,
}

impl ToolRatio {
    pub const DEFAULT_MIX: ToolRatio = ToolRatio {
        none: 350,
        retriever: 170,
        calculator: 80,
    };

    pub fn total(&self) -> usize {
        self.none + self.retriever + self.calculator
    }
}

const APPS: &[&str] = &["Shop", "Market", "Pantry", "Garden", "Books", "Travel", "Music", "Fitness"];
const ITEMS: &[&str] = &[
    "apples", "bread", "coffee", "eggs", "flour", "grapes", "honey", "juice", "kale", "lemons",
    "milk", "nuts", "oats", "pears", "rice", "salt", "tea", "yogurt",
];
const W: f64 = 1080.0;
const H: f64 = 2400.0;

fn row_box(i: usize) -> BBox {
    let top = 300.0 + 140.0 * i as f64;
    BBox::new(40.0, top, 1040.0, top + 120.0)
}

fn next_box() -> BBox {
    BBox::new(40.0, 2200.0, 1040.0, 2340.0)
}

fn click_golden(b: BBox, thought: String, summary: String) -> GoldenStep {
    GoldenStep {
        action: Action::Click {
            coordinate: b.center(),
        },
        bbox: Some(b),
        swipe_direction: None,
        thought: Some(thought),
        summary: Some(summary),
        tool: None,
        tool_output: None,
    }
}

fn plain_golden(action: Action, thought: String, summary: String) -> GoldenStep {
    GoldenStep {
        action,
        bbox: None,
        swipe_direction: None,
        thought: Some(thought),
        summary: Some(summary),
        tool: None,
        tool_output: None,
    }
}

fn synth_one(label: ToolChoice, index: usize, seed: u64, rng: &mut ChaCha8Rng) -> TaskSpec {
    let app = APPS[rng.gen_range(0..APPS.len())];
    let n = rng.gen_range(2..=4);
    let names: Vec<&str> = ITEMS.choose_multiple(rng, n).copied().collect();
    let prices: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=99)).collect();
    let listing = names
        .iter()
        .zip(&prices)
        .map(|(nm, p)| format!("{nm} {p}"))
        .collect::<Vec<_>>()
        .join(", ");

    let list_widgets: Vec<Widget> = names
        .iter()
        .zip(&prices)
        .enumerate()
        .map(|(i, (nm, p))| Widget {
            id: format!("row{i}"),
            bbox: row_box(i),
            text: format!("{nm} {p}"),
            kind: WidgetKind::Label,
        })
        .chain(std::iter::once(Widget {
            id: "next".into(),
            bbox: next_box(),
            text: "Next".into(),
            kind: WidgetKind::Button,
        }))
        .collect();
    let detail_widgets: Vec<Widget> = names
        .iter()
        .enumerate()
        .map(|(i, nm)| Widget {
            id: format!("entry{i}"),
            bbox: row_box(i),
            text: format!("Order {nm}"),
            kind: WidgetKind::ListItem,
        })
        .collect();
    let screen = |id: &str, app: &str, widgets: Vec<Widget>| Screen {
        id: id.into(),
        app: app.into(),
        width: W,
        height: H,
        widgets,
    };
    let screens = vec![
        screen("home", "launcher", Vec::new()),
        screen("list", app, list_widgets),
        screen("detail", app, detail_widgets),
        screen("done", app, Vec::new()),
    ];
    let mut transitions = vec![
        Transition {
            from: "home".into(),
            on: ActionPattern::Open { app: app.into() },
            to: Some("list".into()),
            effect: None,
        },
        Transition {
            from: "list".into(),
            on: ActionPattern::Click {
                widget: "next".into(),
            },
            to: Some("detail".into()),
            effect: None,
        },
    ];

    let mut golden = vec![
        plain_golden(
            Action::Open { text: app.into() },
            format!("Open {app} to see the list."),
            format!("Opened {app}."),
        ),
        click_golden(
            next_box(),
            format!("The list shows {listing}. Continue to the next page."),
            "Moved to the next page.".into(),
        ),
    ];

    let pick = rng.gen_range(0..n);
    let variant = rng.gen_range(0..3);
    let (instruction, success, decisive) = match label {
        ToolChoice::Retriever => {
            let (nm, p) = (names[pick], prices[pick]);
            let instruction = [
                format!("Open {app}, page past the price list, then answer with the price of {nm}."),
                format!("In {app}, go to the second page and tell me what {nm} cost on the first page."),
                format!("Check {app}'s price list, move on, and report the price of {nm}."),
            ][variant]
                .clone();
            let step = GoldenStep {
                action: Action::Answer {
                    text: p.to_string(),
                },
                bbox: None,
                swipe_direction: None,
                thought: Some(format!("The price of {nm} was on the previous page; recall it.")),
                summary: Some(format!("Answered with the price of {nm}.")),
                tool: Some(ToolChoice::Retriever),
                tool_output: Some(format!(
                    "<think>The records list {listing}.</think> <answer> {nm} costs {p}. </answer>"
                )),
            };
            (instruction, SuccessPredicate::Answered { text: p.to_string() }, step)
        }
        ToolChoice::Calculator => {
            let total: u32 = prices.iter().sum();
            let expr = prices
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" + ");
            let instruction = [
                format!("Open {app}, read the price list, go to the next page and answer with the total of all prices."),
                format!("In {app}, add up every price on the list and report the sum."),
                format!("Use {app} to find how much all listed items cost together."),
            ][variant]
                .clone();
            let step = GoldenStep {
                action: Action::Answer {
                    text: total.to_string(),
                },
                bbox: None,
                swipe_direction: None,
                thought: Some(format!("Sum the prices {expr}.")),
                summary: Some("Answered with the total price.".into()),
                tool: Some(ToolChoice::Calculator),
                tool_output: Some(format!(
                    "<think>Add the listed prices.</think>\n<python>\nprint({expr})\n</python>"
                )),
            };
            (
                instruction,
                SuccessPredicate::Answered {
                    text: total.to_string(),
                },
                step,
            )
        }
        ToolChoice::None => {
            let nm = names[pick];
            let widget = format!("entry{pick}");
            transitions.push(Transition {
                from: "detail".into(),
                on: ActionPattern::Click {
                    widget: widget.clone(),
                },
                to: Some("done".into()),
                effect: None,
            });
            let instruction = [
                format!("Open {app}, go to the next page and open the {nm} order."),
                format!("In {app}, move past the list and tap the order for {nm}."),
                format!("Navigate {app} to the orders page and select {nm}."),
            ][variant]
                .clone();
            let step = click_golden(
                row_box(pick),
                format!("Tap the {nm} order."),
                format!("Opened the {nm} order."),
            );
            (
                instruction,
                SuccessPredicate::OnScreen {
                    screen: "done".into(),
                },
                step,
            )
        }
    };
    golden.push(decisive);
    golden.push(plain_golden(
        Action::Terminate {
            status: Status::Success,
        },
        "The task is complete.".into(),
        "Task finished.".into(),
    ));

    TaskSpec {
        format_version: FORMAT_VERSION,
        task_id: format!("synth_{seed}_{index:04}"),
        instruction,
        initial_screen: "home".into(),
        screens,
        transitions,
        success,
        golden,
        tool_label: label,
        tool_step_indices: label
            .is_tool()
            .then(|| [SYNTH_TOOL_STEP].into_iter().collect()),
        max_steps: 30,
        difficulty: Difficulty::Easy,
    }
}

/// Deterministic labeled tool-prediction tasks with exact label counts.
/// The decisive step is golden index 2.
pub fn synth_tool_tasks(ratio: ToolRatio, seed: u64) -> Vec<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<ToolChoice> = std::iter::repeat_n(ToolChoice::None, ratio.none)
        .chain(std::iter::repeat_n(ToolChoice::Retriever, ratio.retriever))
        .chain(std::iter::repeat_n(ToolChoice::Calculator, ratio.calculator))
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| synth_one(label, i, seed, &mut rng))
        .collect()
}

/// Decisive step of a synthetic task.
pub const SYNTH_TOOL_STEP: usize = 2;
