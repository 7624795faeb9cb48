//! Deterministic scripted GUI environments.
//!
//! A task pack is one JSON document per task. Screens are structured widget
//! lists rather than pixels; transition rules are matched in declaration
//! order and unmatched actions are no-ops that still consume a step.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{
    normalize_text, swipe_direction, Action, BBox, Button, GroundTruthStep, Status,
    SwipeDirection,
};
use crate::protocol::ToolChoice;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read task pack {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode task pack {path} at line {line}, column {column}: {message}")]
    Decode {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("episode already terminated")]
    Terminated,
    #[error("step budget of {0} exhausted")]
    BudgetExhausted(usize),
    #[error("golden step {index} out of range (trajectory has {len} steps)")]
    StepOutOfRange { index: usize, len: usize },
    #[error("unknown screen `{0}`")]
    UnknownScreen(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    Field,
    Label,
    ListItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widget {
    pub id: String,
    pub bbox: BBox,
    #[serde(default)]
    pub text: String,
    pub kind: WidgetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Screen {
    pub id: String,
    pub app: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub widgets: Vec<Widget>,
}

impl Screen {
    pub fn widget(&self, id: &str) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.id == id)
    }

    /// First widget (in declaration order) whose box contains the point.
    pub fn hit(&self, x: f64, y: f64) -> Option<&Widget> {
        let p = crate::actions::Point::new(x, y);
        self.widgets.iter().find(|w| w.bbox.contains(&p))
    }

    /// Text observation handed to the policy in place of a screenshot.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "Screen `{}` of app `{}` ({}x{} px)\n",
            self.id, self.app, self.width, self.height
        );
        for w in &self.widgets {
            let kind = match w.kind {
                WidgetKind::Button => "button",
                WidgetKind::Field => "field",
                WidgetKind::Label => "label",
                WidgetKind::ListItem => "list_item",
            };
            let b = w.bbox;
            let _ = writeln!(
                out,
                "- [{kind}] {} \"{}\" at ({}, {}, {}, {})",
                w.id, w.text, b.left, b.top, b.right, b.bottom
            );
        }
        out
    }
}

/// What an action must look like for a transition rule to fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionPattern {
    Click { widget: String },
    LongPress { widget: String },
    Swipe { direction: SwipeDirection },
    Open { app: String },
    SystemButton { button: Button },
    Key { text: String },
    Type {
        #[serde(default)]
        field: Option<String>,
    },
    Answer {
        #[serde(default)]
        text: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub on: ActionPattern,
    /// Destination screen; `None` keeps the current one.
    #[serde(default)]
    pub to: Option<String>,
    /// Side effect recorded when the rule fires.
    #[serde(default)]
    pub effect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideEffect {
    pub screen: String,
    pub target: String,
    pub text: String,
}

impl SideEffect {
    pub const RULE_TARGET: &'static str = "effect";
}

/// Success condition over the final environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuccessPredicate {
    OnScreen { screen: String },
    /// Some emitted answer matches under relaxed matching.
    Answered { text: String },
    /// The last text typed into `field` matches under relaxed matching.
    FieldEquals { field: String, text: String },
    EffectRecorded { effect: String },
    All { of: Vec<SuccessPredicate> },
    Any { of: Vec<SuccessPredicate> },
}

impl SuccessPredicate {
    pub fn holds(&self, state: &EnvState) -> bool {
        match self {
            SuccessPredicate::OnScreen { screen } => &state.current_screen == screen,
            SuccessPredicate::Answered { text } => {
                let want = normalize_text(text);
                state.answers.iter().any(|a| normalize_text(a) == want)
            }
            SuccessPredicate::FieldEquals { field, text } => state
                .side_effects
                .iter()
                .rev()
                .find(|e| &e.target == field)
                .is_some_and(|e| normalize_text(&e.text) == normalize_text(text)),
            SuccessPredicate::EffectRecorded { effect } => state
                .side_effects
                .iter()
                .any(|e| e.target == SideEffect::RULE_TARGET && &e.text == effect),
            SuccessPredicate::All { of } => of.iter().all(|p| p.holds(state)),
            SuccessPredicate::Any { of } => of.iter().any(|p| p.holds(state)),
        }
    }

    fn screens(&self, out: &mut Vec<String>) {
        match self {
            SuccessPredicate::OnScreen { screen } => out.push(screen.clone()),
            SuccessPredicate::All { of } | SuccessPredicate::Any { of } => {
                of.iter().for_each(|p| p.screens(out))
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// One expert step: the ground truth the rewards use, plus the expert
/// reasoning, summary and tool content that go with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenStep {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swipe_direction: Option<SwipeDirection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    /// Expert progress summary after this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// Tool the expert calls at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolChoice>,
    /// Canned copilot output for the tool call at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_output: Option<String>,
}

impl GoldenStep {
    pub fn ground_truth(&self) -> GroundTruthStep {
        GroundTruthStep {
            action: self.action.clone(),
            bbox: self.bbox,
            swipe_direction: self.swipe_direction,
        }
    }

    pub fn tool(&self) -> ToolChoice {
        self.tool.unwrap_or(ToolChoice::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub format_version: u32,
    pub task_id: String,
    pub instruction: String,
    pub initial_screen: String,
    pub screens: Vec<Screen>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    pub success: SuccessPredicate,
    pub golden: Vec<GoldenStep>,
    pub tool_label: ToolChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_step_indices: Option<BTreeSet<usize>>,
    pub max_steps: usize,
    pub difficulty: Difficulty,
}

impl TaskSpec {
    pub fn screen(&self, id: &str) -> Option<&Screen> {
        self.screens.iter().find(|s| s.id == id)
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            current_screen: self.initial_screen.clone(),
            focused_field: None,
            side_effects: Vec::new(),
            answers: Vec::new(),
            step_count: 0,
            terminated: None,
        }
    }

    pub fn is_tool_step(&self, t: usize) -> bool {
        self.tool_step_indices
            .as_ref()
            .is_some_and(|s| s.contains(&t))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("task spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub current_screen: String,
    #[serde(default)]
    pub focused_field: Option<String>,
    pub side_effects: Vec<SideEffect>,
    pub answers: Vec<String>,
    pub step_count: usize,
    pub terminated: Option<Status>,
}

pub fn parse_task(json: &str, origin: &str) -> Result<TaskSpec, EnvError> {
    serde_json::from_str(json).map_err(|e| EnvError::Decode {
        path: origin.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_task(&text, &path.display().to_string())
}

/// Load every `*.json` task pack in a directory, sorted by file name.
pub fn load_task_dir(dir: impl AsRef<Path>) -> Result<Vec<TaskSpec>, EnvError> {
    let dir = dir.as_ref();
    let io = |source| EnvError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.extension().is_some_and(|e| e == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(load_task).collect()
}

/// Replay-based validation. Problems are listed, never thrown.
pub fn validate(spec: &TaskSpec) -> Vec<String> {
    let mut diags = Vec::new();
    if spec.format_version != FORMAT_VERSION {
        diags.push(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            spec.format_version
        ));
    }

    let mut ids = HashSet::new();
    for s in &spec.screens {
        if !ids.insert(s.id.as_str()) {
            diags.push(format!("duplicate screen id `{}`", s.id));
        }
        let mut wids = HashSet::new();
        for w in &s.widgets {
            if !wids.insert(w.id.as_str()) {
                diags.push(format!("screen `{}`: duplicate widget id `{}`", s.id, w.id));
            }
            if !w.bbox.is_proper() || !w.bbox.within(s.width, s.height) {
                diags.push(format!(
                    "screen `{}`: widget `{}` bbox outside screen bounds or empty",
                    s.id, w.id
                ));
            }
        }
    }
    if spec.screen(&spec.initial_screen).is_none() {
        diags.push(format!("initial screen `{}` not defined", spec.initial_screen));
    }
    for (i, t) in spec.transitions.iter().enumerate() {
        let Some(from) = spec.screen(&t.from) else {
            diags.push(format!("transition {i}: unknown source screen `{}`", t.from));
            continue;
        };
        if let Some(to) = &t.to {
            if spec.screen(to).is_none() {
                diags.push(format!("transition {i}: unknown target screen `{to}`"));
            }
        }
        match &t.on {
            ActionPattern::Click { widget } | ActionPattern::LongPress { widget } => {
                if from.widget(widget).is_none() {
                    diags.push(format!(
                        "transition {i}: widget `{widget}` not on screen `{}`",
                        t.from
                    ));
                }
            }
            ActionPattern::Type { field: Some(field) } => {
                if from.widget(field).is_none() {
                    diags.push(format!(
                        "transition {i}: field `{field}` not on screen `{}`",
                        t.from
                    ));
                }
            }
            _ => {}
        }
    }
    let mut pred_screens = Vec::new();
    spec.success.screens(&mut pred_screens);
    for s in pred_screens {
        if spec.screen(&s).is_none() {
            diags.push(format!("success predicate names unknown screen `{s}`"));
        }
    }

    if spec.golden.is_empty() {
        diags.push("golden trajectory is empty".into());
    }
    if spec.max_steps == 0 {
        diags.push("max_steps must be at least 1".into());
    }
    if spec.golden.len() > spec.max_steps {
        diags.push(format!(
            "golden trajectory has {} steps, above max_steps {}",
            spec.golden.len(),
            spec.max_steps
        ));
    }
    for (i, g) in spec.golden.iter().enumerate() {
        if let Err(e) = g.ground_truth().check() {
            diags.push(format!("golden step {i}: {e}"));
        }
        if g.tool().is_tool() != spec.is_tool_step(i) {
            diags.push(format!(
                "golden step {i}: tool `{}` disagrees with tool_step_indices",
                g.tool()
            ));
        }
        if g.tool().is_tool() && g.tool() != spec.tool_label {
            diags.push(format!(
                "golden step {i}: tool `{}` differs from tool_label `{}`",
                g.tool(),
                spec.tool_label
            ));
        }
    }
    if let Some(idx) = &spec.tool_step_indices {
        if spec.tool_label == ToolChoice::None && !idx.is_empty() {
            diags.push("tool_step_indices given for a task labeled None".into());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= spec.golden.len()) {
            diags.push(format!("tool step index {bad} beyond golden trajectory"));
        }
    }

    if diags.is_empty() {
        match replay(spec, spec.golden.iter().map(|g| &g.action)) {
            Ok(state) if check_success(&state, spec) => {}
            Ok(_) => diags.push("golden does not reach success".into()),
            Err(e) => diags.push(format!("golden replay failed: {e}")),
        }
    }
    diags
}

/// Run a sequence of actions from the initial state.
pub fn replay<'a>(
    spec: &TaskSpec,
    actions: impl IntoIterator<Item = &'a Action>,
) -> Result<EnvState, EnvError> {
    let mut state = spec.initial_state();
    for a in actions {
        state = step(&state, spec, a)?;
    }
    Ok(state)
}

fn pattern_matches(
    pattern: &ActionPattern,
    action: &Action,
    screen: &Screen,
    focused: Option<&str>,
) -> bool {
    let inside = |widget: &str, p: crate::actions::Point| {
        screen
            .widget(widget)
            .is_some_and(|w| w.bbox.contains(&p))
    };
    match (pattern, action) {
        (ActionPattern::Click { widget }, Action::Click { coordinate }) => {
            inside(widget, *coordinate)
        }
        (ActionPattern::LongPress { widget }, Action::LongPress { coordinate, .. }) => {
            inside(widget, *coordinate)
        }
        (
            ActionPattern::Swipe { direction },
            Action::Swipe {
                coordinate,
                coordinate2,
            },
        ) => swipe_direction(*coordinate, *coordinate2).is_ok_and(|d| d == *direction),
        (ActionPattern::Open { app }, Action::Open { text }) => {
            normalize_text(app) == normalize_text(text)
        }
        (ActionPattern::SystemButton { button }, Action::SystemButton { button: b }) => {
            button == b
        }
        (ActionPattern::Key { text }, Action::Key { text: t }) => {
            normalize_text(text) == normalize_text(t)
        }
        (ActionPattern::Type { field }, Action::Type { .. }) => match field {
            Some(f) => focused == Some(f.as_str()),
            None => true,
        },
        (ActionPattern::Answer { text }, Action::Answer { text: t }) => match text {
            Some(want) => normalize_text(want) == normalize_text(t),
            None => true,
        },
        _ => false,
    }
}

/// Advance the environment by one action.
pub fn step(state: &EnvState, spec: &TaskSpec, action: &Action) -> Result<EnvState, EnvError> {
    if state.terminated.is_some() {
        return Err(EnvError::Terminated);
    }
    if state.step_count >= spec.max_steps {
        return Err(EnvError::BudgetExhausted(spec.max_steps));
    }
    let screen = spec
        .screen(&state.current_screen)
        .ok_or_else(|| EnvError::UnknownScreen(state.current_screen.clone()))?;

    let mut next = state.clone();
    next.step_count += 1;

    match action {
        Action::Click { coordinate } => {
            next.focused_field = screen
                .hit(coordinate.x, coordinate.y)
                .filter(|w| w.kind == WidgetKind::Field)
                .map(|w| w.id.clone());
        }
        Action::Type { text } => {
            if let Some(field) = &state.focused_field {
                next.side_effects.push(SideEffect {
                    screen: screen.id.clone(),
                    target: field.clone(),
                    text: text.clone(),
                });
            }
        }
        Action::Answer { text } => next.answers.push(text.clone()),
        Action::Terminate { status } => {
            next.terminated = Some(*status);
            return Ok(next);
        }
        _ => {}
    }

    let focused = state.focused_field.as_deref();
    let rule = spec
        .transitions
        .iter()
        .filter(|t| t.from == screen.id)
        .find(|t| pattern_matches(&t.on, action, screen, focused));
    if let Some(rule) = rule {
        if let Some(effect) = &rule.effect {
            next.side_effects.push(SideEffect {
                screen: screen.id.clone(),
                target: SideEffect::RULE_TARGET.into(),
                text: effect.clone(),
            });
        }
        if let Some(to) = &rule.to {
            if spec.screen(to).is_none() {
                return Err(EnvError::UnknownScreen(to.clone()));
            }
            if to != &screen.id {
                next.focused_field = None;
            }
            next.current_screen = to.clone();
        }
    }
    Ok(next)
}

/// Success requires both the task predicate and a `terminate(success)`.
pub fn check_success(state: &EnvState, spec: &TaskSpec) -> bool {
    state.terminated == Some(Status::Success) && spec.success.holds(state)
}

pub fn step_ground_truth(spec: &TaskSpec, t: usize) -> Result<GroundTruthStep, EnvError> {
    spec.golden
        .get(t)
        .map(GoldenStep::ground_truth)
        .ok_or(EnvError::StepOutOfRange {
            index: t,
            len: spec.golden.len(),
        })
}

/// Whether a golden step's action is coordinate-based.
pub fn is_grounding_step(step: &GroundTruthStep) -> bool {
    step.action.kind().is_coordinate_based()
}

const BUNDLED: &[(&str, &str)] = &[
    ("settings_open", include_str!("../tasks/settings_open.json")),
    ("wifi_toggle", include_str!("../tasks/wifi_toggle.json")),
    ("contacts_scroll", include_str!("../tasks/contacts_scroll.json")),
    ("clock_alarm", include_str!("../tasks/clock_alarm.json")),
    ("notes_delete", include_str!("../tasks/notes_delete.json")),
    ("browser_back_home", include_str!("../tasks/browser_back_home.json")),
    ("form_fill_email", include_str!("../tasks/form_fill_email.json")),
    ("flight_to_calendar", include_str!("../tasks/flight_to_calendar.json")),
    ("stock_price_recall", include_str!("../tasks/stock_price_recall.json")),
    ("scores_product", include_str!("../tasks/scores_product.json")),
    ("cart_total", include_str!("../tasks/cart_total.json")),
];

/// The task suite shipped with the crate.
pub fn bundled_tasks() -> Vec<TaskSpec> {
    BUNDLED
        .iter()
        .map(|(name, json)| {
            parse_task(json, name).unwrap_or_else(|e| panic!("bundled task {name}: {e}"))
        })
        .collect()
}

pub fn bundled_task(task_id: &str) -> Option<TaskSpec> {
    BUNDLED
        .iter()
        .find(|(name, _)| *name == task_id)
        .map(|(name, json)| parse_task(json, name).expect("bundled task decodes"))
}

/// Bundled task packs as `(file stem, json)` pairs.
pub fn bundled_sources() -> impl Iterator<Item = (&'static str, &'static str)> {
    BUNDLED.iter().copied()
}
