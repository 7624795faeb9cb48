#![allow(dead_code)]

use std::sync::Mutex;

use guiagent_core::actions::{
    Action, ActionKind, BBox, Button, GroundTruthStep, MatchConfig, Point, Status, SwipeDirection,
};
use guiagent_core::env::{parse_task, TaskSpec};
use guiagent_core::model::{
    Capabilities, Completion, CompletionRequest, ModelBackend, ModelError, Role, ScriptKey,
};
use guiagent_core::protocol::{ToolChoice, Turn};
use rand::seq::SliceRandom;
use rand::Rng;

/// A request as seen by a backend: routing key plus the user message.
#[derive(Debug, Clone)]
pub struct Seen {
    pub key: Option<ScriptKey>,
    pub seed: Option<u64>,
    pub user: String,
    pub all_text: String,
}

/// Wraps a backend and records every request it answers.
pub struct Recorder<B> {
    pub inner: B,
    pub seen: Mutex<Vec<Seen>>,
}

impl<B> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<Seen> {
        std::mem::take(&mut *self.seen.lock().unwrap())
    }
}

impl<B: ModelBackend> ModelBackend for Recorder<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError> {
        let user = req
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.clone())
            .collect::<Vec<_>>()
            .join("\n");
        let all_text = req
            .messages
            .iter()
            .map(|m| m.content.clone())
            .collect::<Vec<_>>()
            .join("\n");
        self.seen.lock().unwrap().push(Seen {
            key: req.key.clone(),
            seed: req.seed,
            user,
            all_text,
        });
        self.inner.complete(req)
    }
}

pub const THOUGHT_MARK: &str = "zqx-thought";

/// Single-screen task with `n` golden steps: `n - 1` waits, then terminate.
/// Every golden thought carries [`THOUGHT_MARK`].
pub fn long_task(n: usize) -> TaskSpec {
    assert!(n >= 2);
    let mut golden = Vec::new();
    for k in 0..n - 1 {
        golden.push(serde_json::json!({
            "action": {"action": "wait", "time": 1.0},
            "thought": format!("{THOUGHT_MARK} {k}: the list is still loading"),
            "summary": format!("Expert waited ({k})."),
        }));
    }
    golden.push(serde_json::json!({
        "action": {"action": "terminate", "status": "success"},
        "thought": format!("{THOUGHT_MARK} final: the page is ready"),
        "summary": "Expert finished.",
    }));
    let task = serde_json::json!({
        "format_version": 1,
        "task_id": format!("long_{n}"),
        "instruction": "Wait for the feed to load, then stop.",
        "initial_screen": "feed",
        "screens": [{
            "id": "feed",
            "app": "Feed",
            "width": 1080,
            "height": 2400,
            "widgets": [
                {"id": "spinner", "bbox": [500, 1100, 580, 1180], "text": "Loading", "kind": "label"}
            ]
        }],
        "success": {"kind": "on_screen", "screen": "feed"},
        "golden": golden,
        "tool_label": "None",
        "max_steps": n + 5,
        "difficulty": "easy",
    });
    parse_task(&task.to_string(), "long_task").expect("long task parses")
}

// ---------------------------------------------------------------------------
// Brute-force accuracy oracle.

fn oracle_norm(s: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.join(" ")
}

fn oracle_direction(a: Point, b: Point) -> Option<SwipeDirection> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    if dx == 0.0 && dy == 0.0 {
        None
    } else if dy.abs() >= dx.abs() && dy < 0.0 {
        Some(SwipeDirection::Up)
    } else if dy.abs() >= dx.abs() {
        Some(SwipeDirection::Down)
    } else if dx < 0.0 {
        Some(SwipeDirection::Left)
    } else {
        Some(SwipeDirection::Right)
    }
}

fn oracle_point(p: Point, gt: &GroundTruthStep, cfg: &MatchConfig) -> u8 {
    let b = gt.bbox.expect("coordinate ground truth has a bbox");
    let cx = (b.left + b.right) / 2.0;
    let cy = (b.top + b.bottom) / 2.0;
    let hw = (b.right - b.left) * cfg.bbox_enlarge_factor / 2.0;
    let hh = (b.bottom - b.top) * cfg.bbox_enlarge_factor / 2.0;
    let in_x = cx - hw <= p.x && p.x <= cx + hw;
    let in_y = cy - hh <= p.y && p.y <= cy + hh;
    if in_x && in_y {
        return 1;
    }
    let g = gt.action.coordinate().expect("coordinate ground truth");
    let d = (p.x - g.x).hypot(p.y - g.y);
    if d <= cfg.click_distance_threshold {
        1
    } else {
        0
    }
}

/// Accuracy term enumerated branch by branch over (pred kind, gt kind).
pub fn accuracy_oracle(pred: &Action, gt: &GroundTruthStep, cfg: &MatchConfig) -> u8 {
    use Action as A;
    match (pred, &gt.action) {
        (A::Click { coordinate }, A::Click { .. }) => oracle_point(*coordinate, gt, cfg),
        (A::LongPress { coordinate, .. }, A::LongPress { .. }) => {
            oracle_point(*coordinate, gt, cfg)
        }
        (A::Swipe { coordinate, coordinate2 }, A::Swipe { .. }) => {
            match oracle_direction(*coordinate, *coordinate2) {
                Some(d) if Some(d) == gt.swipe_direction => 1,
                _ => 0,
            }
        }
        (A::Type { text: p }, A::Type { text: g }) => u8::from(oracle_norm(p) == oracle_norm(g)),
        (A::Answer { text: p }, A::Answer { text: g }) => {
            u8::from(oracle_norm(p) == oracle_norm(g))
        }
        (A::Key { text: p }, A::Key { text: g }) => u8::from(oracle_norm(p) == oracle_norm(g)),
        (A::Open { text: p }, A::Open { text: g }) => u8::from(oracle_norm(p) == oracle_norm(g)),
        (A::SystemButton { button: p }, A::SystemButton { button: g }) => u8::from(p == g),
        (A::Wait { .. }, A::Wait { .. }) => 1,
        (A::Terminate { status: p }, A::Terminate { status: g }) => u8::from(p == g),
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Random generators (rand-based, for the acceptance loops).

pub const KINDS: [ActionKind; 10] = [
    ActionKind::Click,
    ActionKind::LongPress,
    ActionKind::Swipe,
    ActionKind::Type,
    ActionKind::Answer,
    ActionKind::Key,
    ActionKind::SystemButton,
    ActionKind::Open,
    ActionKind::Wait,
    ActionKind::Terminate,
];

const WORDS: [&str; 8] = ["Settings", "wifi", "Buy milk", "42", "HELLO  world", "alarm", "  7:30 ", "ok"];

pub fn rand_text<R: Rng>(rng: &mut R) -> String {
    let base = *WORDS.choose(rng).unwrap();
    match rng.gen_range(0..4) {
        0 => base.to_uppercase(),
        1 => format!("  {base}\t"),
        2 => base.replace(' ', "   "),
        _ => base.to_owned(),
    }
}

pub fn rand_point<R: Rng>(rng: &mut R) -> Point {
    // Mix integral and fractional coordinates so box edges get hit.
    if rng.gen_bool(0.5) {
        Point::new(rng.gen_range(0..1200) as f64, rng.gen_range(0..2600) as f64)
    } else {
        Point::new(rng.gen_range(0.0..1200.0), rng.gen_range(0.0..2600.0))
    }
}

pub fn rand_action<R: Rng>(rng: &mut R, kind: ActionKind) -> Action {
    match kind {
        ActionKind::Click => Action::Click {
            coordinate: rand_point(rng),
        },
        ActionKind::LongPress => Action::LongPress {
            coordinate: rand_point(rng),
            time: rng.gen_range(0.0..3.0),
        },
        ActionKind::Swipe => {
            let a = rand_point(rng);
            let b = if rng.gen_bool(0.05) {
                a
            } else if rng.gen_bool(0.1) {
                // exact diagonal: ties go vertical
                let d = rng.gen_range(1..300) as f64;
                Point::new(a.x + d, a.y + if rng.gen_bool(0.5) { d } else { -d }.max(-a.y))
            } else {
                rand_point(rng)
            };
            Action::Swipe {
                coordinate: a,
                coordinate2: b,
            }
        }
        ActionKind::Type => Action::Type {
            text: rand_text(rng),
        },
        ActionKind::Answer => Action::Answer {
            text: rand_text(rng),
        },
        ActionKind::Key => Action::Key {
            text: rand_text(rng),
        },
        ActionKind::Open => Action::Open {
            text: rand_text(rng),
        },
        ActionKind::SystemButton => Action::SystemButton {
            button: *Button::ALL.choose(rng).unwrap(),
        },
        ActionKind::Wait => Action::Wait {
            time: rng.gen_range(0.0..5.0),
        },
        ActionKind::Terminate => Action::Terminate {
            status: if rng.gen_bool(0.5) {
                Status::Success
            } else {
                Status::Failure
            },
        },
    }
}

pub fn rand_ground_truth<R: Rng>(rng: &mut R, kind: ActionKind) -> GroundTruthStep {
    let action = rand_action(rng, kind);
    let mut gt = GroundTruthStep::new(action.clone());
    if let Some(c) = action.coordinate() {
        let w = rng.gen_range(1..400) as f64;
        let h = rng.gen_range(1..300) as f64;
        gt = gt.with_bbox(BBox::new(c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0));
    }
    if kind == ActionKind::Swipe {
        let dirs = [
            SwipeDirection::Up,
            SwipeDirection::Down,
            SwipeDirection::Left,
            SwipeDirection::Right,
        ];
        gt = gt.with_direction(*dirs.choose(rng).unwrap());
    }
    gt
}

/// A prediction near the ground truth often enough to exercise both outcomes.
pub fn rand_prediction<R: Rng>(rng: &mut R, gt: &GroundTruthStep) -> Action {
    let kind = if rng.gen_bool(0.85) {
        gt.action.kind()
    } else {
        *KINDS.choose(rng).unwrap()
    };
    let mut a = rand_action(rng, kind);
    if let (Some(g), Some(b)) = (gt.action.coordinate(), gt.bbox) {
        let near = match rng.gen_range(0..4) {
            0 => Point::new(g.x + rng.gen_range(-20.0..20.0), g.y + rng.gen_range(-20.0..20.0)),
            1 => Point::new(b.left, b.top),
            2 => {
                let s = b.scaled(rng.gen_range(1.0..1.5));
                Point::new(s.right, s.center().y)
            }
            _ => rand_point(rng),
        };
        let near = Point::new(near.x.max(0.0), near.y.max(0.0));
        match &mut a {
            Action::Click { coordinate } | Action::LongPress { coordinate, .. } => {
                *coordinate = near
            }
            _ => {}
        }
    }
    if rng.gen_bool(0.3) {
        match (&mut a, &gt.action) {
            (Action::Type { text }, Action::Type { text: g })
            | (Action::Answer { text }, Action::Answer { text: g })
            | (Action::Key { text }, Action::Key { text: g })
            | (Action::Open { text }, Action::Open { text: g }) => *text = format!(" {} ", g.to_lowercase()),
            _ => {}
        }
    }
    a
}

pub fn rand_match_config<R: Rng>(rng: &mut R) -> MatchConfig {
    MatchConfig {
        click_distance_threshold: *[5.0, 14.0, 30.0].choose(rng).unwrap(),
        bbox_enlarge_factor: *[1.0, 1.2, 1.5].choose(rng).unwrap(),
    }
}

const SAFE: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:!?'\"()[]{}=+-*/_%$#@&";

/// Text with no `<`, trimmed, non-empty.
pub fn rand_safe_text<R: Rng>(rng: &mut R, max: usize) -> String {
    loop {
        let n = rng.gen_range(1..=max);
        let s: String = (0..n)
            .map(|_| SAFE[rng.gen_range(0..SAFE.len())] as char)
            .collect();
        let t = s.trim();
        if !t.is_empty() {
            return t.to_owned();
        }
    }
}

pub fn rand_turn<R: Rng>(rng: &mut R) -> Turn {
    let tool = *ToolChoice::ALL.choose(rng).unwrap();
    let kind = *KINDS.choose(rng).unwrap();
    let mut action = rand_action(rng, kind);
    match &mut action {
        Action::Type { text } | Action::Answer { text } | Action::Key { text } | Action::Open { text } => {
            *text = rand_safe_text(rng, 20)
        }
        _ => {}
    }
    Turn {
        tool,
        tool_result: tool.is_tool().then(|| {
            if rng.gen_bool(0.1) {
                String::new()
            } else {
                rand_safe_text(rng, 40)
            }
        }),
        thought: rand_safe_text(rng, 60),
        action,
        summary: rand_safe_text(rng, 40),
    }
}
