//! Action space of the GUI agent and the matching primitives used by the
//! type and accuracy rewards.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A pixel position measured from the left and top edges of the screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle in pixels: `(left, top, right, bottom)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.left, b.top, b.right, b.bottom]
    }
}

impl BBox {
    pub const fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn is_proper(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.left + self.right) / 2.0,
            (self.top + self.bottom) / 2.0,
        )
    }

    /// Closed containment: points on the edge are inside.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.left && p.x <= self.right && p.y >= self.top && p.y <= self.bottom
    }

    /// Scale the box about its center.
    pub fn scaled(&self, factor: f64) -> BBox {
        let c = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BBox::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.left >= 0.0 && self.top >= 0.0 && self.right <= width && self.bottom <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Button {
    Back,
    Home,
    Menu,
    Enter,
}

impl Button {
    pub const ALL: [Button; 4] = [Button::Back, Button::Home, Button::Menu, Button::Enter];

    pub fn as_str(&self) -> &'static str {
        match self {
            Button::Back => "Back",
            Button::Home => "Home",
            Button::Menu => "Menu",
            Button::Enter => "Enter",
        }
    }

    /// Case-insensitive lookup.
    pub fn parse(name: &str) -> Option<Button> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(name.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Failure,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Failure => "failure",
        }
    }

    pub fn parse(name: &str) -> Option<Status> {
        match name.trim().to_ascii_lowercase().as_str() {
            "success" => Some(Status::Success),
            "failure" => Some(Status::Failure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwipeDirection {
    Up,
    Down,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    LongPress,
    Swipe,
    Type,
    Answer,
    Key,
    SystemButton,
    Open,
    Wait,
    Terminate,
}

impl ActionKind {
    pub const ALL: [ActionKind; 10] = [
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

    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::LongPress => "long_press",
            ActionKind::Swipe => "swipe",
            ActionKind::Type => "type",
            ActionKind::Answer => "answer",
            ActionKind::Key => "key",
            ActionKind::SystemButton => "system_button",
            ActionKind::Open => "open",
            ActionKind::Wait => "wait",
            ActionKind::Terminate => "terminate",
        }
    }

    pub fn from_name(name: &str) -> Option<ActionKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Argument keys this kind requires, besides `action` itself.
    pub fn required_args(&self) -> &'static [&'static str] {
        match self {
            ActionKind::Click => &["coordinate"],
            ActionKind::LongPress => &["coordinate", "time"],
            ActionKind::Swipe => &["coordinate", "coordinate2"],
            ActionKind::Type | ActionKind::Answer | ActionKind::Key | ActionKind::Open => &["text"],
            ActionKind::SystemButton => &["button"],
            ActionKind::Wait => &["time"],
            ActionKind::Terminate => &["status"],
        }
    }

    pub fn is_coordinate_based(&self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::LongPress)
    }

    pub fn is_textual(&self) -> bool {
        matches!(
            self,
            ActionKind::Type | ActionKind::Answer | ActionKind::Key | ActionKind::Open
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One decoded agent action. Each variant carries exactly the arguments
/// its kind requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "serde_json::Value", try_from = "serde_json::Value")]
pub enum Action {
    Click { coordinate: Point },
    LongPress { coordinate: Point, time: f64 },
    Swipe { coordinate: Point, coordinate2: Point },
    Type { text: String },
    Answer { text: String },
    Key { text: String },
    SystemButton { button: Button },
    Open { text: String },
    Wait { time: f64 },
    Terminate { status: Status },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::LongPress { .. } => ActionKind::LongPress,
            Action::Swipe { .. } => ActionKind::Swipe,
            Action::Type { .. } => ActionKind::Type,
            Action::Answer { .. } => ActionKind::Answer,
            Action::Key { .. } => ActionKind::Key,
            Action::SystemButton { .. } => ActionKind::SystemButton,
            Action::Open { .. } => ActionKind::Open,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Terminate { .. } => ActionKind::Terminate,
        }
    }

    pub fn coordinate(&self) -> Option<Point> {
        match self {
            Action::Click { coordinate }
            | Action::LongPress { coordinate, .. }
            | Action::Swipe { coordinate, .. } => Some(*coordinate),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Action::Type { text }
            | Action::Answer { text }
            | Action::Key { text }
            | Action::Open { text } => Some(text),
            _ => None,
        }
    }

    /// The JSON object form used inside `<action>` tags. Keys are emitted in
    /// a fixed order with `action` first.
    pub fn to_json(&self) -> String {
        serde_json::Value::from(self.clone()).to_string()
    }
}

fn point_json(p: &Point) -> serde_json::Value {
    serde_json::json!([p.x, p.y])
}

impl From<Action> for serde_json::Value {
    fn from(a: Action) -> Self {
        let mut m = serde_json::Map::new();
        m.insert("action".into(), a.kind().name().into());
        match &a {
            Action::Click { coordinate } => {
                m.insert("coordinate".into(), point_json(coordinate));
            }
            Action::LongPress { coordinate, time } => {
                m.insert("coordinate".into(), point_json(coordinate));
                m.insert("time".into(), (*time).into());
            }
            Action::Swipe {
                coordinate,
                coordinate2,
            } => {
                m.insert("coordinate".into(), point_json(coordinate));
                m.insert("coordinate2".into(), point_json(coordinate2));
            }
            Action::Type { text }
            | Action::Answer { text }
            | Action::Key { text }
            | Action::Open { text } => {
                m.insert("text".into(), text.clone().into());
            }
            Action::SystemButton { button } => {
                m.insert("button".into(), button.as_str().into());
            }
            Action::Wait { time } => {
                m.insert("time".into(), (*time).into());
            }
            Action::Terminate { status } => {
                m.insert("status".into(), status.as_str().into());
            }
        }
        serde_json::Value::Object(m)
    }
}

impl TryFrom<serde_json::Value> for Action {
    type Error = ActionDecodeError;

    fn try_from(v: serde_json::Value) -> Result<Self, Self::Error> {
        decode_action_value(&v)
    }
}

/// Why an `<action>` payload failed to decode.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionDecodeError {
    #[error("malformed action object: {0}")]
    BadJson(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
}

/// Decode the body of an `<action>` tag.
pub fn parse_action_json(payload: &str) -> Result<Action, ActionDecodeError> {
    let value: serde_json::Value = serde_json::from_str(payload.trim())
        .map_err(|e| ActionDecodeError::BadJson(e.to_string()))?;
    decode_action_value(&value)
}

fn decode_action_value(value: &serde_json::Value) -> Result<Action, ActionDecodeError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ActionDecodeError::BadJson("expected a JSON object".into()))?;
    let name = match obj.get("action") {
        Some(serde_json::Value::String(s)) => s.as_str(),
        Some(_) => return Err(ActionDecodeError::BadJson("`action` must be a string".into())),
        None => return Err(ActionDecodeError::BadJson("missing `action` key".into())),
    };
    let kind =
        ActionKind::from_name(name).ok_or_else(|| ActionDecodeError::UnknownAction(name.into()))?;

    let required = kind.required_args();
    for key in obj.keys() {
        if key != "action" && !required.contains(&key.as_str()) {
            return Err(ActionDecodeError::BadArgument(format!(
                "unexpected key `{key}` for {kind}"
            )));
        }
    }
    let arg = |key: &str| {
        obj.get(key).ok_or_else(|| {
            ActionDecodeError::BadArgument(format!("{kind} requires `{key}`"))
        })
    };

    Ok(match kind {
        ActionKind::Click => Action::Click {
            coordinate: point_arg(arg("coordinate")?, "coordinate")?,
        },
        ActionKind::LongPress => Action::LongPress {
            coordinate: point_arg(arg("coordinate")?, "coordinate")?,
            time: seconds_arg(arg("time")?)?,
        },
        ActionKind::Swipe => Action::Swipe {
            coordinate: point_arg(arg("coordinate")?, "coordinate")?,
            coordinate2: point_arg(arg("coordinate2")?, "coordinate2")?,
        },
        ActionKind::Type => Action::Type {
            text: text_arg(arg("text")?)?,
        },
        ActionKind::Answer => Action::Answer {
            text: text_arg(arg("text")?)?,
        },
        ActionKind::Key => Action::Key {
            text: text_arg(arg("text")?)?,
        },
        ActionKind::Open => Action::Open {
            text: text_arg(arg("text")?)?,
        },
        ActionKind::SystemButton => {
            let raw = text_arg(arg("button")?)?;
            Action::SystemButton {
                button: Button::parse(&raw).ok_or_else(|| {
                    ActionDecodeError::BadArgument(format!("unknown button `{raw}`"))
                })?,
            }
        }
        ActionKind::Wait => Action::Wait {
            time: seconds_arg(arg("time")?)?,
        },
        ActionKind::Terminate => {
            let raw = text_arg(arg("status")?)?;
            Action::Terminate {
                status: Status::parse(&raw).ok_or_else(|| {
                    ActionDecodeError::BadArgument(format!("unknown status `{raw}`"))
                })?,
            }
        }
    })
}

fn point_arg(v: &serde_json::Value, key: &str) -> Result<Point, ActionDecodeError> {
    let bad = || ActionDecodeError::BadArgument(format!("`{key}` must be [x, y] with x, y >= 0"));
    let arr = v.as_array().ok_or_else(bad)?;
    if arr.len() != 2 {
        return Err(bad());
    }
    let x = arr[0].as_f64().ok_or_else(bad)?;
    let y = arr[1].as_f64().ok_or_else(bad)?;
    if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
        return Err(bad());
    }
    Ok(Point::new(x, y))
}

fn seconds_arg(v: &serde_json::Value) -> Result<f64, ActionDecodeError> {
    match v.as_f64() {
        Some(t) if t.is_finite() && t >= 0.0 => Ok(t),
        _ => Err(ActionDecodeError::BadArgument(
            "`time` must be a non-negative number of seconds".into(),
        )),
    }
}

fn text_arg(v: &serde_json::Value) -> Result<String, ActionDecodeError> {
    v.as_str()
        .map(str::to_owned)
        .ok_or_else(|| ActionDecodeError::BadArgument("expected a string".into()))
}

/// One step of an expert trajectory, carrying what the reward functions need
/// beyond the action itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStep {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swipe_direction: Option<SwipeDirection>,
}

impl GroundTruthStep {
    pub fn new(action: Action) -> Self {
        Self {
            action,
            bbox: None,
            swipe_direction: None,
        }
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn with_direction(mut self, dir: SwipeDirection) -> Self {
        self.swipe_direction = Some(dir);
        self
    }

    /// Structural problems with this step, if any.
    pub fn check(&self) -> Result<(), String> {
        let kind = self.action.kind();
        match (&self.bbox, kind.is_coordinate_based()) {
            (None, true) => return Err(format!("{kind} step needs a bbox")),
            (Some(_), false) => return Err(format!("{kind} step must not carry a bbox")),
            (Some(b), true) if !b.is_proper() => {
                return Err("bbox must have positive width and height".into())
            }
            _ => {}
        }
        if kind == ActionKind::Swipe && self.swipe_direction.is_none() {
            return Err("swipe step needs a swipe_direction".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Pixels.
    pub click_distance_threshold: f64,
    pub bbox_enlarge_factor: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            click_distance_threshold: 14.0,
            bbox_enlarge_factor: 1.2,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.click_distance_threshold > 0.0) || !(self.bbox_enlarge_factor >= 1.0) {
            return Err(MatchError::BadConfig(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("degenerate swipe: start and end coincide")]
    DegenerateSwipe,
    #[error("ground truth for {0} lacks `{1}`")]
    MissingGroundTruth(ActionKind, &'static str),
    #[error("invalid match config {0:?}")]
    BadConfig(MatchConfig),
}

pub fn type_reward(pred: &Action, gt: &Action) -> u8 {
    u8::from(pred.kind() == gt.kind())
}

/// Dominant-axis direction with y growing downward. Ties go vertical.
pub fn swipe_direction(start: Point, end: Point) -> Result<SwipeDirection, MatchError> {
    let dx = end.x - start.x;
    let dy = end.y - start.y;
    if dx == 0.0 && dy == 0.0 {
        return Err(MatchError::DegenerateSwipe);
    }
    Ok(if dy.abs() >= dx.abs() {
        if dy < 0.0 {
            SwipeDirection::Up
        } else {
            SwipeDirection::Down
        }
    } else if dx < 0.0 {
        SwipeDirection::Left
    } else {
        SwipeDirection::Right
    })
}

/// Lowercase, trim, and collapse internal whitespace runs.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn relaxed_text_match(pred: &str, gt: &str) -> u8 {
    u8::from(normalize_text(pred) == normalize_text(gt))
}

pub fn point_accuracy(
    pred: Point,
    gt: &GroundTruthStep,
    cfg: &MatchConfig,
) -> Result<u8, MatchError> {
    let kind = gt.action.kind();
    let bbox = gt
        .bbox
        .ok_or(MatchError::MissingGroundTruth(kind, "bbox"))?;
    if bbox.scaled(cfg.bbox_enlarge_factor).contains(&pred) {
        return Ok(1);
    }
    let gt_point = gt
        .action
        .coordinate()
        .ok_or(MatchError::MissingGroundTruth(kind, "coordinate"))?;
    Ok(u8::from(pred.distance(&gt_point) <= cfg.click_distance_threshold))
}

/// Accuracy of `pred` against `gt`, assuming the action types already match.
/// A kind mismatch yields 0.
pub fn accuracy_reward(
    pred: &Action,
    gt: &GroundTruthStep,
    cfg: &MatchConfig,
) -> Result<u8, MatchError> {
    match (pred, &gt.action) {
        (Action::Wait { .. }, Action::Wait { .. }) => Ok(1),
        (Action::Terminate { status: p }, Action::Terminate { status: g }) => Ok(u8::from(p == g)),
        (Action::SystemButton { button: p }, Action::SystemButton { button: g }) => {
            Ok(u8::from(p.as_str().eq_ignore_ascii_case(g.as_str())))
        }
        (Action::Type { text: p }, Action::Type { text: g })
        | (Action::Answer { text: p }, Action::Answer { text: g })
        | (Action::Key { text: p }, Action::Key { text: g })
        | (Action::Open { text: p }, Action::Open { text: g }) => Ok(relaxed_text_match(p, g)),
        (
            Action::Swipe {
                coordinate,
                coordinate2,
            },
            Action::Swipe { .. },
        ) => {
            let want = gt
                .swipe_direction
                .ok_or(MatchError::MissingGroundTruth(ActionKind::Swipe, "swipe_direction"))?;
            // a zero-length predicted swipe has no direction and cannot match
            match swipe_direction(*coordinate, *coordinate2) {
                Ok(dir) => Ok(u8::from(dir == want)),
                Err(_) => Ok(0),
            }
        }
        (Action::Click { coordinate }, Action::Click { .. })
        | (Action::LongPress { coordinate, .. }, Action::LongPress { .. }) => {
            point_accuracy(*coordinate, gt, cfg)
        }
        _ => Ok(0),
    }
}
