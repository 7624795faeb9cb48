//! The tagged turn format:
//!
//! ```text
//! <tool>Calculator|Retriever|None</tool>
//! <result>...</result>        (only when a tool was called; injected by the harness)
//! <think>...</think>
//! <action>{json}</action>
//! <summary>...</summary>
//! ```
//!
//! `parse_turn` is total: every input produces a [`Turn`] or exactly one
//! [`FormatFailure`], the first structural defect in document order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{parse_action_json, Action, ActionDecodeError};

pub const TOOL_TAG: &str = "tool";
pub const RESULT_TAG: &str = "result";
pub const THINK_TAG: &str = "think";
pub const ACTION_TAG: &str = "action";
pub const SUMMARY_TAG: &str = "summary";

/// Role the policy assigns to the copilot model at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolChoice {
    Calculator,
    Retriever,
    None,
}

impl ToolChoice {
    pub const ALL: [ToolChoice; 3] = [ToolChoice::Calculator, ToolChoice::Retriever, ToolChoice::None];

    pub fn as_str(&self) -> &'static str {
        match self {
            ToolChoice::Calculator => "Calculator",
            ToolChoice::Retriever => "Retriever",
            ToolChoice::None => "None",
        }
    }

    /// Case-insensitive; surrounding whitespace is ignored.
    pub fn parse(name: &str) -> Option<ToolChoice> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(name.trim()))
    }

    pub fn is_tool(&self) -> bool {
        !matches!(self, ToolChoice::None)
    }
}

impl fmt::Display for ToolChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed protocol turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub tool: ToolChoice,
    /// Present iff `tool` is not `None`.
    pub tool_result: Option<String>,
    pub thought: String,
    pub action: Action,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureReason {
    MissingTag,
    TagOrder,
    BadActionJson,
    UnknownTool,
    UnknownAction,
    BadArgument,
}

impl FailureReason {
    pub const ALL: [FailureReason; 6] = [
        FailureReason::MissingTag,
        FailureReason::TagOrder,
        FailureReason::BadActionJson,
        FailureReason::UnknownTool,
        FailureReason::UnknownAction,
        FailureReason::BadArgument,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{reason:?}: {detail}")]
pub struct FormatFailure {
    pub reason: FailureReason,
    pub detail: String,
}

impl FormatFailure {
    fn new(reason: FailureReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: detail.into(),
        }
    }
}

/// Structural verdict over a raw model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub ok: bool,
    pub failure_reason: Option<FailureReason>,
}

impl FormatVerdict {
    pub fn of(raw: &str) -> Self {
        match parse_turn(raw) {
            Ok(_) => Self {
                ok: true,
                failure_reason: None,
            },
            Err(f) => Self {
                ok: false,
                failure_reason: Some(f.reason),
            },
        }
    }
}

impl From<ActionDecodeError> for FormatFailure {
    fn from(e: ActionDecodeError) -> Self {
        let reason = match &e {
            ActionDecodeError::BadJson(_) => FailureReason::BadActionJson,
            ActionDecodeError::UnknownAction(_) => FailureReason::UnknownAction,
            ActionDecodeError::BadArgument(_) => FailureReason::BadArgument,
        };
        FormatFailure::new(reason, e.to_string())
    }
}

fn open(tag: &str) -> String {
    format!("<{tag}>")
}

fn close(tag: &str) -> String {
    format!("</{tag}>")
}

/// Cursor over the raw text, consuming one tagged block at a time.
struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn at_open(&mut self, tag: &str) -> bool {
        self.skip_ws();
        self.rest().starts_with(&open(tag))
    }

    /// Consume `<tag>body</tag>` and return the trimmed body.
    fn block(&mut self, tag: &str) -> Result<&'a str, FormatFailure> {
        self.skip_ws();
        let o = open(tag);
        if !self.rest().starts_with(&o) {
            return Err(if self.rest().contains(&o) {
                FormatFailure::new(FailureReason::TagOrder, format!("expected <{tag}> here"))
            } else {
                FormatFailure::new(FailureReason::MissingTag, format!("missing <{tag}>"))
            });
        }
        let body_start = self.pos + o.len();
        let c = close(tag);
        let Some(rel_end) = self.src[body_start..].find(&c) else {
            return Err(FormatFailure::new(
                FailureReason::MissingTag,
                format!("missing </{tag}>"),
            ));
        };
        let body = &self.src[body_start..body_start + rel_end];
        if body.contains(&o) {
            return Err(FormatFailure::new(
                FailureReason::TagOrder,
                format!("nested <{tag}>"),
            ));
        }
        self.pos = body_start + rel_end + c.len();
        Ok(body.trim())
    }
}

/// Parse one model output (with any harness-injected `<result>` already
/// spliced in) into a [`Turn`].
pub fn parse_turn(raw: &str) -> Result<Turn, FormatFailure> {
    let mut cur = Cursor { src: raw, pos: 0 };

    let tool_name = cur.block(TOOL_TAG)?;
    let tool = ToolChoice::parse(tool_name).ok_or_else(|| {
        FormatFailure::new(FailureReason::UnknownTool, format!("unknown tool `{tool_name}`"))
    })?;

    let tool_result = if cur.at_open(RESULT_TAG) {
        if !tool.is_tool() {
            return Err(FormatFailure::new(
                FailureReason::TagOrder,
                "<result> present although no tool was called",
            ));
        }
        Some(cur.block(RESULT_TAG)?.to_owned())
    } else if tool.is_tool() {
        return Err(FormatFailure::new(
            FailureReason::MissingTag,
            format!("missing <result> for {tool}"),
        ));
    } else {
        None
    };

    let thought = cur.block(THINK_TAG)?.to_owned();
    let action = parse_action_json(cur.block(ACTION_TAG)?)?;
    let summary = cur.block(SUMMARY_TAG)?.to_owned();
    if summary.is_empty() {
        return Err(FormatFailure::new(FailureReason::MissingTag, "empty <summary>"));
    }
    cur.skip_ws();
    if !cur.rest().is_empty() {
        return Err(FormatFailure::new(
            FailureReason::TagOrder,
            "trailing text after </summary>",
        ));
    }

    Ok(Turn {
        tool,
        tool_result,
        thought,
        action,
        summary,
    })
}

/// Render a turn in the canonical layout, one tag per line.
pub fn render_turn(turn: &Turn) -> String {
    let mut out = render_tool_call(turn.tool);
    if let Some(result) = &turn.tool_result {
        out.push('\n');
        out.push_str(&render_result(result));
    }
    out.push('\n');
    out.push_str(&render_continuation(
        &turn.thought,
        &turn.action,
        &turn.summary,
    ));
    out
}

pub fn render_tool_call(tool: ToolChoice) -> String {
    format!("<{TOOL_TAG}>{tool}</{TOOL_TAG}>")
}

pub fn render_result(text: &str) -> String {
    format!("<{RESULT_TAG}>{text}</{RESULT_TAG}>")
}

/// The part of a turn generated after the tool result.
pub fn render_continuation(thought: &str, action: &Action, summary: &str) -> String {
    format!(
        "<{THINK_TAG}>{thought}</{THINK_TAG}>\n<{ACTION_TAG}>{}</{ACTION_TAG}>\n<{SUMMARY_TAG}>{summary}</{SUMMARY_TAG}>",
        action.to_json()
    )
}

/// 1 iff the output parses end to end, including action decoding.
pub fn format_reward(raw: &str) -> u8 {
    u8::from(parse_turn(raw).is_ok())
}

/// Split a phase-1 generation at the end of the `</tool>` tag. Returns the
/// prefix up to and including `</tool>`, or `None` when it is absent.
pub fn truncate_after_tool(text: &str) -> Option<&str> {
    let c = close(TOOL_TAG);
    text.find(&c).map(|i| &text[..i + c.len()])
}

/// Read the tool name out of a phase-1 prefix, if it is one of the roles.
pub fn peek_tool(prefix: &str) -> Option<ToolChoice> {
    let o = open(TOOL_TAG);
    let c = close(TOOL_TAG);
    let start = prefix.find(&o)? + o.len();
    let end = start + prefix[start..].find(&c)?;
    ToolChoice::parse(&prefix[start..end])
}

/// Remove every model-authored `<result>...</result>` block.
pub fn strip_results(text: &str) -> String {
    let o = open(RESULT_TAG);
    let c = close(RESULT_TAG);
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find(&o) {
        out.push_str(&rest[..i]);
        match rest[i..].find(&c) {
            Some(j) => rest = &rest[i + j + c.len()..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
