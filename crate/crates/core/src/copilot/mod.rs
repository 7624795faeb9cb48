//! Copilot dispatch: the auxiliary model acting as Retriever or Calculator.
//!
//! Failures never escape [`dispatch`]; they come back as a [`ToolResult`]
//! whose text starts with `TOOL_ERROR:` so the episode keeps going.

pub mod executor;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use executor::{ArithmeticExecutor, CodeExecutor, ExecError, ExecLimits, SubprocessExecutor};

use crate::memory::KnowledgeStore;
use crate::model::{ChatMessage, CompletionRequest, ModelBackend, Role, ScriptKey};
use crate::protocol::ToolChoice;

pub const RETRIEVER_TEMPLATE: &str = include_str!("../../assets/retriever_prompt.txt");
pub const CALCULATOR_TEMPLATE: &str = include_str!("../../assets/calculator_prompt.txt");
pub const TOOL_ERROR_PREFIX: &str = "TOOL_ERROR:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CopilotRole {
    Calculator,
    Retriever,
}

impl CopilotRole {
    pub fn from_tool(tool: ToolChoice) -> Option<Self> {
        match tool {
            ToolChoice::Calculator => Some(CopilotRole::Calculator),
            ToolChoice::Retriever => Some(CopilotRole::Retriever),
            ToolChoice::None => None,
        }
    }

    pub fn tool(&self) -> ToolChoice {
        match self {
            CopilotRole::Calculator => ToolChoice::Calculator,
            CopilotRole::Retriever => ToolChoice::Retriever,
        }
    }
}

/// Input to one copilot call. Only Retriever requests carry the store.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRequest {
    role: CopilotRole,
    pub instruction: String,
    pub summaries: Vec<String>,
    knowledge: Option<KnowledgeStore>,
}

impl ToolRequest {
    pub fn retriever(
        instruction: impl Into<String>,
        summaries: Vec<String>,
        knowledge: KnowledgeStore,
    ) -> Self {
        Self {
            role: CopilotRole::Retriever,
            instruction: instruction.into(),
            summaries,
            knowledge: Some(knowledge),
        }
    }

    pub fn calculator(instruction: impl Into<String>, summaries: Vec<String>) -> Self {
        Self {
            role: CopilotRole::Calculator,
            instruction: instruction.into(),
            summaries,
            knowledge: None,
        }
    }

    pub fn role(&self) -> CopilotRole {
        self.role
    }

    pub fn knowledge(&self) -> Option<&KnowledgeStore> {
        self.knowledge.as_ref()
    }

    /// The prompt for this request's role.
    pub fn prompt(&self) -> String {
        match self.role {
            CopilotRole::Retriever => build_retriever_prompt(self),
            CopilotRole::Calculator => build_calculator_prompt(self),
        }
    }
}

fn fill(template: &str, task: &str, lines: impl Iterator<Item = String>) -> String {
    let mut history = String::new();
    for line in lines {
        let _ = writeln!(history, "{line}");
    }
    template.replace("{task}", task).replace("{history}", &history)
}

/// Retriever prompt; knowledge records become `step k: '<thought>'` lines.
pub fn build_retriever_prompt(req: &ToolRequest) -> String {
    let records = req.knowledge().map(|k| k.records()).unwrap_or_default();
    fill(
        RETRIEVER_TEMPLATE,
        &req.instruction,
        records
            .iter()
            .map(|r| format!("step {}: '{}'", r.step, r.thought)),
    )
}

/// Calculator prompt; progress summaries become `step k: '<summary>'` lines.
pub fn build_calculator_prompt(req: &ToolRequest) -> String {
    fill(
        CALCULATOR_TEMPLATE,
        &req.instruction,
        req.summaries
            .iter()
            .enumerate()
            .map(|(i, s)| format!("step {}: '{}'", i + 1, s)),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no <{0}> tag")]
    Missing(String),
    #[error("<{0}> is not closed")]
    Unclosed(String),
    #[error("nested <{0}> tags")]
    Nested(String),
}

/// Body of the first `<tag>...</tag>` pair, trimmed.
pub fn extract_tagged(output: &str, tag: &str) -> Result<String, ExtractError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = output
        .find(&open)
        .ok_or_else(|| ExtractError::Missing(tag.into()))?
        + open.len();
    let end = output[start..]
        .find(&close)
        .ok_or_else(|| ExtractError::Unclosed(tag.into()))?;
    let body = &output[start..start + end];
    if body.contains(&open) {
        return Err(ExtractError::Nested(tag.into()));
    }
    Ok(body.trim().to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolErrorKind {
    Backend,
    Extraction,
    Timeout,
    NonzeroExit,
    EmptyOutput,
    Executor,
}

impl ToolErrorKind {
    pub fn name(&self) -> &'static str {
        match self {
            ToolErrorKind::Backend => "backend",
            ToolErrorKind::Extraction => "extraction",
            ToolErrorKind::Timeout => "timeout",
            ToolErrorKind::NonzeroExit => "nonzero_exit",
            ToolErrorKind::EmptyOutput => "empty_output",
            ToolErrorKind::Executor => "executor",
        }
    }
}

impl From<&ExecError> for ToolErrorKind {
    fn from(e: &ExecError) -> Self {
        match e {
            ExecError::Timeout(_) => ToolErrorKind::Timeout,
            ExecError::NonZeroExit { .. } => ToolErrorKind::NonzeroExit,
            ExecError::EmptyOutput => ToolErrorKind::EmptyOutput,
            _ => ToolErrorKind::Executor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub role: CopilotRole,
    pub text: String,
    pub raw_model_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor_stdout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolErrorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl ToolResult {
    fn failed(role: CopilotRole, raw: String, kind: ToolErrorKind, detail: String) -> Self {
        Self {
            role,
            text: format!("{TOOL_ERROR_PREFIX} {}", kind.name()),
            raw_model_output: raw,
            executor_stdout: None,
            error: Some(kind),
            error_detail: Some(detail),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

/// Run the copilot for one tool call. `key` routes scripted backends.
pub fn dispatch(
    req: &ToolRequest,
    copilot: &dyn ModelBackend,
    executor: &dyn CodeExecutor,
    limits: &ExecLimits,
    key: Option<ScriptKey>,
) -> ToolResult {
    let role = req.role();
    let mut creq = CompletionRequest::new(vec![ChatMessage::new(Role::User, req.prompt())]);
    creq.key = key;
    let raw = match copilot.complete(&creq) {
        Ok(c) => c.text,
        Err(e) => {
            return ToolResult::failed(role, String::new(), ToolErrorKind::Backend, e.to_string())
        }
    };
    let tag = match role {
        CopilotRole::Retriever => "answer",
        CopilotRole::Calculator => "python",
    };
    let body = match extract_tagged(&raw, tag) {
        Ok(b) => b,
        Err(e) => return ToolResult::failed(role, raw, ToolErrorKind::Extraction, e.to_string()),
    };
    match role {
        CopilotRole::Retriever => {
            if body.is_empty() {
                return ToolResult::failed(
                    role,
                    raw,
                    ToolErrorKind::EmptyOutput,
                    "empty answer".into(),
                );
            }
            ToolResult {
                role,
                text: body,
                raw_model_output: raw,
                executor_stdout: None,
                error: None,
                error_detail: None,
            }
        }
        CopilotRole::Calculator => match executor.execute(&body, limits) {
            Ok(stdout) => ToolResult {
                role,
                text: stdout.clone(),
                raw_model_output: raw,
                executor_stdout: Some(stdout),
                error: None,
                error_detail: None,
            },
            Err(e) => ToolResult::failed(role, raw, ToolErrorKind::from(&e), e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScriptedBackend;

    const RETRIEVER_OUT: &str =
        "<think>...</think> <answer> The five numbers displayed are 10,9,6,5,5. </answer>";

    fn store(thoughts: &[&str]) -> KnowledgeStore {
        let mut k = KnowledgeStore::new();
        for (i, t) in thoughts.iter().enumerate() {
            k.push(i + 1, *t).unwrap();
        }
        k
    }

    #[test]
    fn retriever_prompt_lines() {
        let empty = build_retriever_prompt(&ToolRequest::retriever("t", vec![], store(&[])));
        assert!(!empty.contains("step 1:"));
        assert!(empty.contains("# History Information\n\nOutput the thinking"));
        assert!(empty.starts_with("You are a GUI assitant for memory retriever."));

        let two = build_retriever_prompt(&ToolRequest::retriever("t", vec![], store(&["a", "b"])));
        assert!(two.contains("# History Information\nstep 1: 'a'\nstep 2: 'b'\n\nOutput"));
        assert!(two.contains("The overall task instruction is: 't'."));
    }

    #[test]
    fn calculator_prompt_uses_summaries() {
        let p = build_calculator_prompt(&ToolRequest::calculator(
            "multiply",
            vec!["saw 10".into(), "saw 9".into()],
        ));
        assert!(p.contains("# Interaction History\nstep 1: 'saw 10'\nstep 2: 'saw 9'\n\nOutput"));
        assert!(p.starts_with("You are a GUI assistant for numerical calculation."));
        assert!(p.ends_with("Please strictly follow the format.\n"));
    }

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_tagged(RETRIEVER_OUT, "answer").unwrap(),
            "The five numbers displayed are 10,9,6,5,5."
        );
        assert_eq!(
            extract_tagged("<answer>x", "answer"),
            Err(ExtractError::Unclosed("answer".into()))
        );
        assert_eq!(
            extract_tagged("<answer>a<answer>b</answer></answer>", "answer"),
            Err(ExtractError::Nested("answer".into()))
        );
        assert!(matches!(extract_tagged("none", "python"), Err(ExtractError::Missing(_))));
    }

    #[test]
    fn dispatch_retriever() {
        let copilot = ScriptedBackend::constant(RETRIEVER_OUT);
        let r = dispatch(
            &ToolRequest::retriever("t", vec![], store(&["x"])),
            &copilot,
            &ArithmeticExecutor,
            &ExecLimits::default(),
            None,
        );
        assert_eq!(r.text, "The five numbers displayed are 10,9,6,5,5.");
        assert_eq!(r.raw_model_output, RETRIEVER_OUT);
    }

    #[test]
    fn dispatch_calculator_with_fallback() {
        let copilot = ScriptedBackend::constant("<think>add</think><python>print(2+2)</python>");
        let r = dispatch(
            &ToolRequest::calculator("t", vec![]),
            &copilot,
            &ArithmeticExecutor,
            &ExecLimits::default(),
            None,
        );
        assert_eq!(r.text, "4");
        assert_eq!(r.executor_stdout.as_deref(), Some("4"));
    }

    #[test]
    fn dispatch_errors_stay_in_band() {
        let bad = ScriptedBackend::constant("I refuse to use tags");
        for req in [
            ToolRequest::retriever("t", vec![], store(&[])),
            ToolRequest::calculator("t", vec![]),
        ] {
            let r = dispatch(&req, &bad, &ArithmeticExecutor, &ExecLimits::default(), None);
            assert!(r.text.starts_with(TOOL_ERROR_PREFIX), "{}", r.text);
            assert_eq!(r.error, Some(ToolErrorKind::Extraction));
        }
        let empty = ScriptedBackend::new();
        let r = dispatch(
            &ToolRequest::calculator("t", vec![]),
            &empty,
            &ArithmeticExecutor,
            &ExecLimits::default(),
            None,
        );
        assert_eq!(r.text, "TOOL_ERROR: backend");
        let divzero = ScriptedBackend::constant("<python>1/0</python>");
        let r = dispatch(
            &ToolRequest::calculator("t", vec![]),
            &divzero,
            &ArithmeticExecutor,
            &ExecLimits::default(),
            None,
        );
        assert!(r.is_error());
    }

    #[test]
    fn prompts_are_byte_stable() {
        let req = ToolRequest::retriever("t", vec![], store(&["a", "b", "c"]));
        assert_eq!(build_retriever_prompt(&req), build_retriever_prompt(&req.clone()));
    }
}
