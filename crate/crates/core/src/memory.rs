//! Memory decoupling: what the dialogue carries between steps versus what
//! goes to the local knowledge store.
//!
//! Under the multi-turn summary paradigm the dialogue keeps `(action,
//! summary)` pairs while every thought is appended to the knowledge store,
//! where only the Retriever reads it.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::Action;
use crate::env::Screen;
use crate::model::{ChatMessage, Role};
use crate::protocol::Turn;

pub const POLICY_SYSTEM_PROMPT: &str = include_str!("../assets/policy_system.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryParadigm {
    ActionOnly,
    ActionThought,
    MultiTurnContext,
    MultiTurnSummary,
}

impl HistoryParadigm {
    pub fn short_name(&self) -> &'static str {
        match self {
            HistoryParadigm::ActionOnly => "ao",
            HistoryParadigm::ActionThought => "at",
            HistoryParadigm::MultiTurnContext => "mc",
            HistoryParadigm::MultiTurnSummary => "ms",
        }
    }
}

impl fmt::Display for HistoryParadigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for HistoryParadigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ao" | "action_only" => Ok(HistoryParadigm::ActionOnly),
            "at" | "action_thought" => Ok(HistoryParadigm::ActionThought),
            "mc" | "multi_turn_context" => Ok(HistoryParadigm::MultiTurnContext),
            "ms" | "multi_turn_summary" => Ok(HistoryParadigm::MultiTurnSummary),
            other => Err(format!("unknown history paradigm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub action: Action,
    /// Summary under MS, thought under MC/AT.
    pub carried_text: String,
}

/// Dialogue history of one episode. The paradigm is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueHistory {
    paradigm: HistoryParadigm,
    entries: Vec<HistoryEntry>,
    steps: usize,
}

impl DialogueHistory {
    pub fn new(paradigm: HistoryParadigm) -> Self {
        Self {
            paradigm,
            entries: Vec::new(),
            steps: 0,
        }
    }

    /// Seed a history from expert `(action, summary)` pairs.
    pub fn from_expert(pairs: impl IntoIterator<Item = (Action, String)>) -> Self {
        let entries: Vec<HistoryEntry> = pairs
            .into_iter()
            .map(|(action, carried_text)| HistoryEntry {
                action,
                carried_text,
            })
            .collect();
        Self {
            paradigm: HistoryParadigm::MultiTurnSummary,
            steps: entries.len(),
            entries,
        }
    }

    pub fn paradigm(&self) -> HistoryParadigm {
        self.paradigm
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    /// Completed steps, independent of what the paradigm keeps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn carried_texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.carried_text.as_str())
    }

    /// Lines rendered under "History Summary:".
    pub fn render_lines(&self) -> Vec<String> {
        let last = self.entries.len().saturating_sub(1);
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let action = e.action.to_json();
                let k = i + 1;
                match self.paradigm {
                    HistoryParadigm::ActionOnly => format!("step {k}: action {action}"),
                    HistoryParadigm::MultiTurnSummary => {
                        format!("step {k}: action {action}; summary: {}", e.carried_text)
                    }
                    HistoryParadigm::MultiTurnContext => {
                        format!("step {k}: action {action}; thought: {}", e.carried_text)
                    }
                    HistoryParadigm::ActionThought if i == last => {
                        format!("step {k}: action {action}; thought: {}", e.carried_text)
                    }
                    HistoryParadigm::ActionThought => format!("step {k}: action {action}"),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    /// 1-based step number.
    pub step: usize,
    pub thought: String,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("knowledge step {got} does not follow step {last}")]
    NonMonotonicStep { last: usize, got: usize },
    #[error("knowledge store has no persistence path")]
    NoPath,
    #[error("cannot access knowledge store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt knowledge store {path}: {source}")]
    Corrupt {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Append-only local record of per-step thoughts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeStore {
    records: Vec<KnowledgeRecord>,
    persistence_path: Option<PathBuf>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_path(path: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            persistence_path: Some(path.into()),
        }
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.persistence_path.as_deref()
    }

    pub fn push(&mut self, step: usize, thought: impl Into<String>) -> Result<(), MemoryError> {
        if let Some(last) = self.records.last() {
            if step <= last.step {
                return Err(MemoryError::NonMonotonicStep {
                    last: last.step,
                    got: step,
                });
            }
        }
        self.records.push(KnowledgeRecord {
            step,
            thought: thought.into(),
        });
        Ok(())
    }

    /// Write the store to its persistence path as a JSON array of
    /// `{step, thought}` objects.
    pub fn persist(&self) -> Result<(), MemoryError> {
        let path = self.persistence_path.as_ref().ok_or(MemoryError::NoPath)?;
        self.persist_to(path)
    }

    pub fn persist_to(&self, path: &Path) -> Result<(), MemoryError> {
        let io = |source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let json = serde_json::to_string_pretty(&self.records).expect("records serialize");
        std::fs::write(path, json).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let records: Vec<KnowledgeRecord> =
            serde_json::from_str(&text).map_err(|source| MemoryError::Corrupt {
                path: path.display().to_string(),
                source,
            })?;
        let mut store = Self::with_path(path);
        for r in records {
            store.push(r.step, r.thought)?;
        }
        Ok(store)
    }
}

/// Default location of the store for one rollout: `<dir>/<task_id>/<index>.json`.
pub fn knowledge_path(dir: &Path, task_id: &str, rollout_index: usize) -> PathBuf {
    dir.join(task_id).join(format!("{rollout_index}.json"))
}

/// Record a completed turn. Every paradigm stores the thought in `store`;
/// the dialogue keeps the summary (MS), the thought (MC/AT) or nothing (AO).
pub fn append_step(
    history: &mut DialogueHistory,
    store: &mut KnowledgeStore,
    turn: &Turn,
) -> Result<(), MemoryError> {
    history.steps += 1;
    store.push(history.steps, turn.thought.clone())?;
    let carried = match history.paradigm {
        HistoryParadigm::ActionOnly => return Ok(()),
        HistoryParadigm::MultiTurnSummary => turn.summary.clone(),
        HistoryParadigm::MultiTurnContext | HistoryParadigm::ActionThought => turn.thought.clone(),
    };
    history.entries.push(HistoryEntry {
        action: turn.action.clone(),
        carried_text: carried,
    });
    Ok(())
}

/// Count a step that produced no parsable turn. Nothing enters either
/// memory, but step numbering moves on.
pub fn skip_step(history: &mut DialogueHistory) {
    history.steps += 1;
}

/// Prompt material for one policy call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub system: String,
    pub user: String,
}

impl PromptContext {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::new(Role::System, &self.system),
            ChatMessage::new(Role::User, &self.user),
        ]
    }

    /// Whitespace-delimited token estimate.
    pub fn token_len(&self) -> usize {
        self.system.split_whitespace().count() + self.user.split_whitespace().count()
    }
}

pub fn build_context(
    instruction: &str,
    history: &DialogueHistory,
    current_screen: &Screen,
) -> PromptContext {
    let mut user = format!("User Instruction: {instruction}\n\nHistory Summary:\n");
    for line in history.render_lines() {
        let _ = writeln!(user, "{line}");
    }
    let _ = write!(user, "\nCurrent Screen:\n{}", current_screen.describe());
    PromptContext {
        system: POLICY_SYSTEM_PROMPT.trim_end().to_owned(),
        user,
    }
}
