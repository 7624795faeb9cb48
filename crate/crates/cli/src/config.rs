//! Harness configuration file.

use std::path::{Path, PathBuf};

use guiagent_core::memory::HistoryParadigm;
use guiagent_core::model::HttpConfig;
use guiagent_core::rollout::{ExecutorChoice, ToolSet};
use guiagent_core::copilot::ExecLimits;
use guiagent_core::{ObjectiveConfigF64, RewardConfigF64};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Replays each task's golden trajectory.
    #[default]
    ScriptedGolden,
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    /// ao, at, mc or ms.
    pub paradigm: String,
    /// none, cal, ret or both.
    pub tools: String,
    pub max_steps: usize,
    pub group_size: usize,
    pub seed: u64,
    pub two_phase_decoding: bool,
    /// Tasks run in parallel; defaults to the task count capped at 8.
    pub jobs: Option<usize>,
    /// Resample groups through the variance gate.
    pub gate: bool,
    pub executor: ExecutorChoice,
    pub exec_limits: ExecLimits,
    pub knowledge_dir: Option<PathBuf>,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            paradigm: "ms".into(),
            tools: "both".into(),
            max_steps: 30,
            group_size: 8,
            seed: 0,
            two_phase_decoding: true,
            jobs: None,
            gate: false,
            executor: ExecutorChoice::Auto,
            exec_limits: ExecLimits::default(),
            knowledge_dir: None,
        }
    }
}

impl EpisodeSection {
    pub fn paradigm(&self) -> Result<HistoryParadigm, String> {
        self.paradigm.parse()
    }

    pub fn tools(&self) -> Result<ToolSet, String> {
        self.tools.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub pass_k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { pass_k: vec![1, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub policy: BackendConfig,
    /// Defaults to the policy backend.
    pub copilot: Option<BackendConfig>,
    pub reward: RewardConfigF64,
    pub episode: EpisodeSection,
    pub objective: ObjectiveConfigF64,
    pub eval: EvalSection,
    /// Task files or directories; empty means the bundled suite.
    pub task_packs: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl HarnessConfig {
    /// Parse, resolve relative paths against the file's directory, and
    /// check that referenced paths exist.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: HarnessConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut cfg.task_packs {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut cfg.out_dir, &mut cfg.episode.knowledge_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), String> {
        for p in &self.task_packs {
            if !p.exists() {
                return Err(format!("task pack {} does not exist", p.display()));
            }
        }
        self.episode.paradigm()?;
        self.episode.tools()?;
        self.reward.validate().map_err(|e| e.to_string())?;
        self.objective.validate().map_err(|e| e.to_string())?;
        if self.episode.group_size == 0 || self.episode.max_steps == 0 {
            return Err("episode.group_size and episode.max_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn copilot(&self) -> &BackendConfig {
        self.copilot.as_ref().unwrap_or(&self.policy)
    }
}
