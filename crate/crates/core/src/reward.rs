//! Rule rewards, discounted returns, group advantages and the variance gate.
//!
//! Numerics are generic over [`num_traits::Float`]; `f64` aliases live at
//! the crate root.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::MatchConfig;

fn lit<F: Float>(x: f64) -> F {
    F::from(x).expect("literal representable in scalar type")
}

fn flag<F: Float>(b: u8) -> F {
    if b != 0 {
        F::one()
    } else {
        F::zero()
    }
}

/// Which weighting produced `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Step,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<F> {
    pub kind: RewardKind,
    pub r_format: u8,
    pub r_type: u8,
    pub r_acc: u8,
    pub r_tool: u8,
    pub total: F,
}

impl<F: Float> RewardBreakdown<F> {
    pub fn step(r_format: u8, r_type: u8, r_acc: u8) -> Self {
        Self {
            kind: RewardKind::Step,
            r_format,
            r_type,
            r_acc,
            r_tool: 0,
            total: step_reward(r_format, r_type, r_acc),
        }
    }

    pub fn tool(r_format: u8, r_tool: u8) -> Self {
        Self {
            kind: RewardKind::Tool,
            r_format,
            r_type: 0,
            r_acc: 0,
            r_tool,
            total: tool_reward(r_format, r_tool),
        }
    }

    /// Zero reward for an unparseable step.
    pub fn format_failure() -> Self {
        Self::step(0, 0, 0)
    }

    /// Recompute `total` from the components.
    pub fn recompute(&self) -> F {
        match self.kind {
            RewardKind::Step => step_reward(self.r_format, self.r_type, self.r_acc),
            RewardKind::Tool => tool_reward(self.r_format, self.r_tool),
        }
    }
}

/// `0.1 f + 0.4 [f] type + 0.5 [f type] acc`.
pub fn step_reward<F: Float>(r_format: u8, r_type: u8, r_acc: u8) -> F {
    let f = flag::<F>(r_format);
    let t = flag::<F>(r_type);
    let a = flag::<F>(r_acc);
    lit::<F>(0.1) * f + lit::<F>(0.4) * f * t + lit::<F>(0.5) * f * t * a
}

/// `0.1 f + 0.9 [f] tool`.
pub fn tool_reward<F: Float>(r_format: u8, r_tool: u8) -> F {
    let f = flag::<F>(r_format);
    lit::<F>(0.1) * f + lit::<F>(0.9) * f * flag::<F>(r_tool)
}

/// `R_t = r_t + gamma R_{t+1}`, one backward pass.
pub fn discounted_returns<F: Float>(rewards: &[F], gamma: F) -> Vec<F> {
    let mut out = vec![F::zero(); rewards.len()];
    let mut acc = F::zero();
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("gamma {0} outside (0, 1]")]
    BadGamma(f64),
    #[error("{0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup<F> {
    /// `returns[i][t]`, group member `i`, step `t`.
    pub returns: Vec<Vec<F>>,
    pub advantages: Vec<Vec<F>>,
    pub degenerate_columns: Vec<bool>,
    pub gamma: F,
    pub passed_gate: bool,
}

impl<F: Float> AdvantageGroup<F> {
    pub fn group_size(&self) -> usize {
        self.returns.len()
    }

    pub fn steps(&self) -> usize {
        self.returns.first().map_or(0, Vec::len)
    }

    pub fn entries(&self) -> impl Iterator<Item = F> + Clone + '_ {
        self.advantages.iter().flatten().copied()
    }
}

fn mean_std<F: Float>(xs: impl Iterator<Item = F> + Clone) -> (F, F) {
    let n = F::from(xs.clone().count()).unwrap();
    if n == F::zero() {
        return (F::zero(), F::zero());
    }
    let mean = xs.clone().fold(F::zero(), |a, x| a + x) / n;
    let var = xs.fold(F::zero(), |a, x| a + (x - mean) * (x - mean)) / n;
    (mean, var.sqrt())
}

/// Per-column normalization across the group with population std.
/// `gamma` is recorded only.
pub fn group_advantages<F: Float>(
    returns: Vec<Vec<F>>,
    gamma: F,
    eps_std: F,
) -> Result<AdvantageGroup<F>, RewardError> {
    let g = returns.len();
    if g < 2 {
        return Err(RewardError::GroupTooSmall(g));
    }
    let t = returns[0].len();
    for (row, r) in returns.iter().enumerate() {
        if r.len() != t {
            return Err(RewardError::Ragged {
                row,
                got: r.len(),
                expected: t,
            });
        }
    }
    let mut advantages = vec![vec![F::zero(); t]; g];
    let mut degenerate = vec![false; t];
    for col in 0..t {
        let column = returns.iter().map(|r| r[col]);
        let (mean, std) = mean_std(column);
        if !(std >= eps_std) {
            degenerate[col] = true;
            continue;
        }
        for i in 0..g {
            advantages[i][col] = (returns[i][col] - mean) / std;
        }
    }
    Ok(AdvantageGroup {
        returns,
        advantages,
        degenerate_columns: degenerate,
        gamma,
        passed_gate: false,
    })
}

/// Right-pad each row with zero returns to the longest row.
pub fn pad_returns<F: Float>(rows: Vec<Vec<F>>) -> Vec<Vec<F>> {
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.into_iter()
        .map(|mut r| {
            r.resize(t, F::zero());
            r
        })
        .collect()
}

/// Population std of all advantage entries.
pub fn advantage_spread<F: Float>(adv: &AdvantageGroup<F>) -> F {
    mean_std(adv.entries()).1
}

/// True iff the spread of all advantages exceeds `eta`.
pub fn variance_gate<F: Float>(adv: &AdvantageGroup<F>, eta: F) -> bool {
    advantage_spread(adv) > eta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig<F> {
    pub gamma: F,
    pub eta: F,
    pub eps_std: F,
    pub click_distance_threshold: f64,
    pub bbox_enlarge_factor: f64,
    pub gate_retry_budget: u32,
}

impl<F: Float> Default for RewardConfig<F> {
    fn default() -> Self {
        let m = MatchConfig::default();
        Self {
            gamma: lit(0.95),
            eta: lit(0.3),
            eps_std: lit(1e-8),
            click_distance_threshold: m.click_distance_threshold,
            bbox_enlarge_factor: m.bbox_enlarge_factor,
            gate_retry_budget: 4,
        }
    }
}

impl<F: Float> RewardConfig<F> {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.gamma > F::zero() && self.gamma <= F::one()) {
            return Err(RewardError::BadGamma(self.gamma.to_f64().unwrap_or(f64::NAN)));
        }
        if !(self.eta >= F::zero()) {
            return Err(RewardError::BadConfig("eta must be >= 0".into()));
        }
        if !(self.eps_std > F::zero()) {
            return Err(RewardError::BadConfig("eps_std must be > 0".into()));
        }
        self.match_config()
            .validate()
            .map_err(|e| RewardError::BadConfig(e.to_string()))
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            click_distance_threshold: self.click_distance_threshold,
            bbox_enlarge_factor: self.bbox_enlarge_factor,
        }
    }
}
