//! Tool-integrated GUI agent harness: turn protocol, action matching,
//! memory, copilot dispatch, a symbolic environment, rollouts, rewards,
//! objective numerics and evaluation.

pub mod actions;
pub mod copilot;
pub mod env;
pub mod eval;
pub mod memory;
pub mod model;
pub mod objective;
pub mod protocol;
pub mod reward;
pub mod rollout;

pub type RewardBreakdownF64 = reward::RewardBreakdown<f64>;
pub type AdvantageGroupF64 = reward::AdvantageGroup<f64>;
pub type RewardConfigF64 = reward::RewardConfig<f64>;
pub type TokenRecordF64 = objective::TokenRecord<f64>;
pub type TokenBatchF64 = objective::TokenBatch<f64>;
pub type ObjectiveConfigF64 = objective::ObjectiveConfig<f64>;
pub type ObjectiveValueF64 = objective::ObjectiveValue<f64>;
