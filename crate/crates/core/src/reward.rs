//! Final, sub-goal, and shaped trajectory rewards, plus corpus-level reward
//! density.
//!
//! The final reward is exact match over normalized answers. Sub-goals count
//! as solved when their normalized entity occurs (token-aligned) anywhere in
//! the trajectory's summaries or reasoning traces; the shaped total is
//! `final + w * sub` with the weight defaulting to [`DEFAULT_SUBGOAL_WEIGHT`].

use crate::rollout::Trajectory;
use crate::taskgen::SubGoal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Trade-off between final correctness and intermediate progress.
pub const DEFAULT_SUBGOAL_WEIGHT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("sub-goal weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("reward density over an empty trajectory set")]
    EmptySet,
    #[error("trajectory length must be positive")]
    NonPositiveLength,
}

/// Per-trajectory reward decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub final_reward: f64,
    pub sub_reward: f64,
    pub total: f64,
    pub solved: BTreeSet<String>,
}

/// Aggregate reward per unit of trajectory length across a rollout set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub total_reward: f64,
    pub total_length: u64,
    pub density: f64,
}

/// Lowercases, maps punctuation to spaces, collapses whitespace, and drops
/// a leading article.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut tokens: Vec<&str> = cleaned.split_whitespace().collect();
    if matches!(tokens.first(), Some(&"a") | Some(&"an") | Some(&"the")) {
        tokens.remove(0);
    }
    tokens.join(" ")
}

/// Exact match under normalization; 1 iff the answers agree, 0 otherwise
/// (including an absent answer).
pub fn final_reward(answer: Option<&str>, gold: &str) -> f64 {
    match answer {
        Some(a) if !normalize_answer(a).is_empty() && normalize_answer(a) == normalize_answer(gold) => {
            1.0
        }
        _ => 0.0,
    }
}

/// Token-aligned substring check: `needle`'s normalized token sequence must
/// appear on token boundaries inside `haystack`'s normalized form.
fn contains_normalized(haystack_normalized: &str, needle_normalized: &str) -> bool {
    if needle_normalized.is_empty() {
        return false;
    }
    let padded = format!(" {haystack_normalized} ");
    padded.contains(&format!(" {needle_normalized} "))
}

/// Sub-goal reward over arbitrary observed text (summaries plus reasoning
/// traces). Returns the summed weight of solved sub-goals and their set.
pub fn subgoal_reward_in_text(
    observed: &str,
    sub_goals: &[SubGoal],
) -> Result<(f64, BTreeSet<String>), RewardError> {
    if sub_goals.is_empty() {
        return Ok((0.0, BTreeSet::new()));
    }
    let sum: f64 = sub_goals.iter().map(|g| g.weight).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(RewardError::WeightsNotNormalized(sum));
    }
    let haystack = normalize_answer(observed);
    let mut solved = BTreeSet::new();
    let mut reward = 0.0;
    for goal in sub_goals {
        if contains_normalized(&haystack, &normalize_answer(&goal.entity)) {
            solved.insert(goal.entity.clone());
            reward += goal.weight;
        }
    }
    Ok((reward, solved))
}

/// Sub-goal reward for a trajectory: detection runs over the concatenation
/// of every info-block summary and every think trace.
pub fn subgoal_reward(
    trajectory: &Trajectory,
    sub_goals: &[SubGoal],
) -> Result<(f64, BTreeSet<String>), RewardError> {
    subgoal_reward_in_text(&trajectory.reward_haystack(), sub_goals)
}

/// Combines final and sub-goal rewards into the shaped total.
pub fn total_reward(
    final_reward: f64,
    sub_reward: f64,
    solved: BTreeSet<String>,
    weight: f64,
) -> RewardBreakdown {
    RewardBreakdown {
        final_reward,
        sub_reward,
        total: final_reward + weight * sub_reward,
        solved,
    }
}

/// Scores one trajectory against its task: exact-match final reward plus
/// weighted sub-goal reward.
pub fn score_trajectory(
    trajectory: &Trajectory,
    gold: &str,
    sub_goals: &[SubGoal],
    weight: f64,
) -> Result<RewardBreakdown, RewardError> {
    let fr = final_reward(trajectory.final_answer.as_deref(), gold);
    let (sub, solved) = subgoal_reward(trajectory, sub_goals)?;
    Ok(total_reward(fr, sub, solved, weight))
}

/// Reward density: summed final rewards over summed trajectory lengths.
/// The numerator intentionally uses the binary final reward only.
pub fn reward_density<I>(samples: I) -> Result<DensityReport, RewardError>
where
    I: IntoIterator<Item = (f64, u64)>,
{
    let mut total_reward = 0.0;
    let mut total_length = 0u64;
    let mut any = false;
    for (reward, length) in samples {
        if length == 0 {
            return Err(RewardError::NonPositiveLength);
        }
        any = true;
        total_reward += reward;
        total_length += length;
    }
    if !any {
        return Err(RewardError::EmptySet);
    }
    Ok(DensityReport {
        total_reward,
        total_length,
        density: total_reward / total_length as f64,
    })
}
