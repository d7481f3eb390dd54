//! Group-relative policy optimization over toy-policy rollout groups:
//! normalized advantages, the clipped surrogate with exact KL against a
//! frozen reference, and the training loop.

use super::policy::{ReferenceSnapshot, ToyPolicy};
use crate::refiner::Refiner;
use crate::retrieval::{build_index, Index, IndexError};
use crate::reward::RewardBreakdown;
use crate::rollout::{run_group, EngineConfig, Trajectory};
use crate::taskgen::{Document, Task};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reward std below this is treated as degenerate: the whole group gets
/// zero advantages and contributes no policy gradient.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite importance ratio for trajectory {0}")]
    NonFiniteRatio(usize),
    #[error("empty trajectory corpus")]
    EmptyCorpus,
    #[error("decision indices do not fit the policy shape")]
    ShapeMismatch,
    #[error("rollout failed: {0}")]
    Rollout(String),
}

/// A task with its corpus index built, ready to roll out.
pub struct PreparedTask {
    pub task: Task,
    pub index: Index,
}

impl PreparedTask {
    pub fn new(task: Task, corpus: &[Document]) -> Result<Self, IndexError> {
        let index = build_index(corpus)?;
        Ok(Self { task, index })
    }
}

/// G trajectories for one task with shaped rewards and group-normalized
/// advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub trajectories: Vec<Trajectory>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(trajectories: Vec<Trajectory>, breakdowns: Vec<RewardBreakdown>) -> Self {
        let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
        let advantages = group_advantages(&rewards).unwrap_or_else(|_| vec![0.0; rewards.len()]);
        Self {
            trajectories,
            breakdowns,
            rewards,
            advantages,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of rollouts whose final answer was exactly right.
    pub fn successes(&self) -> usize {
        self.breakdowns
            .iter()
            .filter(|b| b.final_reward >= 1.0)
            .count()
    }
}

/// `(R_i - mean) / std` with the population standard deviation. Groups with
/// std below [`ADVANTAGE_STD_FLOOR`] get all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, OptimError> {
    if rewards.len() < 2 {
        return Err(OptimError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    if std < ADVANTAGE_STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Result of evaluating the surrogate objective on one group.
#[derive(Debug, Clone)]
pub struct GrpoEvaluation {
    /// Clipped surrogate mean minus `kl_beta * kl`.
    pub value: f64,
    /// Exact gradient of `value` in the policy parameters.
    pub gradient: Vec<Vec<f64>>,
    /// Per-trajectory importance ratios (product over unmasked decisions).
    pub ratios: Vec<f64>,
    /// Mean exact KL(policy || reference) over visited decision states.
    pub kl: f64,
    /// Fraction of group members on the clipped (zero-gradient) branch.
    pub clip_fraction: f64,
}

/// Clipped surrogate with KL regularization:
/// `mean_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i) - beta * KL`.
///
/// Ratios multiply per-decision current/behavior probabilities over each
/// trajectory's unmasked decisions; KL is computed exactly over the
/// template distribution at every visited state.
pub fn grpo_objective(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ReferenceSnapshot,
    clip_eps: f64,
    kl_beta: f64,
) -> Result<GrpoEvaluation, OptimError> {
    let features = policy.feature_count();
    let templates = policy.template_count();
    let g = group.len() as f64;
    let mut gradient = vec![vec![0.0; templates]; features];
    let mut ratios = Vec::with_capacity(group.len());
    let mut surrogate_sum = 0.0;
    let mut clipped_count = 0usize;

    // cache distributions per feature; they change only with theta
    let dists: Vec<Vec<f64>> = (0..features).map(|f| policy.distribution(f)).collect();

    for (i, trajectory) in group.trajectories.iter().enumerate() {
        let mut log_ratio = 0.0;
        for d in trajectory.decisions.iter().filter(|d| !d.masked) {
            if d.feature >= features || d.template >= templates {
                return Err(OptimError::ShapeMismatch);
            }
            if d.behavior_prob <= 0.0 {
                return Err(OptimError::NonFiniteRatio(i));
            }
            log_ratio += dists[d.feature][d.template].ln() - d.behavior_prob.ln();
        }
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(OptimError::NonFiniteRatio(i));
        }
        ratios.push(ratio);

        let advantage = group.advantages[i];
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
        surrogate_sum += unclipped.min(clipped);

        if unclipped <= clipped {
            // ratio gradient flows: A_i * r_i * sum_d grad log pi(t_d | f_d)
            let scale = advantage * ratio / g;
            for d in trajectory.decisions.iter().filter(|d| !d.masked) {
                let dist = &dists[d.feature];
                for j in 0..templates {
                    let indicator = if j == d.template { 1.0 } else { 0.0 };
                    gradient[d.feature][j] +=
                        scale * (indicator - dist[j]) / policy.temperature;
                }
            }
        } else {
            clipped_count += 1;
        }
    }

    // exact KL over every visited decision state, masked ones included
    let mut kl_sum = 0.0;
    let mut kl_grad = vec![vec![0.0; templates]; features];
    let mut decision_count = 0usize;
    for trajectory in &group.trajectories {
        for d in &trajectory.decisions {
            if d.feature >= features || d.template >= templates {
                return Err(OptimError::ShapeMismatch);
            }
            decision_count += 1;
            let p = &dists[d.feature];
            let q = reference.distribution(d.feature);
            let kl_f: f64 = p
                .iter()
                .zip(&q)
                .map(|(pi, qi)| pi * (pi / qi).ln())
                .sum();
            kl_sum += kl_f;
            for j in 0..templates {
                kl_grad[d.feature][j] +=
                    (p[j] / policy.temperature) * ((p[j] / q[j]).ln() - kl_f);
            }
        }
    }
    let kl = if decision_count == 0 {
        0.0
    } else {
        kl_sum / decision_count as f64
    };
    if decision_count > 0 && kl_beta != 0.0 {
        let scale = kl_beta / decision_count as f64;
        for f in 0..features {
            for j in 0..templates {
                gradient[f][j] -= scale * kl_grad[f][j];
            }
        }
    }

    Ok(GrpoEvaluation {
        value: surrogate_sum / g - kl_beta * kl,
        gradient,
        ratios,
        kl,
        clip_fraction: clipped_count as f64 / g,
    })
}

/// Desk-scale training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub policy_temperature: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_tasks: usize,
    pub subgoal_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            policy_temperature: 0.8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.5,
            steps: 200,
            batch_tasks: 16,
            subgoal_weight: 0.3,
        }
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_sub_reward: f64,
    pub density: f64,
    pub kl: f64,
    pub solve_none_rate: f64,
}

fn mix_seed(seed: u64, step: u64, task: u64, rollout: u64) -> u64 {
    let mut x = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(task.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(rollout.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One gradient-ascent step over a batch of tasks: collect a rollout group
/// per task, evaluate the objective, average gradients, update parameters.
pub fn grpo_step(
    batch: &[&PreparedTask],
    policy: &mut ToyPolicy,
    reference: &ReferenceSnapshot,
    cfg: &TrainConfig,
    engine_cfg: &EngineConfig,
    refiner: &dyn Refiner,
    step_index: usize,
    seed: u64,
) -> Result<StepMetrics, OptimError> {
    let features = policy.feature_count();
    let templates = policy.template_count();
    let mut gradient_acc = vec![vec![0.0; templates]; features];
    let mut kl_acc = 0.0;
    let mut reward_sum = 0.0;
    let mut sub_sum = 0.0;
    let mut rollouts = 0usize;
    let mut final_sum = 0.0;
    let mut length_sum = 0u64;
    let mut solve_none = 0usize;

    for (task_pos, prepared) in batch.iter().enumerate() {
        let seeds: Vec<u64> = (0..cfg.group_size)
            .map(|r| mix_seed(seed, step_index as u64, task_pos as u64, r as u64))
            .collect();
        let group = run_group(
            &prepared.task,
            &prepared.index,
            policy,
            refiner,
            engine_cfg,
            cfg.subgoal_weight,
            &seeds,
        )
        .map_err(|e| OptimError::Rollout(e.to_string()))?;

        let eval = grpo_objective(&group, policy, reference, cfg.clip_eps, cfg.kl_beta)?;
        for f in 0..features {
            for j in 0..templates {
                gradient_acc[f][j] += eval.gradient[f][j] / batch.len() as f64;
            }
        }
        kl_acc += eval.kl / batch.len() as f64;

        if group.successes() == 0 {
            solve_none += 1;
        }
        for b in &group.breakdowns {
            reward_sum += b.total;
            sub_sum += b.sub_reward;
            final_sum += b.final_reward;
        }
        for t in &group.trajectories {
            length_sum += t.length_tokens;
        }
        rollouts += group.len();
    }

    for f in 0..features {
        for j in 0..templates {
            policy.theta[f][j] += cfg.learning_rate * gradient_acc[f][j];
        }
    }

    Ok(StepMetrics {
        step: step_index,
        mean_reward: reward_sum / rollouts as f64,
        mean_sub_reward: sub_sum / rollouts as f64,
        density: final_sum / length_sum as f64,
        kl: kl_acc,
        solve_none_rate: solve_none as f64 / batch.len() as f64,
    })
}

/// Full training loop: snapshot the reference, then run `cfg.steps`
/// gradient-ascent steps over round-robin task batches.
pub fn train(
    prepared: &[PreparedTask],
    policy: &mut ToyPolicy,
    cfg: &TrainConfig,
    engine_cfg: &EngineConfig,
    refiner: &dyn Refiner,
    seed: u64,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>, OptimError> {
    assert!(!prepared.is_empty(), "training needs at least one task");
    let reference = ReferenceSnapshot::from(&*policy);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&PreparedTask> = (0..cfg.batch_tasks.min(prepared.len()))
            .map(|j| &prepared[(step * cfg.batch_tasks + j) % prepared.len()])
            .collect();
        let metrics = grpo_step(
            &batch, policy, &reference, cfg, engine_cfg, refiner, step, seed,
        )?;
        on_step(&metrics);
        curve.push(metrics);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::TrajectoryDecision;

    fn empty_trajectory(task_id: u64, decisions: Vec<TrajectoryDecision>) -> Trajectory {
        Trajectory {
            task_id,
            steps: Vec::new(),
            final_answer: None,
            truncated: true,
            length_tokens: 10,
            search_calls: 0,
            hint_injected_at: None,
            raw_evidence_tokens: 0,
            refiner_fallbacks: 0,
            decisions,
            error: None,
        }
    }

    fn decision(feature: usize, template: usize, behavior_prob: f64) -> TrajectoryDecision {
        TrajectoryDecision {
            turn: 0,
            feature,
            template,
            behavior_prob,
            masked: false,
        }
    }

    fn group_from(policy: &ToyPolicy, specs: &[(Vec<(usize, usize)>, f64)]) -> RolloutGroup {
        // behavior probabilities taken from the given policy (on-policy)
        let trajectories: Vec<Trajectory> = specs
            .iter()
            .map(|(decisions, _)| {
                empty_trajectory(
                    0,
                    decisions
                        .iter()
                        .map(|&(f, t)| decision(f, t, policy.distribution(f)[t]))
                        .collect(),
                )
            })
            .collect();
        let breakdowns = specs
            .iter()
            .map(|(_, reward)| RewardBreakdown {
                final_reward: *reward,
                sub_reward: 0.0,
                total: *reward,
                solved: Default::default(),
            })
            .collect();
        RolloutGroup::new(trajectories, breakdowns)
    }

    #[test]
    fn advantages_match_hand_oracle() {
        // mean 0.5, population std 0.5
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn constant_groups_get_zero_advantages() {
        let a = group_advantages(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn singleton_groups_rejected() {
        assert!(matches!(
            group_advantages(&[1.0]),
            Err(OptimError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn normalized_advantage_statistics() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let rewards: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let adv = group_advantages(&rewards).unwrap();
            let mean = adv.iter().sum::<f64>() / adv.len() as f64;
            let std =
                (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
            assert!(mean.abs() <= 1e-6);
            assert!((std - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn on_policy_identity_matches_score_function_gradient() {
        // policy == behavior == reference: all ratios 1, KL 0, and the clip
        // term's gradient equals the plain advantage-weighted score-function
        // gradient.
        let policy = ToyPolicy::new(vec![vec![0.3, -0.2, 0.1], vec![0.0, 0.4, -0.4]], 0.8);
        let reference = ReferenceSnapshot::from(&policy);
        let group = group_from(
            &policy,
            &[
                (vec![(0, 1), (1, 2)], 1.0),
                (vec![(0, 0)], 0.0),
                (vec![(1, 1), (0, 2)], 0.0),
                (vec![(0, 1)], 1.0),
            ],
        );
        let eval = grpo_objective(&group, &policy, &reference, 0.2, 0.01).unwrap();
        assert!(eval.ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert!(eval.kl.abs() < 1e-12);

        // independent score-function oracle: (1/G) sum_i A_i sum_d grad log pi
        let g = group.len() as f64;
        let mut oracle = vec![vec![0.0; 3]; 2];
        for (i, t) in group.trajectories.iter().enumerate() {
            for d in &t.decisions {
                let dist = policy.distribution(d.feature);
                for j in 0..3 {
                    let ind = if j == d.template { 1.0 } else { 0.0 };
                    oracle[d.feature][j] +=
                        group.advantages[i] * (ind - dist[j]) / policy.temperature / g;
                }
            }
        }
        for f in 0..2 {
            for j in 0..3 {
                assert!(
                    (eval.gradient[f][j] - oracle[f][j]).abs() <= 1e-10,
                    "grad[{f}][{j}]"
                );
            }
        }
    }

    #[test]
    fn clipped_branch_kills_ratio_gradient() {
        // positive advantage with ratio far above 1+eps: no gradient flows
        // through that sample's decisions.
        let policy = ToyPolicy::new(vec![vec![2.0, 0.0]], 1.0);
        let reference = ReferenceSnapshot::from(&policy);
        let p = policy.distribution(0);
        // behavior prob tiny => ratio = p/b huge
        let t1 = empty_trajectory(0, vec![decision(0, 0, p[0] / 10.0)]);
        let t2 = empty_trajectory(0, vec![decision(0, 1, p[1])]);
        let group = RolloutGroup::new(
            vec![t1, t2],
            vec![
                RewardBreakdown {
                    final_reward: 1.0,
                    sub_reward: 0.0,
                    total: 1.0,
                    solved: Default::default(),
                },
                RewardBreakdown {
                    final_reward: 0.0,
                    sub_reward: 0.0,
                    total: 0.0,
                    solved: Default::default(),
                },
            ],
        );
        let eval = grpo_objective(&group, &policy, &reference, 0.2, 0.0).unwrap();
        assert!(eval.ratios[0] > 1.2);
        assert!(eval.clip_fraction > 0.0);
        // the clipped sample contributes value (1+eps)*A but no gradient;
        // the unclipped negative-advantage sample still does.
        let only_second = {
            let mut g = vec![vec![0.0; 2]; 1];
            let dist = policy.distribution(0);
            for j in 0..2 {
                let ind = if j == 1 { 1.0 } else { 0.0 };
                g[0][j] = group.advantages[1] * (ind - dist[j]) / policy.temperature / 2.0;
            }
            g
        };
        for j in 0..2 {
            assert!((eval.gradient[0][j] - only_second[0][j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn infinite_clip_and_zero_beta_reduce_to_plain_gradient() {
        let policy = ToyPolicy::new(vec![vec![0.5, -0.5, 0.2], vec![-0.3, 0.3, 0.0]], 0.8);
        let reference = ReferenceSnapshot::from(&policy);
        // off-policy: behavior probs differ from current policy
        let specs: Vec<(Vec<(usize, usize, f64)>, f64)> = vec![
            (vec![(0, 1, 0.3), (1, 2, 0.4)], 1.0),
            (vec![(0, 0, 0.5)], 0.0),
            (vec![(1, 1, 0.25)], 0.5),
        ];
        let trajectories: Vec<Trajectory> = specs
            .iter()
            .map(|(ds, _)| {
                empty_trajectory(
                    0,
                    ds.iter().map(|&(f, t, b)| decision(f, t, b)).collect(),
                )
            })
            .collect();
        let breakdowns = specs
            .iter()
            .map(|(_, r)| RewardBreakdown {
                final_reward: *r,
                sub_reward: 0.0,
                total: *r,
                solved: Default::default(),
            })
            .collect();
        let group = RolloutGroup::new(trajectories, breakdowns);
        let eval = grpo_objective(&group, &policy, &reference, f64::INFINITY, 0.0).unwrap();

        // plain advantage-weighted score-function gradient with ratios
        let g = group.len() as f64;
        let mut oracle = vec![vec![0.0; 3]; 2];
        for (i, t) in group.trajectories.iter().enumerate() {
            let ratio: f64 = t
                .decisions
                .iter()
                .map(|d| policy.distribution(d.feature)[d.template] / d.behavior_prob)
                .product();
            for d in &t.decisions {
                let dist = policy.distribution(d.feature);
                for j in 0..3 {
                    let ind = if j == d.template { 1.0 } else { 0.0 };
                    oracle[d.feature][j] +=
                        group.advantages[i] * ratio * (ind - dist[j]) / policy.temperature / g;
                }
            }
        }
        for f in 0..2 {
            for j in 0..3 {
                assert!((eval.gradient[f][j] - oracle[f][j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_behavior_probability_is_rejected() {
        let policy = ToyPolicy::new(vec![vec![0.0, 0.0]], 1.0);
        let reference = ReferenceSnapshot::from(&policy);
        let group = RolloutGroup::new(
            vec![
                empty_trajectory(0, vec![decision(0, 0, 0.0)]),
                empty_trajectory(0, vec![decision(0, 1, 0.5)]),
            ],
            vec![
                RewardBreakdown {
                    final_reward: 1.0,
                    sub_reward: 0.0,
                    total: 1.0,
                    solved: Default::default(),
                },
                RewardBreakdown {
                    final_reward: 0.0,
                    sub_reward: 0.0,
                    total: 0.0,
                    solved: Default::default(),
                },
            ],
        );
        assert!(matches!(
            grpo_objective(&group, &policy, &reference, 0.2, 0.0),
            Err(OptimError::NonFiniteRatio(0))
        ));
    }

    #[test]
    fn snapshot_kl_is_zero_then_nonnegative() {
        let mut policy = ToyPolicy::new(vec![vec![0.1, 0.2, 0.3]], 0.8);
        let reference = ReferenceSnapshot::from(&policy);
        let group = group_from(&policy, &[(vec![(0, 0)], 1.0), (vec![(0, 1)], 0.0)]);
        let eval = grpo_objective(&group, &policy, &reference, 0.2, 0.05).unwrap();
        assert!(eval.kl.abs() < 1e-12);

        policy.theta[0][0] += 0.7;
        let eval = grpo_objective(&group, &policy, &reference, 0.2, 0.05).unwrap();
        assert!(eval.kl > 0.0);
    }

    #[test]
    fn masked_decisions_leave_the_ratio() {
        let policy = ToyPolicy::new(vec![vec![0.4, -0.4]], 0.8);
        let reference = ReferenceSnapshot::from(&policy);
        let mut masked = decision(0, 0, 1e-9); // would explode the ratio
        masked.masked = true;
        let group = RolloutGroup::new(
            vec![
                empty_trajectory(0, vec![masked]),
                empty_trajectory(0, vec![decision(0, 1, policy.distribution(0)[1])]),
            ],
            vec![
                RewardBreakdown {
                    final_reward: 1.0,
                    sub_reward: 0.0,
                    total: 1.0,
                    solved: Default::default(),
                },
                RewardBreakdown {
                    final_reward: 0.0,
                    sub_reward: 0.0,
                    total: 0.0,
                    solved: Default::default(),
                },
            ],
        );
        let eval = grpo_objective(&group, &policy, &reference, 0.2, 0.0).unwrap();
        assert!((eval.ratios[0] - 1.0).abs() < 1e-12); // empty product
    }
}
