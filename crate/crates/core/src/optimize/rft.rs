//! Rejection-sampling harvest and the supervised losses used to initialize
//! both toy agents from verified successful trajectories.

use super::grpo::{OptimError, PreparedTask};
use super::policy::{softmax_scaled, ToyPolicy};
use crate::refiner::Refiner;
use crate::retrieval::{search, tokenize};
use crate::reward;
use crate::rollout::{run_rollout, EngineConfig, Researcher, Trajectory};
use crate::taskgen::Task;
use serde::{Deserialize, Serialize};

/// Accepts or rejects a successful trajectory before it enters the SFT
/// corpus. Stands in for an external model-based verifier.
pub trait TrajectoryVerifier: Send + Sync {
    fn accept(&self, task: &Task, trajectory: &Trajectory) -> bool;
}

/// Keeps every reward-1 trajectory.
pub struct AcceptAll;

impl TrajectoryVerifier for AcceptAll {
    fn accept(&self, _task: &Task, _trajectory: &Trajectory) -> bool {
        true
    }
}

/// Rule-based default: every sub-goal counted as solved must be backed by
/// retrieved summaries, not only by the agent's own reasoning text. Rejects
/// trajectories that "solved" sub-goals by asserting them unsupported.
pub struct RuleBasedVerifier;

impl TrajectoryVerifier for RuleBasedVerifier {
    fn accept(&self, task: &Task, trajectory: &Trajectory) -> bool {
        let Ok((_, claimed)) = reward::subgoal_reward(trajectory, &task.sub_goals) else {
            return false;
        };
        let Ok((_, grounded)) =
            reward::subgoal_reward_in_text(&trajectory.summary_text(), &task.sub_goals)
        else {
            return false;
        };
        claimed.is_subset(&grounded)
    }
}

fn harvest_seed(seed: u64, task_id: u64, rollout: u64) -> u64 {
    let mut x = seed ^ task_id.wrapping_mul(0xA24B_AED4_963E_E407);
    x = x.wrapping_add(rollout.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    x ^= x >> 28;
    x.wrapping_mul(0x2545_F491_4F6C_DD1D)
}

/// Runs `rollouts_per_task` rollouts per task and keeps the trajectories
/// whose final answer is exactly right and which the verifier accepts.
pub fn rft_harvest(
    prepared: &[PreparedTask],
    researcher: &dyn Researcher,
    refiner: &dyn Refiner,
    engine_cfg: &EngineConfig,
    rollouts_per_task: usize,
    verifier: &dyn TrajectoryVerifier,
    seed: u64,
) -> Vec<Trajectory> {
    let mut kept = Vec::new();
    for p in prepared {
        for r in 0..rollouts_per_task {
            let trajectory = run_rollout(
                &p.task,
                &p.index,
                researcher,
                refiner,
                engine_cfg,
                harvest_seed(seed, p.task.id, r as u64),
            );
            let correct =
                reward::final_reward(trajectory.final_answer.as_deref(), &p.task.answer) >= 1.0;
            if correct && verifier.accept(&p.task, &trajectory) {
                kept.push(trajectory);
            }
        }
    }
    kept
}

/// Negative log-likelihood of the demonstrated template decisions under the
/// current policy.
pub fn researcher_nll(corpus: &[Trajectory], policy: &ToyPolicy) -> Result<f64, OptimError> {
    if corpus.is_empty() {
        return Err(OptimError::EmptyCorpus);
    }
    let mut nll = 0.0;
    for trajectory in corpus {
        for d in &trajectory.decisions {
            if d.feature >= policy.feature_count() || d.template >= policy.template_count() {
                return Err(OptimError::ShapeMismatch);
            }
            nll -= policy.log_prob(d.feature, d.template);
        }
    }
    Ok(nll)
}

/// One full-batch gradient-descent step on the researcher NLL. Returns the
/// loss before the step.
pub fn researcher_sft_step(
    policy: &mut ToyPolicy,
    corpus: &[Trajectory],
    learning_rate: f64,
) -> Result<f64, OptimError> {
    let nll = researcher_nll(corpus, policy)?;
    let features = policy.feature_count();
    let templates = policy.template_count();
    let mut grad = vec![vec![0.0; templates]; features];
    for trajectory in corpus {
        for d in &trajectory.decisions {
            let dist = policy.distribution(d.feature);
            for j in 0..templates {
                let indicator = if j == d.template { 1.0 } else { 0.0 };
                // d(-log pi)/d theta = (pi - onehot) / temperature
                grad[d.feature][j] += (dist[j] - indicator) / policy.temperature;
            }
        }
    }
    for f in 0..features {
        for j in 0..templates {
            policy.theta[f][j] -= learning_rate * grad[f][j];
        }
    }
    Ok(nll)
}

/// Trainable toy refiner: scores each hit of a query by a linear model over
/// simple features and softmax-selects which snippet anchors the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRefinerScorer {
    /// Weights over [query-overlap ratio, reciprocal rank, bias].
    pub weights: [f64; 3],
}

impl Default for ToyRefinerScorer {
    fn default() -> Self {
        Self {
            weights: [0.0, 0.0, 0.0],
        }
    }
}

impl ToyRefinerScorer {
    pub fn selection_probs(&self, features: &[[f64; 3]]) -> Vec<f64> {
        let scores: Vec<f64> = features
            .iter()
            .map(|x| x.iter().zip(self.weights).map(|(a, w)| a * w).sum())
            .collect();
        softmax_scaled(&scores, 1.0)
    }
}

/// One refiner supervision example: hit features and the index of the hit
/// whose snippet anchored the demonstrated summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerExample {
    pub features: Vec<[f64; 3]>,
    pub target: usize,
}

/// Rebuilds (query, evidence, summary) triples from harvested trajectories
/// by re-running retrieval, and keeps those where the demonstrated summary
/// is anchored to an identifiable hit.
pub fn refiner_examples(
    corpus: &[Trajectory],
    prepared: &[PreparedTask],
    top_k: usize,
) -> Vec<RefinerExample> {
    let mut examples = Vec::new();
    for trajectory in corpus {
        let Some(p) = prepared.iter().find(|p| p.task.id == trajectory.task_id) else {
            continue;
        };
        for step in &trajectory.steps {
            let Some(info) = &step.info else { continue };
            for entry in &info.entries {
                let evidence = search(&p.index, &entry.query, top_k);
                if evidence.hits.len() < 2 {
                    continue;
                }
                let mut query_terms = tokenize(&entry.query);
                query_terms.sort();
                query_terms.dedup();
                let features: Vec<[f64; 3]> = evidence
                    .hits
                    .iter()
                    .enumerate()
                    .map(|(rank, hit)| {
                        let snippet_terms = tokenize(&hit.snippet);
                        let overlap = query_terms
                            .iter()
                            .filter(|t| snippet_terms.contains(t))
                            .count() as f64;
                        [
                            overlap / query_terms.len().max(1) as f64,
                            1.0 / (1.0 + rank as f64),
                            1.0,
                        ]
                    })
                    .collect();
                let target = evidence
                    .hits
                    .iter()
                    .position(|hit| entry.summary.contains(hit.snippet.trim()));
                if let Some(target) = target {
                    examples.push(RefinerExample { features, target });
                }
            }
        }
    }
    examples
}

/// Negative log-likelihood of the demonstrated snippet selections.
pub fn refiner_nll(
    scorer: &ToyRefinerScorer,
    examples: &[RefinerExample],
) -> Result<f64, OptimError> {
    if examples.is_empty() {
        return Err(OptimError::EmptyCorpus);
    }
    Ok(examples
        .iter()
        .map(|ex| -scorer.selection_probs(&ex.features)[ex.target].ln())
        .sum())
}

/// One full-batch gradient-descent step on the refiner NLL. Returns the
/// loss before the step.
pub fn refiner_sft_step(
    scorer: &mut ToyRefinerScorer,
    examples: &[RefinerExample],
    learning_rate: f64,
) -> Result<f64, OptimError> {
    let nll = refiner_nll(scorer, examples)?;
    let mut grad = [0.0f64; 3];
    for ex in examples {
        let probs = scorer.selection_probs(&ex.features);
        for (i, x) in ex.features.iter().enumerate() {
            let coefficient = probs[i] - if i == ex.target { 1.0 } else { 0.0 };
            for (g, xv) in grad.iter_mut().zip(x) {
                *g += coefficient * xv;
            }
        }
    }
    for (w, g) in scorer.weights.iter_mut().zip(grad) {
        *w -= learning_rate * g;
    }
    Ok(nll)
}

/// The two supervised losses over one harvested corpus. The refiner loss is
/// present only when a trainable toy scorer (and its prepared examples) is
/// supplied.
pub fn rft_losses(
    corpus: &[Trajectory],
    policy: &ToyPolicy,
    refiner: Option<(&ToyRefinerScorer, &[RefinerExample])>,
) -> Result<(f64, Option<f64>), OptimError> {
    let researcher = researcher_nll(corpus, policy)?;
    let refiner = match refiner {
        Some((scorer, examples)) => Some(refiner_nll(scorer, examples)?),
        None => None,
    };
    Ok((researcher, refiner))
}
