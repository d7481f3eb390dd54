//! Tabular-softmax researcher policy over (turn feature, action template)
//! scores, plus its frozen reference snapshot.
//!
//! Templates expand into concrete actions from the observable context only:
//! the question text and the entity labels seen in observations. The
//! distribution over templates at a feature is `softmax(theta[f] / T)`.

use crate::protocol::{render_action, Action, ActionBody, RawActionText};
use crate::rollout::{ActOutput, AgentContext, AgentError, PolicyDecision, Researcher};
use crate::text::extract_entity_labels;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TEMPLATE_COUNT: usize = 5;

/// Default number of turn-bucket features; turns at or past the last bucket
/// share it.
pub const DEFAULT_FEATURES: usize = 6;

/// Query/answer schemas the toy researcher can instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionTemplate {
    /// Search each constraint phrase of the question separately.
    SearchQuestionConstraints,
    /// Search entity labels observed but not yet queried.
    SearchFreshEntities,
    /// Answer with the newest entity: one seen in the last observation only.
    AnswerFreshEntity,
    /// Answer with the first entity of the last observation.
    AnswerFirstEntity,
    /// Search the whole question as a single query.
    SearchWholeQuestion,
}

impl ActionTemplate {
    pub const ALL: [ActionTemplate; TEMPLATE_COUNT] = [
        ActionTemplate::SearchQuestionConstraints,
        ActionTemplate::SearchFreshEntities,
        ActionTemplate::AnswerFreshEntity,
        ActionTemplate::AnswerFirstEntity,
        ActionTemplate::SearchWholeQuestion,
    ];

    fn think(&self) -> &'static str {
        match self {
            ActionTemplate::SearchQuestionConstraints => {
                "split the question into its constraints and look each one up"
            }
            ActionTemplate::SearchFreshEntities => {
                "follow up on newly surfaced entities to find what links to them"
            }
            ActionTemplate::AnswerFreshEntity => {
                "the newest entity in the evidence should be the answer"
            }
            ActionTemplate::AnswerFirstEntity => "answer with the leading entity in the evidence",
            ActionTemplate::SearchWholeQuestion => "search the full question verbatim",
        }
    }
}

/// Softmax policy over a `[features x templates]` score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: Vec<Vec<f64>>,
    pub temperature: f64,
    pub max_queries: usize,
}

impl ToyPolicy {
    pub fn new(theta: Vec<Vec<f64>>, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        assert!(!theta.is_empty() && !theta[0].is_empty());
        Self {
            theta,
            temperature,
            max_queries: 5,
        }
    }

    /// Uniform policy: all scores zero.
    pub fn uniform(features: usize, templates: usize, temperature: f64) -> Self {
        Self::new(vec![vec![0.0; templates]; features], temperature)
    }

    /// The standard acting configuration: turn-bucket features over the
    /// five templates.
    pub fn standard(temperature: f64) -> Self {
        Self::uniform(DEFAULT_FEATURES, TEMPLATE_COUNT, temperature)
    }

    pub fn feature_count(&self) -> usize {
        self.theta.len()
    }

    pub fn template_count(&self) -> usize {
        self.theta[0].len()
    }

    pub fn feature_for_turn(&self, turn: usize) -> usize {
        turn.min(self.feature_count() - 1)
    }

    /// Softmax of `theta[feature] / temperature`.
    pub fn distribution(&self, feature: usize) -> Vec<f64> {
        softmax_scaled(&self.theta[feature], self.temperature)
    }

    pub fn log_prob(&self, feature: usize, template: usize) -> f64 {
        self.distribution(feature)[template].ln()
    }

    fn sample(&self, feature: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let dist = self.distribution(feature);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if draw < acc {
                return (i, *p);
            }
        }
        (dist.len() - 1, dist[dist.len() - 1])
    }
}

pub(crate) fn softmax_scaled(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Frozen parameter copy for KL regularization. Never mutated after the
/// snapshot is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSnapshot {
    theta: Vec<Vec<f64>>,
    temperature: f64,
}

impl ReferenceSnapshot {
    pub fn distribution(&self, feature: usize) -> Vec<f64> {
        softmax_scaled(&self.theta[feature], self.temperature)
    }
}

impl From<&ToyPolicy> for ReferenceSnapshot {
    fn from(policy: &ToyPolicy) -> Self {
        Self {
            theta: policy.theta.clone(),
            temperature: policy.temperature,
        }
    }
}

fn question_constraints(question: &str, cap: usize) -> Vec<String> {
    let trimmed = question
        .trim()
        .trim_start_matches("Which entity ")
        .trim_end_matches('?');
    trimmed
        .split(" and ")
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .take(cap)
        .collect()
}

fn expand(template: ActionTemplate, ctx: &AgentContext<'_>, cap: usize) -> ActionBody {
    let observations: Vec<&str> = ctx.turns.iter().map(|(_, obs)| *obs).collect();
    let whole_question = || ActionBody::Search(vec![ctx.question.to_string()]);
    match template {
        ActionTemplate::SearchQuestionConstraints => {
            let qs = question_constraints(ctx.question, cap);
            if qs.is_empty() {
                whole_question()
            } else {
                ActionBody::Search(qs)
            }
        }
        ActionTemplate::SearchWholeQuestion => whole_question(),
        ActionTemplate::SearchFreshEntities => {
            let queried: Vec<String> = ctx
                .turns
                .iter()
                .flat_map(|(raw, _)| extract_entity_labels(raw))
                .collect();
            let fresh: Vec<String> = observations
                .iter()
                .flat_map(|obs| extract_entity_labels(obs))
                .filter(|l| !queried.contains(l))
                .fold(Vec::new(), |mut acc, l| {
                    if !acc.contains(&l) {
                        acc.push(l);
                    }
                    acc
                })
                .into_iter()
                .take(cap)
                .collect();
            if fresh.is_empty() {
                whole_question()
            } else {
                ActionBody::Search(fresh)
            }
        }
        ActionTemplate::AnswerFreshEntity => {
            let answer = match observations.split_last() {
                Some((last, earlier)) => {
                    let seen: Vec<String> = earlier
                        .iter()
                        .flat_map(|obs| extract_entity_labels(obs))
                        .chain(ctx.turns.iter().flat_map(|(raw, _)| extract_entity_labels(raw)))
                        .collect();
                    extract_entity_labels(last)
                        .into_iter()
                        .find(|l| !seen.contains(l))
                        .unwrap_or_else(|| "unknown".to_string())
                }
                None => "unknown".to_string(),
            };
            ActionBody::Answer(answer)
        }
        ActionTemplate::AnswerFirstEntity => {
            let answer = observations
                .last()
                .and_then(|obs| extract_entity_labels(obs).into_iter().next())
                .unwrap_or_else(|| "unknown".to_string());
            ActionBody::Answer(answer)
        }
    }
}

impl Researcher for ToyPolicy {
    fn act(&self, ctx: &AgentContext<'_>, rng: &mut ChaCha8Rng) -> Result<ActOutput, AgentError> {
        assert_eq!(
            self.template_count(),
            TEMPLATE_COUNT,
            "acting requires the standard template set"
        );
        let feature = self.feature_for_turn(ctx.turn);
        let (template, behavior_prob) = self.sample(feature, rng);
        let kind = ActionTemplate::ALL[template];
        let action = Action {
            think: kind.think().to_string(),
            body: expand(kind, ctx, self.max_queries),
        };
        Ok(ActOutput {
            raw: RawActionText::new(render_action(&action)),
            decision: Some(PolicyDecision {
                feature,
                template,
                behavior_prob,
            }),
        })
    }
}
