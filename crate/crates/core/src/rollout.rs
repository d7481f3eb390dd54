//! The turn-loop engine: parses agent actions, runs retrieval and
//! refinement, injects guiding hints into stalled trajectories, enforces the
//! turn budget, and records everything needed for reward computation and
//! policy optimization.

use crate::protocol::{
    self, Action, ActionBody, InfoBlock, InfoEntry, ParseError, RawActionText,
};
use crate::refiner::{RefineRequest, Refiner, TruncatingRefiner};
use crate::retrieval::{search, Index};
use crate::reward;
use crate::taskgen::Task;
use crate::text::{extract_entity_labels, whitespace_tokens};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Observation sent back after a malformed action. Versioned so logged
/// trajectories stay reproducible across releases.
pub const FORMAT_ERROR_OBSERVATION: &str = "format-error/v1: the previous response was not a \
valid action. Reply with <think>...</think> followed by exactly one <search>...</search> \
(one query per line) or one <answer>...</answer>.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("step called on a terminated trajectory")]
    SteppedAfterTermination,
    #[error("rollout group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("reward computation failed: {0}")]
    Reward(String),
}

#[derive(Debug, Clone, Error)]
pub enum AgentError {
    #[error("remote agent failure: {0}")]
    Remote(String),
}

/// Engine knobs. Defaults follow the training setup this pipeline targets:
/// ten turns, hint injection at turn five, top-5 retrieval, at most five
/// parallel queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_turns: usize,
    /// Turn index (0-based) at which hints replace a live search action.
    pub hint_turn: usize,
    pub top_k: usize,
    pub max_queries_per_turn: usize,
    /// Disable to reproduce the no-hints ablation; everything else is
    /// byte-identical except the injection branch.
    pub hints_enabled: bool,
    /// When true, the policy decision at the injected turn keeps its weight
    /// in importance ratios; by default it is masked out as off-policy.
    pub ratio_includes_hint_decision: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_turns: 10,
            hint_turn: 5,
            top_k: 5,
            max_queries_per_turn: 5,
            hints_enabled: true,
            ratio_includes_hint_decision: false,
        }
    }
}

/// One executed turn as recorded in the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub raw: RawActionText,
    /// The executed action (post hint substitution), absent on parse errors.
    pub action: Option<Action>,
    pub parse_error: Option<ParseError>,
    pub info: Option<InfoBlock>,
    /// Exactly what the researcher saw after this turn.
    pub observation: String,
    pub hint_injected: bool,
    pub discarded_queries: Vec<String>,
}

/// A policy decision made while producing one action, recorded for
/// importance ratios. `masked` marks decisions whose executed action was
/// replaced by hint injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDecision {
    pub turn: usize,
    pub feature: usize,
    pub template: usize,
    pub behavior_prob: f64,
    pub masked: bool,
}

/// Append-only rollout state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub turn: usize,
    pub steps: Vec<StepRecord>,
    pub terminated: bool,
    pub final_answer: Option<String>,
    pub hint_injected_at: Option<usize>,
    pub raw_evidence_tokens: u64,
    pub refiner_fallbacks: u32,
}

impl EngineState {
    fn new() -> Self {
        Self {
            turn: 0,
            steps: Vec::new(),
            terminated: false,
            final_answer: None,
            hint_injected_at: None,
            raw_evidence_tokens: 0,
            refiner_fallbacks: 0,
        }
    }
}

/// Completed rollout record; the unit written to trajectory logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u64,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub truncated: bool,
    pub length_tokens: u64,
    pub search_calls: u64,
    pub hint_injected_at: Option<usize>,
    pub raw_evidence_tokens: u64,
    pub refiner_fallbacks: u32,
    pub decisions: Vec<TrajectoryDecision>,
    pub error: Option<String>,
}

impl Trajectory {
    /// Everything sub-goal detection may look at: info summaries plus the
    /// agent's own reasoning traces.
    pub fn reward_haystack(&self) -> String {
        let mut text = String::new();
        for step in &self.steps {
            if let Some(action) = &step.action {
                text.push_str(&action.think);
                text.push(' ');
            }
            if let Some(info) = &step.info {
                for entry in &info.entries {
                    text.push_str(&entry.summary);
                    text.push(' ');
                }
            }
        }
        text
    }

    /// Info summaries only, excluding think traces. Used by trajectory
    /// verification to reject sub-goals claimed without retrieved evidence.
    pub fn summary_text(&self) -> String {
        let mut text = String::new();
        for step in &self.steps {
            if let Some(info) = &step.info {
                for entry in &info.entries {
                    text.push_str(&entry.summary);
                    text.push(' ');
                }
            }
        }
        text
    }
}

/// What an agent sees when asked to act: the question and every prior turn
/// (its own raw emission and the environment's observation).
#[derive(Debug, Clone)]
pub struct AgentContext<'a> {
    pub question: &'a str,
    pub turns: Vec<(&'a str, &'a str)>,
    pub turn: usize,
}

/// Output of one agent call: the raw emission and, for parametric policies,
/// the sampled decision behind it.
#[derive(Debug, Clone)]
pub struct ActOutput {
    pub raw: RawActionText,
    pub decision: Option<PolicyDecision>,
}

impl ActOutput {
    pub fn plain(raw: RawActionText) -> Self {
        Self {
            raw,
            decision: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyDecision {
    pub feature: usize,
    pub template: usize,
    pub behavior_prob: f64,
}

/// A researcher agent. Implementations must be stateless across turns
/// (everything observable is in the context) so rollouts can run in
/// parallel against one shared instance.
pub trait Researcher: Send + Sync {
    fn act(&self, ctx: &AgentContext<'_>, rng: &mut ChaCha8Rng) -> Result<ActOutput, AgentError>;
}

/// Immutable per-task dependencies driving one or more rollouts.
pub struct RolloutEngine<'a> {
    pub task: &'a Task,
    pub index: &'a Index,
    pub refiner: &'a dyn Refiner,
    pub config: &'a EngineConfig,
}

impl<'a> RolloutEngine<'a> {
    pub fn new(
        task: &'a Task,
        index: &'a Index,
        refiner: &'a dyn Refiner,
        config: &'a EngineConfig,
    ) -> Self {
        Self {
            task,
            index,
            refiner,
            config,
        }
    }

    pub fn initial_state(&self) -> EngineState {
        EngineState::new()
    }

    /// Substitutes the task's hint queries for a live search action at the
    /// hint turn, keeping the agent's reasoning trace. Returns the executed
    /// action and the discarded queries when substitution happened.
    pub fn maybe_inject_hints(
        &self,
        state: &EngineState,
        parsed: Action,
    ) -> (Action, Option<Vec<String>>) {
        let is_search = parsed.is_search();
        if !self.config.hints_enabled
            || !is_search
            || state.terminated
            || state.hint_injected_at.is_some()
            || state.turn != self.config.hint_turn
            || self.task.hints.is_empty()
        {
            return (parsed, None);
        }
        let discarded = parsed.queries().to_vec();
        let hints: Vec<String> = self
            .task
            .hints
            .iter()
            .take(self.config.max_queries_per_turn)
            .cloned()
            .collect();
        (
            Action {
                think: parsed.think,
                body: ActionBody::Search(hints),
            },
            Some(discarded),
        )
    }

    /// Applies one raw agent emission to the state: parse, hint
    /// substitution, retrieval fan-out, refinement, observation.
    pub fn step(
        &self,
        state: EngineState,
        raw: RawActionText,
    ) -> Result<EngineState, EngineError> {
        if state.terminated {
            return Err(EngineError::SteppedAfterTermination);
        }
        let mut state = state;

        match protocol::parse_action_with_limit(&raw, self.config.max_queries_per_turn) {
            Err(e) => {
                state.steps.push(StepRecord {
                    raw,
                    action: None,
                    parse_error: Some(e),
                    info: None,
                    observation: FORMAT_ERROR_OBSERVATION.to_string(),
                    hint_injected: false,
                    discarded_queries: Vec::new(),
                });
            }
            Ok(parsed) => match &parsed.body {
                ActionBody::Answer(answer) => {
                    state.final_answer = Some(answer.clone());
                    state.terminated = true;
                    state.steps.push(StepRecord {
                        raw,
                        action: Some(parsed.clone()),
                        parse_error: None,
                        info: None,
                        observation: String::new(),
                        hint_injected: false,
                        discarded_queries: Vec::new(),
                    });
                }
                ActionBody::Search(_) => {
                    let (executed, discarded) = self.maybe_inject_hints(&state, parsed);
                    let hint_injected = discarded.is_some();
                    if hint_injected {
                        state.hint_injected_at = Some(state.turn);
                    }
                    let mut entries = Vec::with_capacity(executed.queries().len());
                    for query in executed.queries() {
                        let evidence = search(self.index, query, self.config.top_k);
                        state.raw_evidence_tokens += evidence
                            .hits
                            .iter()
                            .map(|h| whitespace_tokens(&h.snippet) as u64)
                            .sum::<u64>();
                        let request = RefineRequest {
                            original_question: self.task.question.clone(),
                            current_query: query.clone(),
                            evidence,
                        };
                        let summary = match self.refiner.refine(&request) {
                            Ok(s) => s,
                            Err(_) => {
                                state.refiner_fallbacks += 1;
                                TruncatingRefiner::default()
                                    .refine(&request)
                                    .expect("truncating refiner is total")
                            }
                        };
                        entries.push(InfoEntry {
                            query: query.clone(),
                            summary: summary.text,
                        });
                    }
                    let info = InfoBlock::new(entries);
                    let observation =
                        protocol::render_info(&info).expect("search actions have queries");
                    state.steps.push(StepRecord {
                        raw,
                        action: Some(executed),
                        parse_error: None,
                        info: Some(info),
                        observation,
                        hint_injected,
                        discarded_queries: discarded.unwrap_or_default(),
                    });
                }
            },
        }

        state.turn += 1;
        if !state.terminated && state.turn >= self.config.max_turns {
            state.terminated = true;
        }
        Ok(state)
    }

    fn context<'s>(&'s self, state: &'s EngineState) -> AgentContext<'s> {
        AgentContext {
            question: self.task.question.as_str(),
            turns: state
                .steps
                .iter()
                .map(|s| (s.raw.as_str(), s.observation.as_str()))
                .collect(),
            turn: state.turn,
        }
    }

    fn finish(&self, state: EngineState, decisions: Vec<TrajectoryDecision>, error: Option<String>) -> Trajectory {
        let mut tokens = whitespace_tokens(&self.task.question) as u64;
        let mut search_calls = 0u64;
        for step in &state.steps {
            tokens += whitespace_tokens(step.raw.as_str()) as u64;
            tokens += whitespace_tokens(&step.observation) as u64;
            if let Some(action) = &step.action {
                search_calls += action.queries().len() as u64;
            }
        }
        Trajectory {
            task_id: self.task.id,
            truncated: state.final_answer.is_none(),
            final_answer: state.final_answer,
            steps: state.steps,
            length_tokens: tokens.max(1),
            search_calls,
            hint_injected_at: state.hint_injected_at,
            raw_evidence_tokens: state.raw_evidence_tokens,
            refiner_fallbacks: state.refiner_fallbacks,
            decisions,
            error,
        }
    }
}

/// Runs one rollout to termination. Deterministic given the seed and
/// deterministic agents; remote-agent failures terminate the trajectory
/// with an error annotation instead of propagating.
pub fn run_rollout(
    task: &Task,
    index: &Index,
    researcher: &dyn Researcher,
    refiner: &dyn Refiner,
    config: &EngineConfig,
    seed: u64,
) -> Trajectory {
    let engine = RolloutEngine::new(task, index, refiner, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = engine.initial_state();
    let mut decisions = Vec::new();

    while !state.terminated {
        let ctx = engine.context(&state);
        let turn = state.turn;
        match researcher.act(&ctx, &mut rng) {
            Ok(out) => {
                let next = match engine.step(state, out.raw) {
                    Ok(next) => next,
                    Err(_) => unreachable!("loop only steps live states"),
                };
                if let Some(d) = out.decision {
                    let injected_here = next.hint_injected_at == Some(turn);
                    decisions.push(TrajectoryDecision {
                        turn,
                        feature: d.feature,
                        template: d.template,
                        behavior_prob: d.behavior_prob,
                        masked: injected_here && !config.ratio_includes_hint_decision,
                    });
                }
                state = next;
            }
            Err(e) => {
                state.terminated = true;
                return engine.finish(state, decisions, Some(e.to_string()));
            }
        }
    }
    engine.finish(state, decisions, None)
}

/// Runs `seeds.len()` independent rollouts for one task and scores them.
/// Groups need at least two members for advantage normalization.
pub fn run_group(
    task: &Task,
    index: &Index,
    researcher: &dyn Researcher,
    refiner: &dyn Refiner,
    config: &EngineConfig,
    subgoal_weight: f64,
    seeds: &[u64],
) -> Result<crate::optimize::RolloutGroup, EngineError> {
    if seeds.len() < 2 {
        return Err(EngineError::GroupTooSmall(seeds.len()));
    }
    let mut trajectories = Vec::with_capacity(seeds.len());
    let mut breakdowns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let traj = run_rollout(task, index, researcher, refiner, config, seed);
        let breakdown =
            reward::score_trajectory(&traj, &task.answer, &task.sub_goals, subgoal_weight)
                .map_err(|e| EngineError::Reward(e.to_string()))?;
        trajectories.push(traj);
        breakdowns.push(breakdown);
    }
    Ok(crate::optimize::RolloutGroup::new(trajectories, breakdowns))
}

/// Scripted agent that resolves entities bottom-up along the task's tree:
/// one search round per dependency tier, then an answer extracted from the
/// final observation. Used as the executable solvability check and as an
/// upper-bound baseline.
pub struct OracleResearcher {
    plan: Vec<Vec<String>>,
}

impl OracleResearcher {
    pub fn new(task: &Task, max_queries_per_turn: usize) -> Self {
        use crate::taskgen::NodeKind;
        let tree = &task.tree;
        let entities: Vec<u32> = tree
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Entity)
            .map(|n| n.id)
            .collect();

        let link_children = |e: u32| -> Vec<u32> {
            tree.children(e)
                .into_iter()
                .filter_map(|c| tree.children(c).first().copied())
                .collect()
        };
        let identifying_query = |e: u32| -> String {
            tree.children(e)
                .into_iter()
                .map(|c| {
                    let node = tree.node(c);
                    match tree.children(c).first() {
                        Some(&child) => format!("{} {}", node.label, tree.node(child).label),
                        None => node.label.clone(),
                    }
                })
                .collect::<Vec<_>>()
                .join(" and ")
        };

        let mut discovered: Vec<u32> = Vec::new();
        let mut plan: Vec<Vec<String>> = Vec::new();
        while discovered.len() < entities.len() {
            let ready: Vec<u32> = entities
                .iter()
                .copied()
                .filter(|e| {
                    !discovered.contains(e)
                        && link_children(*e).iter().all(|c| discovered.contains(c))
                })
                .collect();
            if ready.is_empty() {
                break;
            }
            let queries: Vec<String> = ready
                .iter()
                .map(|&e| identifying_query(e))
                .filter(|q| !q.is_empty())
                .collect();
            for chunk in queries.chunks(max_queries_per_turn.max(1)) {
                plan.push(chunk.to_vec());
            }
            discovered.extend(ready);
        }
        Self { plan }
    }
}

impl Researcher for OracleResearcher {
    fn act(&self, ctx: &AgentContext<'_>, _rng: &mut ChaCha8Rng) -> Result<ActOutput, AgentError> {
        let k = ctx.turns.len();
        if k < self.plan.len() {
            let action = Action {
                think: "resolve the next tier of entities from their recorded clues".to_string(),
                body: ActionBody::Search(self.plan[k].clone()),
            };
            return Ok(ActOutput::plain(RawActionText::new(protocol::render_action(
                &action,
            ))));
        }
        let answer = ctx
            .turns
            .last()
            .map(|(raw, obs)| {
                let asked = extract_entity_labels(raw);
                extract_entity_labels(obs)
                    .into_iter()
                    .find(|label| !asked.contains(label))
                    .unwrap_or_else(|| "unknown".to_string())
            })
            .unwrap_or_else(|| "unknown".to_string());
        let action = Action {
            think: "the subject of the final tier's evidence is the answer".to_string(),
            body: ActionBody::Answer(answer),
        };
        Ok(ActOutput::plain(RawActionText::new(protocol::render_action(
            &action,
        ))))
    }
}

pub fn write_trajectories_jsonl<W: Write>(
    mut w: W,
    trajectories: &[Trajectory],
) -> std::io::Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
