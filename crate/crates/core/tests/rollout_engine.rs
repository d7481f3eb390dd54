//! Engine semantics end to end: transitions, hint injection, turn budget,
//! determinism, and the scripted oracle's solvability guarantee.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use searchrl::optimize::{PreparedTask, ToyPolicy};
use searchrl::protocol::{render_action, Action, ActionBody, RawActionText};
use searchrl::refiner::{
    InlineRefiner, OracleRefiner, RefineError, Refiner, Summary, TruncatingRefiner,
    INSUFFICIENT_INFO,
};
use searchrl::retrieval::build_index;
use searchrl::rollout::{
    run_group, run_rollout, ActOutput, AgentContext, AgentError, EngineConfig, OracleResearcher,
    Researcher, RolloutEngine, FORMAT_ERROR_OBSERVATION,
};
use searchrl::taskgen::generate_task;

/// Emits a fixed sequence of raw actions, then keeps searching.
struct Scripted {
    actions: Vec<String>,
}

impl Scripted {
    fn new(actions: Vec<String>) -> Self {
        Self { actions }
    }

    fn always_search() -> Self {
        Self::new(Vec::new())
    }
}

impl Researcher for Scripted {
    fn act(&self, ctx: &AgentContext<'_>, _rng: &mut ChaCha8Rng) -> Result<ActOutput, AgentError> {
        let k = ctx.turns.len();
        let raw = self
            .actions
            .get(k)
            .cloned()
            .unwrap_or_else(|| "<think>keep digging</think><search>anything at all</search>".to_string());
        Ok(ActOutput::plain(RawActionText::new(raw)))
    }
}

struct FailingAgent;

impl Researcher for FailingAgent {
    fn act(&self, _ctx: &AgentContext<'_>, _rng: &mut ChaCha8Rng) -> Result<ActOutput, AgentError> {
        Err(AgentError::Remote("endpoint down".to_string()))
    }
}

struct FailingRefiner;

impl Refiner for FailingRefiner {
    fn refine(&self, _request: &searchrl::refiner::RefineRequest) -> Result<Summary, RefineError> {
        Err(RefineError::RemoteUnavailable("no refiner".to_string()))
    }

    fn name(&self) -> &'static str {
        "failing"
    }
}

fn prepared(seed: u64, depth: usize, branching: usize) -> PreparedTask {
    let (task, corpus) = generate_task(seed, depth, branching, 3).unwrap();
    PreparedTask::new(task, &corpus).unwrap()
}

fn search_action(queries: &[&str]) -> String {
    render_action(&Action {
        think: "scripted".to_string(),
        body: ActionBody::Search(queries.iter().map(|q| q.to_string()).collect()),
    })
}

fn answer_action(answer: &str) -> String {
    render_action(&Action {
        think: "scripted".to_string(),
        body: ActionBody::Answer(answer.to_string()),
    })
}

#[test]
fn answering_immediately_terminates_with_zero_search_calls() {
    let p = prepared(1, 1, 1);
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::new(vec![answer_action("whatever")]);
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
    assert_eq!(t.steps.len(), 1);
    assert_eq!(t.search_calls, 0);
    assert_eq!(t.final_answer.as_deref(), Some("whatever"));
    assert!(!t.truncated);
}

#[test]
fn search_fanout_aligns_entries_with_queries() {
    let p = prepared(2, 2, 2);
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::new(vec![
        search_action(&["first probe", "second probe"]),
        answer_action("done"),
    ]);
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
    let info = t.steps[0].info.as_ref().unwrap();
    assert_eq!(info.entries.len(), 2);
    assert_eq!(info.entries[0].query, "first probe");
    assert_eq!(info.entries[1].query, "second probe");
    assert_eq!(t.search_calls, 2);
}

#[test]
fn turn_budget_truncates_at_max_turns() {
    let p = prepared(3, 2, 2);
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::always_search();
    let cfg = EngineConfig::default();
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &cfg, 0);
    assert!(t.truncated);
    assert_eq!(t.steps.len(), cfg.max_turns);
    assert!(t.final_answer.is_none());
}

#[test]
fn malformed_actions_get_the_format_error_observation_and_count() {
    let p = prepared(4, 1, 1);
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::new(vec![
        "no tags whatsoever".to_string(),
        answer_action("after recovery"),
    ]);
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
    assert_eq!(t.steps.len(), 2);
    assert!(t.steps[0].parse_error.is_some());
    assert_eq!(t.steps[0].observation, FORMAT_ERROR_OBSERVATION);
    assert_eq!(t.final_answer.as_deref(), Some("after recovery"));
}

#[test]
fn hints_replace_queries_exactly_at_the_hint_turn() {
    let p = prepared(5, 3, 2);
    assert!(!p.task.hints.is_empty());
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::always_search();
    let cfg = EngineConfig::default();
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &cfg, 0);

    assert_eq!(t.hint_injected_at, Some(cfg.hint_turn));
    let injected: Vec<usize> = t
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.hint_injected)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(injected, vec![cfg.hint_turn]);

    let step = &t.steps[cfg.hint_turn];
    let action = step.action.as_ref().unwrap();
    assert_eq!(action.queries(), p.task.hints.as_slice());
    assert_eq!(action.think, "keep digging"); // agent's own reasoning kept
    assert_eq!(step.discarded_queries, vec!["anything at all".to_string()]);
}

#[test]
fn no_injection_when_the_trajectory_answers_early() {
    let p = prepared(5, 3, 2);
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::new(vec![
        search_action(&["a"]),
        search_action(&["b"]),
        search_action(&["c"]),
        answer_action("early"),
    ]);
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
    assert_eq!(t.hint_injected_at, None);
    assert!(t.steps.iter().all(|s| !s.hint_injected));
}

#[test]
fn hint_free_tasks_pass_actions_through_unchanged() {
    let p = prepared(6, 1, 2);
    assert!(p.task.hints.is_empty());
    let refiner = TruncatingRefiner::default();
    let agent = Scripted::always_search();
    let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
    assert_eq!(t.hint_injected_at, None);
    let step = &t.steps[EngineConfig::default().hint_turn];
    assert_eq!(
        step.action.as_ref().unwrap().queries(),
        &["anything at all".to_string()]
    );
}

#[test]
fn disabling_hints_changes_only_the_injection_branch() {
    let p = prepared(7, 3, 2);
    let refiner = TruncatingRefiner::default();
    let policy = ToyPolicy::standard(0.8);
    let with_hints = EngineConfig::default();
    let without_hints = EngineConfig {
        hints_enabled: false,
        ..EngineConfig::default()
    };
    let a = run_rollout(&p.task, &p.index, &policy, &refiner, &with_hints, 99);
    let b = run_rollout(&p.task, &p.index, &policy, &refiner, &without_hints, 99);

    assert_eq!(b.hint_injected_at, None);
    let cutoff = a.hint_injected_at.unwrap_or(a.steps.len().min(b.steps.len()));
    for i in 0..cutoff {
        assert_eq!(
            serde_json::to_string(&a.steps[i]).unwrap(),
            serde_json::to_string(&b.steps[i]).unwrap(),
            "step {i} differs before the injection point"
        );
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let p = prepared(8, 2, 2);
    let refiner = OracleRefiner::default();
    let policy = ToyPolicy::standard(0.8);
    let cfg = EngineConfig::default();
    let a = run_rollout(&p.task, &p.index, &policy, &refiner, &cfg, 1234);
    let b = run_rollout(&p.task, &p.index, &policy, &refiner, &cfg, 1234);
    assert_eq!(a, b);
    let c = run_rollout(&p.task, &p.index, &policy, &refiner, &cfg, 1235);
    assert!(a != c || a.final_answer == c.final_answer); // different seed may differ
}

#[test]
fn oracle_solves_depth_two_within_three_turns() {
    for seed in 0..20 {
        let p = prepared(seed, 2, 2);
        let refiner = OracleRefiner::default();
        let agent = OracleResearcher::new(&p.task, 5);
        let t = run_rollout(&p.task, &p.index, &agent, &refiner, &EngineConfig::default(), 0);
        assert_eq!(
            t.final_answer.as_deref(),
            Some(p.task.answer.as_str()),
            "seed {seed}"
        );
        assert!(t.steps.len() <= 3, "seed {seed}: took {} turns", t.steps.len());
    }
}

#[test]
fn oracle_solves_every_generated_task_within_depth_plus_one_search_turns() {
    for seed in 0..60 {
        let depth = 1 + (seed as usize % 4);
        let (task, corpus) = generate_task(seed, depth, 1 + (seed as usize % 3), 3).unwrap();
        let index = build_index(&corpus).unwrap();
        let refiner = OracleRefiner::default();
        let agent = OracleResearcher::new(&task, 5);
        let cfg = EngineConfig {
            max_turns: depth + 2,
            hints_enabled: false,
            ..EngineConfig::default()
        };
        let t = run_rollout(&task, &index, &agent, &refiner, &cfg, 0);
        assert_eq!(
            t.final_answer.as_deref(),
            Some(task.answer.as_str()),
            "seed {seed} depth {depth}"
        );
        let search_turns = t
            .steps
            .iter()
            .filter(|s| s.action.as_ref().is_some_and(|a| a.is_search()))
            .count();
        assert!(
            search_turns <= depth + 1,
            "seed {seed}: {search_turns} search turns for depth {depth}"
        );
    }
}

#[test]
fn random_policy_underperforms_the_oracle() {
    let mut random_successes = 0usize;
    let mut oracle_successes = 0usize;
    let trials = 200;
    let policy = ToyPolicy::standard(0.8);
    let refiner = OracleRefiner::default();
    let cfg = EngineConfig::default();
    for seed in 0..trials {
        let p = prepared(1000 + seed, 3, 2);
        let t = run_rollout(&p.task, &p.index, &policy, &refiner, &cfg, seed);
        if t.final_answer.as_deref() == Some(p.task.answer.as_str()) {
            random_successes += 1;
        }
        let oracle = OracleResearcher::new(&p.task, 5);
        let t = run_rollout(&p.task, &p.index, &oracle, &refiner, &cfg, seed);
        if t.final_answer.as_deref() == Some(p.task.answer.as_str()) {
            oracle_successes += 1;
        }
    }
    assert_eq!(oracle_successes, trials as usize);
    assert!(
        (random_successes as f64) < 0.8 * oracle_successes as f64,
        "random {random_successes} vs oracle {oracle_successes}"
    );
}

#[test]
fn agent_failure_truncates_with_an_error_annotation() {
    let p = prepared(9, 2, 2);
    let refiner = TruncatingRefiner::default();
    let t = run_rollout(&p.task, &p.index, &FailingAgent, &refiner, &EngineConfig::default(), 0);
    assert!(t.truncated);
    assert!(t.error.as_deref().unwrap_or("").contains("endpoint down"));
}

#[test]
fn refiner_failure_falls_back_to_truncation_and_is_counted() {
    let p = prepared(10, 1, 1);
    let question = p.task.question.clone();
    let agent = Scripted::new(vec![search_action(&[question.as_str()]), answer_action("x")]);
    let t = run_rollout(&p.task, &p.index, &agent, &FailingRefiner, &EngineConfig::default(), 0);
    assert_eq!(t.refiner_fallbacks, 1);
    let info = t.steps[0].info.as_ref().unwrap();
    assert!(!info.entries[0].summary.is_empty());
    assert_ne!(info.entries[0].summary, INSUFFICIENT_INFO);
}

#[test]
fn stepping_a_terminated_state_is_an_error() {
    let p = prepared(11, 1, 1);
    let refiner = TruncatingRefiner::default();
    let cfg = EngineConfig::default();
    let engine = RolloutEngine::new(&p.task, &p.index, &refiner, &cfg);
    let state = engine.initial_state();
    let state = engine
        .step(state, RawActionText::new(answer_action("x")))
        .unwrap();
    assert!(state.terminated);
    let err = engine
        .step(state, RawActionText::new(answer_action("y")))
        .unwrap_err();
    assert_eq!(
        err,
        searchrl::rollout::EngineError::SteppedAfterTermination
    );
}

#[test]
fn groups_have_group_size_members_and_reject_singletons() {
    let p = prepared(12, 2, 2);
    let refiner = TruncatingRefiner::default();
    let policy = ToyPolicy::standard(0.8);
    let cfg = EngineConfig::default();
    let seeds: Vec<u64> = (0..8).collect();
    let group = run_group(&p.task, &p.index, &policy, &refiner, &cfg, 0.3, &seeds).unwrap();
    assert_eq!(group.len(), 8);

    let same = run_group(&p.task, &p.index, &policy, &refiner, &cfg, 0.3, &[7, 7, 7]).unwrap();
    assert_eq!(same.trajectories[0], same.trajectories[1]);
    assert_eq!(same.trajectories[1], same.trajectories[2]);

    assert!(matches!(
        run_group(&p.task, &p.index, &policy, &refiner, &cfg, 0.3, &[1]),
        Err(searchrl::rollout::EngineError::GroupTooSmall(1))
    ));
}

#[test]
fn refined_runs_compress_the_researcher_context() {
    // paired seeds: oracle refiner vs raw snippets inlined, same oracle agent
    let mut refined_total = 0u64;
    let mut inline_total = 0u64;
    let mut ratios = Vec::new();
    for seed in 0..40 {
        let p = prepared(2000 + seed, 3, 2);
        let agent = OracleResearcher::new(&p.task, 5);
        let cfg = EngineConfig::default();
        let refined = run_rollout(&p.task, &p.index, &agent, &OracleRefiner::default(), &cfg, seed);
        let inline = run_rollout(&p.task, &p.index, &agent, &InlineRefiner, &cfg, seed);
        refined_total += refined.length_tokens;
        inline_total += inline.length_tokens;
        ratios.push(searchrl::refiner::compression_ratio(&refined));
        assert!((searchrl::refiner::compression_ratio(&inline) - 1.0).abs() < 1e-12);
    }
    assert!(refined_total < inline_total);
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean_ratio < 1.0, "mean compression ratio {mean_ratio}");
}
