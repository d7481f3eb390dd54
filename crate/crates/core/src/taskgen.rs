//! Deterministic generation of synthetic deep-search tasks.
//!
//! Every task is built from a reasoning tree over a closed synthetic entity
//! namespace (`E<num>-<word>` entities, `P<num>-<word>` property tokens).
//! Entity nodes carry constraint children; a constraint is either a literal
//! property ("bears the sigil P9-umbra") or a link to another entity that
//! must itself be discovered ("was forged by" -> child entity). The corpus
//! holds one document per constraint edge plus template-matched distractor
//! documents with fresh labels, so lexical search retrieves plausible noise
//! but exactly one entity satisfies the root constraint set.
//!
//! Tasks and corpora serialize to line-delimited JSON; those two files are
//! the interchange format consumed by every other module.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskGenError {
    #[error("infeasible generation config: {0}")]
    InfeasibleConfig(String),
    #[error("tree has no linked intermediate entities to hint at")]
    TreeTooShallow,
    #[error("malformed reasoning tree: {0}")]
    MalformedTree(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Entity,
    Constraint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: u32,
    pub kind: NodeKind,
    pub label: String,
    pub parent: Option<u32>,
}

/// Hierarchical decomposition of one task: the root entity is the answer,
/// constraint nodes encode the clues that identify each entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTree {
    pub nodes: Vec<TreeNode>,
    pub root: u32,
}

impl ReasoningTree {
    pub fn node(&self, id: u32) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn children(&self, id: u32) -> Vec<u32> {
        self.nodes
            .iter()
            .filter(|n| n.parent == Some(id))
            .map(|n| n.id)
            .collect()
    }

    pub fn is_leaf(&self, id: u32) -> bool {
        self.children(id).is_empty()
    }

    /// Path length from the root to `id`, counted in nodes.
    pub fn node_depth(&self, id: u32) -> usize {
        let mut depth = 1;
        let mut cur = id;
        while let Some(p) = self.node(cur).parent {
            depth += 1;
            cur = p;
        }
        depth
    }

    /// Checks the structural invariants: ids match positions, exactly one
    /// root, every non-root node has a parent, and parent links are acyclic.
    pub fn validate(&self) -> Result<(), TaskGenError> {
        for (pos, n) in self.nodes.iter().enumerate() {
            if n.id as usize != pos {
                return Err(TaskGenError::MalformedTree(format!(
                    "node id {} at position {pos}",
                    n.id
                )));
            }
        }
        let roots: Vec<_> = self.nodes.iter().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].id != self.root {
            return Err(TaskGenError::MalformedTree("root mismatch".to_string()));
        }
        for n in &self.nodes {
            let mut cur = n.id;
            let mut hops = 0;
            while let Some(p) = self.node(cur).parent {
                cur = p;
                hops += 1;
                if hops > self.nodes.len() {
                    return Err(TaskGenError::MalformedTree("cycle".to_string()));
                }
            }
            if cur != self.root {
                return Err(TaskGenError::MalformedTree(format!(
                    "node {} detached from root",
                    n.id
                )));
            }
        }
        Ok(())
    }
}

/// Longest root-to-leaf path in nodes (a single node counts as 1), and the
/// sum of child counts over all non-leaf nodes.
pub fn tree_metrics(tree: &ReasoningTree) -> (usize, usize) {
    fn depth_from(tree: &ReasoningTree, id: u32) -> usize {
        let kids = tree.children(id);
        1 + kids
            .iter()
            .map(|&k| depth_from(tree, k))
            .max()
            .unwrap_or(0)
    }
    let depth = depth_from(tree, tree.root);
    let width = tree
        .nodes
        .iter()
        .map(|n| tree.children(n.id).len())
        .sum::<usize>();
    (depth, width)
}

/// An intermediate entity worth partial reward, with its normalized weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoal {
    pub entity: String,
    pub weight: f64,
}

/// One training unit: question, gold answer, weighted sub-goals, guiding
/// hint queries, the reasoning tree, and the ids of its corpus slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub sub_goals: Vec<SubGoal>,
    pub hints: Vec<String>,
    pub tree: ReasoningTree,
    pub doc_ids: Vec<String>,
}

/// A corpus document: one constraint-edge fact or a distractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

const ENTITY_WORDS: &[&str] = &[
    "raven", "lantern", "amber", "cobalt", "ember", "quartz", "willow", "falcon", "marble",
    "cinder", "juniper", "osprey", "garnet", "heron", "indigo", "jasper", "kestrel", "larch",
    "meridian", "nimbus", "onyx", "pewter", "quill", "rowan", "saffron", "tamarind", "umber",
    "vervain", "wicker", "yarrow", "zephyr", "alder", "basalt", "cedar", "damson", "elder",
    "fennel", "gorse", "hazel", "iris", "jade", "krill", "lichen", "mallow", "nettle", "ochre",
    "pumice", "reed", "sorrel", "teasel", "urchin", "vetch", "wrasse", "xenia", "yew", "zinnia",
    "argon", "boron", "cesium", "dysprosium", "erbium", "fermium", "gallium", "hafnium",
    "iodine", "krypton", "lithium", "mercury", "neon", "osmium", "platinum", "radon", "scandium",
    "thorium", "uranium", "vanadium", "wolfram", "xenon", "ytterbium", "zirconium", "aster",
    "briar", "clover", "dahlia", "edelweiss", "foxglove", "gentian", "hyacinth", "ivy",
    "jonquil", "kale", "lupine", "myrtle", "nasturtium", "orchid", "poppy", "quince", "rue",
    "sage", "thistle", "ulex", "verbena", "wisteria", "xyris", "yucca", "zelkova",
];

const LEAF_RELATIONS: &[&str] = &[
    "bears the sigil",
    "guards the relic",
    "carries the callsign",
    "is recorded in the ledger",
    "originates from the province",
    "wields the standard",
    "holds the charter",
    "keeps the cipher",
];

const LINK_RELATIONS: &[&str] = &[
    "was forged by",
    "was discovered by",
    "was chronicled by",
    "is allied with",
    "succeeded",
    "was mentored by",
];

/// Probability that a non-chain constraint slot links to a terminal entity
/// instead of a literal property.
const EXTRA_ENTITY_PROB: f64 = 0.3;

/// Distinct labels drawn from the synthetic namespace, unique per task.
struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn new() -> Self {
        Self {
            used: HashSet::new(),
        }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, prefix: char) -> String {
        loop {
            let num = rng.gen_range(1..100u32);
            let word = ENTITY_WORDS[rng.gen_range(0..ENTITY_WORDS.len())];
            let label = format!("{prefix}{num}-{word}");
            if self.used.insert(label.clone()) {
                return label;
            }
        }
    }

    fn entity(&mut self, rng: &mut ChaCha8Rng) -> String {
        self.fresh(rng, 'E')
    }

    fn property(&mut self, rng: &mut ChaCha8Rng) -> String {
        self.fresh(rng, 'P')
    }
}

struct TreeBuilder {
    nodes: Vec<TreeNode>,
}

impl TreeBuilder {
    fn add(&mut self, kind: NodeKind, label: String, parent: Option<u32>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode {
            id,
            kind,
            label,
            parent,
        });
        id
    }
}

/// Generates one task and its document corpus. Deterministic in `seed`.
///
/// `depth` is the length of the main entity chain (1 = the answer is
/// identified by literal constraints alone), `branching` the number of
/// constraints per chain entity, and `distractors_per_edge` the number of
/// template-matched noise documents per fact.
pub fn generate_task(
    seed: u64,
    depth: usize,
    branching: usize,
    distractors_per_edge: usize,
) -> Result<(Task, Vec<Document>), TaskGenError> {
    if depth < 1 {
        return Err(TaskGenError::InfeasibleConfig("depth must be >= 1".into()));
    }
    if branching < 1 {
        return Err(TaskGenError::InfeasibleConfig(
            "branching must be >= 1".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut namer = Namer::new();
    let mut builder = TreeBuilder { nodes: Vec::new() };

    build_entity(
        &mut builder,
        &mut rng,
        &mut namer,
        None,
        1,
        depth,
        branching,
        true,
    );
    let tree = ReasoningTree {
        nodes: builder.nodes,
        root: 0,
    };
    tree.validate().expect("generated tree is well-formed");

    let answer = tree.node(tree.root).label.clone();
    let question = render_question(&tree);
    let sub_goals = weighted_subgoals(&tree);
    let hints = if depth >= 2 {
        derive_hints(&tree)?
    } else {
        Vec::new()
    };

    let corpus = render_corpus(&tree, seed, distractors_per_edge, &mut rng, &mut namer);
    let doc_ids = corpus.iter().map(|d| d.id.clone()).collect();

    Ok((
        Task {
            id: seed,
            question,
            answer,
            sub_goals,
            hints,
            tree,
            doc_ids,
        },
        corpus,
    ))
}

#[allow(clippy::too_many_arguments)]
fn build_entity(
    builder: &mut TreeBuilder,
    rng: &mut ChaCha8Rng,
    namer: &mut Namer,
    parent: Option<u32>,
    level: usize,
    depth: usize,
    branching: usize,
    on_chain: bool,
) -> u32 {
    let entity_id = builder.add(NodeKind::Entity, namer.entity(rng), parent);

    let constraint_count = if on_chain {
        branching
    } else {
        // terminal entities carry one or two literal clues
        rng.gen_range(1..=branching.min(2))
    };

    for slot in 0..constraint_count {
        let chain_slot = on_chain && level < depth && slot == 0;
        let extra_entity = on_chain
            && level < depth
            && slot > 0
            && rng.gen_bool(EXTRA_ENTITY_PROB);

        if chain_slot || extra_entity {
            let relation = LINK_RELATIONS[rng.gen_range(0..LINK_RELATIONS.len())];
            let constraint_id =
                builder.add(NodeKind::Constraint, relation.to_string(), Some(entity_id));
            build_entity(
                builder,
                rng,
                namer,
                Some(constraint_id),
                level + 1,
                depth,
                branching,
                chain_slot,
            );
        } else {
            let relation = LEAF_RELATIONS[rng.gen_range(0..LEAF_RELATIONS.len())];
            let token = namer.property(rng);
            builder.add(
                NodeKind::Constraint,
                format!("{relation} {token}"),
                Some(entity_id),
            );
        }
    }
    entity_id
}

/// Verbalizes the root constraint set, blurring linked entities into
/// recursive "the entity that …" descriptions so no intermediate label
/// appears in the question.
fn render_question(tree: &ReasoningTree) -> String {
    format!("Which entity {}?", describe_entity(tree, tree.root))
}

fn describe_entity(tree: &ReasoningTree, entity: u32) -> String {
    let phrases: Vec<String> = tree
        .children(entity)
        .into_iter()
        .map(|c| describe_constraint(tree, c))
        .collect();
    phrases.join(" and ")
}

fn describe_constraint(tree: &ReasoningTree, constraint: u32) -> String {
    let node = tree.node(constraint);
    match tree.children(constraint).first() {
        Some(&child) => format!(
            "{} the entity that {}",
            node.label,
            describe_entity(tree, child)
        ),
        None => node.label.clone(),
    }
}

/// All non-root entity nodes, weighted proportionally to the number of
/// entity nodes in the subtree each one unlocks, normalized to sum to one.
pub fn weighted_subgoals(tree: &ReasoningTree) -> Vec<SubGoal> {
    fn entity_subtree_size(tree: &ReasoningTree, id: u32) -> usize {
        let own = usize::from(tree.node(id).kind == NodeKind::Entity);
        own + tree
            .children(id)
            .into_iter()
            .map(|c| entity_subtree_size(tree, c))
            .sum::<usize>()
    }

    let raw: Vec<(String, usize)> = tree
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Entity && n.id != tree.root)
        .map(|n| (n.label.clone(), entity_subtree_size(tree, n.id)))
        .collect();
    let total: usize = raw.iter().map(|(_, s)| s).sum();
    if total == 0 {
        return Vec::new();
    }
    raw.into_iter()
        .map(|(entity, size)| SubGoal {
            entity,
            weight: size as f64 / total as f64,
        })
        .collect()
}

/// Emits 1-3 guiding queries for linked intermediate entities, deepest
/// first. Each query verbalizes the target's own constraints (naming its
/// children where needed) and never contains the target's label.
pub fn derive_hints(tree: &ReasoningTree) -> Result<Vec<String>, TaskGenError> {
    let mut targets: Vec<u32> = tree
        .nodes
        .iter()
        .filter(|n| {
            n.kind == NodeKind::Entity && n.id != tree.root && !tree.children(n.id).is_empty()
        })
        .map(|n| n.id)
        .collect();
    if targets.is_empty() {
        return Err(TaskGenError::TreeTooShallow);
    }
    targets.sort_by_key(|&id| (std::cmp::Reverse(tree.node_depth(id)), id));
    targets.truncate(3);

    Ok(targets
        .into_iter()
        .map(|id| {
            let phrases: Vec<String> = tree
                .children(id)
                .into_iter()
                .map(|c| {
                    let node = tree.node(c);
                    match tree.children(c).first() {
                        Some(&child) => {
                            format!("{} {}", node.label, tree.node(child).label)
                        }
                        None => node.label.clone(),
                    }
                })
                .collect();
            format!("entity that {}", phrases.join(" and "))
        })
        .collect())
}

/// One fact document per constraint edge, each followed by its distractors:
/// same relation template, fresh labels, so no distractor ever satisfies a
/// real constraint.
fn render_corpus(
    tree: &ReasoningTree,
    task_id: u64,
    distractors_per_edge: usize,
    rng: &mut ChaCha8Rng,
    namer: &mut Namer,
) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut seq = 0usize;
    let push = |docs: &mut Vec<Document>, seq: &mut usize, title: String, text: String| {
        docs.push(Document {
            id: format!("t{task_id}-d{:04}", *seq),
            title,
            text,
        });
        *seq += 1;
    };

    for node in &tree.nodes {
        if node.kind != NodeKind::Constraint {
            continue;
        }
        let subject = tree.node(node.parent.expect("constraint has parent")).label.clone();
        match tree.children(node.id).first() {
            Some(&child) => {
                let object = tree.node(child).label.clone();
                push(
                    &mut docs,
                    &mut seq,
                    subject.clone(),
                    format!("{subject} {} {object}.", node.label),
                );
                for _ in 0..distractors_per_edge {
                    let fake_subject = namer.entity(rng);
                    let fake_object = namer.entity(rng);
                    push(
                        &mut docs,
                        &mut seq,
                        fake_subject.clone(),
                        format!("{fake_subject} {} {fake_object}.", node.label),
                    );
                }
            }
            None => {
                push(
                    &mut docs,
                    &mut seq,
                    subject.clone(),
                    format!("{subject} {}.", node.label),
                );
                let relation = node
                    .label
                    .rsplit_once(' ')
                    .map(|(rel, _)| rel.to_string())
                    .unwrap_or_else(|| node.label.clone());
                for _ in 0..distractors_per_edge {
                    let fake_subject = namer.entity(rng);
                    let fake_token = namer.property(rng);
                    push(
                        &mut docs,
                        &mut seq,
                        fake_subject.clone(),
                        format!("{fake_subject} {relation} {fake_token}."),
                    );
                }
            }
        }
    }
    docs
}

pub fn write_tasks_jsonl<W: Write>(mut w: W, tasks: &[Task]) -> std::io::Result<()> {
    for task in tasks {
        serde_json::to_writer(&mut w, task)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(serde_json::from_str(&line)?);
    }
    Ok(tasks)
}

pub fn write_corpus_jsonl<W: Write>(mut w: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl<R: BufRead>(r: R) -> std::io::Result<Vec<Document>> {
    let mut docs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line)?);
    }
    Ok(docs)
}
