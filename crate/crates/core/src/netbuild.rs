//! Incremental construction of the hypothesis network for a story.
//!
//! Asserting a token runs forward-chaining rules to quiescence:
//!
//! - R1: one type hypothesis per lexicon sense of the word.
//! - R2: a word observation node over the sense nodes (plus the entity's
//!   mention node when mentions are enabled), clamped true.
//! - R3: a plan-instance hypothesis for every schema specializing a
//!   sense, and a slot-filler type node for each of its slots.
//! - R4: an equality hypothesis for every (slot term, entity) pair whose
//!   restriction matches a sense of the entity; the equality and the
//!   slot node splice into the parent set of the entity's type node.
//! - R5: a slot-exclusivity constraint node (clamped true) once a slot
//!   term has two or more candidate fillers.
//! - R6: a mention node per entity, parented by all equality hypotheses
//!   that would make the entity fill a role.
//!
//! Rules create nodes only if absent, so re-running them is a no-op and
//! assertion order cannot change the (kind, CPT, edge) structure.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::infer::Factor;
use crate::library::{LexEntry, PlanLibrary, PlanSchema, Story};

/// Index of a node within its network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn new(index: usize) -> Self {
        NodeId(u32::try_from(index).expect("node index fits in u32"))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An unevaluated slot application like `(rope-of k1)`: whatever fills
/// `slot` in the plan instance hosted by `plan_entity`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotTerm {
    pub plan_entity: String,
    pub schema: String,
    pub slot: String,
}

impl fmt::Display for SlotTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} {})", self.slot, self.plan_entity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// The entity denoted by `entity` is of `type_name`.
    EntityType { entity: String, type_name: String },
    /// The entity hosts an instance of the plan schema.
    PlanInstance { entity: String, schema: String },
    /// The slot term's denotation is of `type_name`.
    SlotType { term: SlotTerm, type_name: String },
    /// The slot term and the observed entity denote the same individual.
    Equality { term: SlotTerm, entity: String },
    /// The story used `word` for `entity` at position `token`.
    Word { token: usize, word: String, entity: String },
    /// The author chose to mention the entity.
    Mention { entity: String },
    /// At most one candidate fills the slot term (clamped true).
    SlotExclusivity { term: SlotTerm },
    /// Free-form node for hand-constructed networks.
    Free { label: String },
}

impl NodeKind {
    pub fn label(&self) -> String {
        match self {
            NodeKind::EntityType { entity, type_name } => format!("({type_name} {entity})"),
            NodeKind::PlanInstance { entity, schema } => format!("({schema} {entity})"),
            NodeKind::SlotType { term, type_name } => format!("({type_name} {term})"),
            NodeKind::Equality { term, entity } => format!("(= {term} {entity})"),
            NodeKind::Word { word, .. } => format!("\"{word}\""),
            NodeKind::Mention { entity } => format!("(mention {entity})"),
            NodeKind::SlotExclusivity { term } => format!("(excl {term})"),
            NodeKind::Free { label } => label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Ordered; the CPT scope is exactly `parents ++ [id]`.
    pub parents: Vec<NodeId>,
    pub cpt: Factor,
}

impl Node {
    pub fn new(id: NodeId, kind: NodeKind, parents: Vec<NodeId>, cpt: Factor) -> Self {
        Node { id, kind, parents, cpt }
    }
}

/// A finalized, immutable network plus its evidence map (word and
/// slot-exclusivity nodes clamped true).
#[derive(Debug, Clone, PartialEq)]
pub struct BayesNet {
    nodes: Vec<Node>,
    evidence: BTreeMap<NodeId, bool>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("word `{0}` is not in the lexicon")]
    UnknownWord(String),
    #[error("entity `{entity}` was already asserted with word `{word}`")]
    DuplicateEntity { entity: String, word: String },
    #[error("slot term {term} has more than {max} equality candidates")]
    TooManyEqualityCandidates { term: String, max: usize },
    #[error("invalid network: {0}")]
    Network(String),
    #[error("missing definition: {0}")]
    MissingDefinition(String),
}

const CPT_ROW_TOLERANCE: f64 = 1e-12;

impl BayesNet {
    /// Empty network (an empty story builds this).
    pub fn empty() -> Self {
        BayesNet { nodes: Vec::new(), evidence: BTreeMap::new() }
    }

    /// Validates ids, parent references, acyclicity, CPT scopes and CPT
    /// row normalization.
    pub fn from_parts(nodes: Vec<Node>, evidence: BTreeMap<NodeId, bool>) -> Result<Self, BuildError> {
        for (i, node) in nodes.iter().enumerate() {
            if node.id.index() != i {
                return Err(BuildError::Network(format!(
                    "node at position {i} has id {}",
                    node.id
                )));
            }
            for p in &node.parents {
                if p.index() >= nodes.len() {
                    return Err(BuildError::Network(format!("node {} has unknown parent {p}", node.id)));
                }
                if *p == node.id {
                    return Err(BuildError::Network(format!("node {} is its own parent", node.id)));
                }
            }
            let mut expected = node.parents.clone();
            expected.push(node.id);
            if node.cpt.scope() != expected.as_slice() {
                return Err(BuildError::Network(format!(
                    "node {} CPT scope must be parents plus self",
                    node.id
                )));
            }
            let table = node.cpt.table();
            for row in table.chunks_exact(2) {
                if (row[0] + row[1] - 1.0).abs() > CPT_ROW_TOLERANCE {
                    return Err(BuildError::Network(format!("node {} has an unnormalized CPT row", node.id)));
                }
                if row[0] > 1.0 + CPT_ROW_TOLERANCE || row[1] > 1.0 + CPT_ROW_TOLERANCE {
                    return Err(BuildError::Network(format!("node {} has a CPT entry above 1", node.id)));
                }
            }
        }
        for id in evidence.keys() {
            if id.index() >= nodes.len() {
                return Err(BuildError::Network(format!("evidence names unknown node {id}")));
            }
        }
        // Kahn's algorithm over parent edges.
        let mut indegree: Vec<usize> = nodes.iter().map(|n| n.parents.len()).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for node in &nodes {
            for p in &node.parents {
                children[p.index()].push(node.id.index());
            }
        }
        let mut ready: Vec<usize> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut seen = 0usize;
        while let Some(i) = ready.pop() {
            seen += 1;
            for c in &children[i] {
                indegree[*c] -= 1;
                if indegree[*c] == 0 {
                    ready.push(*c);
                }
            }
        }
        if seen != nodes.len() {
            return Err(BuildError::Network("parent edges form a cycle".to_string()));
        }
        Ok(BayesNet { nodes, evidence })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId::new)
    }

    pub fn evidence(&self) -> &BTreeMap<NodeId, bool> {
        &self.evidence
    }

    /// Display labels in id order. Duplicate labels (possible when two
    /// schemas share a slot name) get a `#k` suffix so labels stay
    /// unique and addressable.
    pub fn labels(&self) -> Vec<(NodeId, String)> {
        let mut seen: HashMap<String, usize> = HashMap::new();
        self.nodes
            .iter()
            .map(|node| {
                let base = node.kind.label();
                let n = seen.entry(base.clone()).or_insert(0);
                *n += 1;
                let label = if *n == 1 { base } else { format!("{base}#{n}") };
                (node.id, label)
            })
            .collect()
    }

    pub fn find_label(&self, label: &str) -> Option<NodeId> {
        self.labels().into_iter().find(|(_, l)| l == label).map(|(id, _)| id)
    }

    pub fn plan_instances(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::PlanInstance { .. }))
            .map(|n| n.id)
            .collect()
    }

    pub fn equalities(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Equality { .. }))
            .map(|n| n.id)
            .collect()
    }

    pub fn equalities_for(&self, entity: &str) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.kind, NodeKind::Equality { entity: e, .. } if e == entity))
            .map(|n| n.id)
            .collect()
    }

    pub fn mention_node(&self, entity: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| matches!(&n.kind, NodeKind::Mention { entity: e } if e == entity))
            .map(|n| n.id)
    }

    /// Renders the network as a DOT digraph: nodes in id order with
    /// their display labels, evidence nodes with a doubled border.
    /// Output is byte-deterministic.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph g {\n");
        for (id, label) in self.labels() {
            let mut attrs = format!("label=\"{}\"", dot_escape(&label));
            if self.evidence.contains_key(&id) {
                attrs.push_str(", peripheries=2");
            }
            out.push_str(&format!("  n{} [{}];\n", id.index(), attrs));
        }
        for node in &self.nodes {
            for p in &node.parents {
                out.push_str(&format!("  n{} -> n{};\n", p.index(), node.id.index()));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Construction parameters. `equality_prior` is the prior that two
/// arbitrary denotations coincide; sweeping it moves the recognizer
/// between life-like and story-like readings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub equality_prior: f64,
    pub mention_enabled: bool,
    /// Base probability that an arbitrary entity gets mentioned.
    pub mention_base: f64,
    /// Multiplier on `mention_base` for entities filling a role in a
    /// hypothesized plan. Must satisfy `mention_lift * mention_base <= 1`.
    pub mention_lift: f64,
    /// Probability of a word appearing with no active sense.
    pub word_leak: f64,
    /// Cap on candidate fillers per slot term.
    pub max_equality_candidates: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            equality_prior: 1e-5,
            mention_enabled: false,
            mention_base: 0.01,
            mention_lift: 50.0,
            word_leak: 1e-7,
            max_equality_candidates: 16,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), BuildError> {
        let err = |msg: String| Err(BuildError::Config(msg));
        if !(0.0..=1.0).contains(&self.equality_prior) {
            return err(format!("equality_prior must lie in [0,1], got {}", self.equality_prior));
        }
        if !(self.mention_base > 0.0 && self.mention_base <= 1.0) {
            return err(format!("mention_base must lie in (0,1], got {}", self.mention_base));
        }
        if !(self.mention_lift > 0.0 && self.mention_lift.is_finite()) {
            return err(format!("mention_lift must be positive, got {}", self.mention_lift));
        }
        let lifted = self.mention_lift * self.mention_base;
        if lifted > 1.0 {
            return err(format!(
                "mention_lift * mention_base must not exceed 1, got {lifted}"
            ));
        }
        if !(self.word_leak > 0.0 && self.word_leak < 1.0) {
            return err(format!("word_leak must lie in (0,1), got {}", self.word_leak));
        }
        if self.max_equality_candidates == 0 {
            return err("max_equality_candidates must be positive".to_string());
        }
        Ok(())
    }

    pub fn validate_for(&self, lib: &PlanLibrary) -> Result<(), BuildError> {
        self.validate()?;
        let min_p = lib.min_p_word();
        if self.word_leak >= min_p {
            return Err(BuildError::Config(format!(
                "word_leak {} must stay below the smallest lexicon p ({min_p})",
                self.word_leak
            )));
        }
        Ok(())
    }
}

/// Synthesizes the conditional probability table for a node kind given
/// its parents, as a factor over `parents ++ [self_id]`.
pub fn synth_cpt(
    self_id: NodeId,
    kind: &NodeKind,
    parents: &[(NodeId, NodeKind)],
    lib: &PlanLibrary,
    cfg: &Config,
) -> Result<Factor, BuildError> {
    let parent_kinds: Vec<NodeKind> = parents.iter().map(|(_, k)| k.clone()).collect();
    let table = synth_table(kind, &parent_kinds, lib, cfg)?;
    let mut scope: Vec<NodeId> = parents.iter().map(|(id, _)| *id).collect();
    scope.push(self_id);
    Factor::new(scope, table).map_err(|e| BuildError::Network(e.to_string()))
}

// Builds the table over [parents..., self] with the row-major layout of
// `Factor`; `p_true` receives a bit accessor for the parent assignment.
fn rows(n_parents: usize, p_true: impl Fn(&dyn Fn(usize) -> bool) -> f64) -> Vec<f64> {
    let rows = 1usize << n_parents;
    let mut table = vec![0.0; rows << 1];
    for r in 0..rows {
        let bit = |i: usize| -> bool { (r >> (n_parents - 1 - i)) & 1 == 1 };
        let p = p_true(&bit);
        table[(r << 1) | 1] = p;
        table[r << 1] = 1.0 - p;
    }
    table
}

fn type_prior(lib: &PlanLibrary, name: &str) -> Result<f64, BuildError> {
    lib.type_def(name)
        .map(|t| t.prior)
        .ok_or_else(|| BuildError::MissingDefinition(format!("type `{name}`")))
}

fn synth_table(
    kind: &NodeKind,
    parent_kinds: &[NodeKind],
    lib: &PlanLibrary,
    cfg: &Config,
) -> Result<Vec<f64>, BuildError> {
    let n = parent_kinds.len();
    match kind {
        NodeKind::EntityType { type_name, .. } => {
            let prior = type_prior(lib, type_name)?;
            if n == 0 {
                return Ok(rows(0, |_| prior));
            }
            // Parents alternate (equality, paired slot-type).
            if n % 2 != 0 {
                return Err(BuildError::Network(
                    "entity-type parents must be (equality, slot-type) pairs".to_string(),
                ));
            }
            for pair in parent_kinds.chunks_exact(2) {
                if !matches!(pair[0], NodeKind::Equality { .. })
                    || !matches!(pair[1], NodeKind::SlotType { .. })
                {
                    return Err(BuildError::Network(
                        "entity-type parents must be (equality, slot-type) pairs".to_string(),
                    ));
                }
            }
            let pairs = n / 2;
            Ok(rows(n, |bit| {
                let mut true_eqs = 0usize;
                let mut any_paired_slot = false;
                for i in 0..pairs {
                    if bit(2 * i) {
                        true_eqs += 1;
                        if bit(2 * i + 1) {
                            any_paired_slot = true;
                        }
                    }
                }
                match true_eqs {
                    // No identity holds: the type holds at its base rate.
                    0 => prior,
                    // The slot filler is this entity, so the slot's type
                    // verdict transfers exactly.
                    _ => {
                        if any_paired_slot {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            }))
        }
        NodeKind::PlanInstance { schema, .. } => {
            let p = lib
                .schema(schema)
                .map(|s| s.p_given_parent)
                .ok_or_else(|| BuildError::MissingDefinition(format!("schema `{schema}`")))?;
            if n != 1 {
                return Err(BuildError::Network("plan instance takes exactly one parent".to_string()));
            }
            // A specialized action entails the general one: no leak.
            Ok(rows(1, |bit| if bit(0) { p } else { 0.0 }))
        }
        NodeKind::SlotType { type_name, .. } => {
            let prior = type_prior(lib, type_name)?;
            if n != 1 {
                return Err(BuildError::Network("slot-type takes exactly one parent".to_string()));
            }
            Ok(rows(1, |bit| if bit(0) { 1.0 } else { prior }))
        }
        NodeKind::Equality { .. } => {
            if n != 0 {
                return Err(BuildError::Network("equality nodes are roots".to_string()));
            }
            Ok(rows(0, |_| cfg.equality_prior))
        }
        NodeKind::Word { word, .. } => {
            let mut sense_ps = Vec::new();
            let mut mention_pos = None;
            for (i, pk) in parent_kinds.iter().enumerate() {
                match pk {
                    NodeKind::EntityType { type_name, .. } => {
                        let p = lib
                            .senses_of(word)
                            .into_iter()
                            .find(|e| &e.sense == type_name)
                            .map(|e| e.p_word)
                            .ok_or_else(|| {
                                BuildError::MissingDefinition(format!(
                                    "lexicon entry for `{word}` with sense `{type_name}`"
                                ))
                            })?;
                        sense_ps.push((i, p));
                    }
                    NodeKind::Mention { .. } => {
                        if mention_pos.is_some() {
                            return Err(BuildError::Network("word has two mention parents".to_string()));
                        }
                        mention_pos = Some(i);
                    }
                    _ => {
                        return Err(BuildError::Network(
                            "word parents must be entity types plus at most one mention".to_string(),
                        ))
                    }
                }
            }
            if sense_ps.is_empty() {
                return Err(BuildError::Network("word needs at least one sense parent".to_string()));
            }
            let leak = cfg.word_leak;
            Ok(rows(n, |bit| {
                if let Some(m) = mention_pos {
                    if !bit(m) {
                        return leak;
                    }
                }
                // Max-combination over active senses.
                sense_ps
                    .iter()
                    .filter(|(i, _)| bit(*i))
                    .map(|(_, p)| *p)
                    .fold(None::<f64>, |acc, p| Some(acc.map_or(p, |a| a.max(p))))
                    .unwrap_or(leak)
            }))
        }
        NodeKind::Mention { .. } => {
            for pk in parent_kinds {
                if !matches!(pk, NodeKind::Equality { .. }) {
                    return Err(BuildError::Network("mention parents must be equalities".to_string()));
                }
            }
            let base = cfg.mention_base;
            let lifted = cfg.mention_lift * cfg.mention_base;
            Ok(rows(n, |bit| {
                if (0..n).any(bit) {
                    lifted
                } else {
                    base
                }
            }))
        }
        NodeKind::SlotExclusivity { .. } => {
            for pk in parent_kinds {
                if !matches!(pk, NodeKind::Equality { .. }) {
                    return Err(BuildError::Network("exclusivity parents must be equalities".to_string()));
                }
            }
            Ok(rows(n, |bit| {
                let true_count = (0..n).filter(|i| bit(*i)).count();
                if true_count <= 1 {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        NodeKind::Free { .. } => Err(BuildError::MissingDefinition(
            "free-form nodes carry hand-built tables".to_string(),
        )),
    }
}

#[derive(Clone)]
struct TermState {
    term: SlotTerm,
    restriction: String,
    node: NodeId,
    /// Candidate fillers, sorted by entity name.
    candidates: Vec<(String, NodeId)>,
    excl: Option<NodeId>,
}

#[derive(Clone, Default)]
struct State {
    nodes: Vec<Node>,
    evidence: BTreeMap<NodeId, bool>,
    tokens: Vec<(String, String)>,
    entity_word: HashMap<String, String>,
    entity_types: HashMap<(String, String), NodeId>,
    plans: HashMap<(String, String), NodeId>,
    terms: Vec<TermState>,
    equalities: HashMap<(SlotTerm, String), NodeId>,
    mentions: HashMap<String, NodeId>,
    /// Entities carrying each type hypothesis, in assertion order.
    entities_by_type: HashMap<String, Vec<String>>,
}

/// Incremental construction state. Single-writer; the finalized
/// [`BayesNet`] is immutable and freely shareable.
pub struct Session<'a> {
    lib: &'a PlanLibrary,
    cfg: Config,
    state: State,
}

impl<'a> Session<'a> {
    pub fn new(lib: &'a PlanLibrary, cfg: Config) -> Result<Self, BuildError> {
        cfg.validate_for(lib)?;
        Ok(Session { lib, cfg, state: State::default() })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn library(&self) -> &PlanLibrary {
        self.lib
    }

    pub fn node_count(&self) -> usize {
        self.state.nodes.len()
    }

    pub fn tokens(&self) -> &[(String, String)] {
        &self.state.tokens
    }

    /// Asserts one (word, entity) observation and runs the construction
    /// rules to quiescence. Returns the ids of the nodes created, in
    /// creation order. Re-asserting an identical token is a no-op; the
    /// same entity with a different word is an error. On error the
    /// session is left unchanged.
    pub fn assert_token(&mut self, word: &str, entity: &str) -> Result<Vec<NodeId>, BuildError> {
        let checkpoint = self.state.clone();
        match self.try_assert(word, entity) {
            Ok(created) => Ok(created),
            Err(e) => {
                self.state = checkpoint;
                Err(e)
            }
        }
    }

    pub fn assert_story(&mut self, story: &Story) -> Result<(), BuildError> {
        for token in &story.tokens {
            self.assert_token(&token.word, &token.entity)?;
        }
        Ok(())
    }

    /// The network constructed so far.
    pub fn network(&self) -> BayesNet {
        BayesNet::from_parts(self.state.nodes.clone(), self.state.evidence.clone())
            .expect("construction rules maintain network validity")
    }

    fn try_assert(&mut self, word: &str, entity: &str) -> Result<Vec<NodeId>, BuildError> {
        if let Some(prev) = self.state.entity_word.get(entity) {
            if prev == word {
                return Ok(Vec::new());
            }
            return Err(BuildError::DuplicateEntity {
                entity: entity.to_string(),
                word: prev.clone(),
            });
        }
        let senses: Vec<LexEntry> = self.lib.senses_of(word).into_iter().cloned().collect();
        if senses.is_empty() {
            return Err(BuildError::UnknownWord(word.to_string()));
        }

        let mut created = Vec::new();
        let token_index = self.state.tokens.len();
        self.state.tokens.push((word.to_string(), entity.to_string()));
        self.state.entity_word.insert(entity.to_string(), word.to_string());

        // R1
        let mut sense_nodes = Vec::new();
        for lex in &senses {
            let et = self.create_node(
                NodeKind::EntityType { entity: entity.to_string(), type_name: lex.sense.clone() },
                Vec::new(),
                &mut created,
            )?;
            self.state
                .entity_types
                .insert((entity.to_string(), lex.sense.clone()), et);
            self.state
                .entities_by_type
                .entry(lex.sense.clone())
                .or_default()
                .push(entity.to_string());
            sense_nodes.push(et);
        }

        // R6 (node itself; its parents accrue as equalities appear)
        if self.cfg.mention_enabled {
            let m = self.create_node(
                NodeKind::Mention { entity: entity.to_string() },
                Vec::new(),
                &mut created,
            )?;
            self.state.mentions.insert(entity.to_string(), m);
        }

        // R2
        let mut word_parents = sense_nodes;
        if let Some(m) = self.state.mentions.get(entity) {
            word_parents.push(*m);
        }
        let w = self.create_node(
            NodeKind::Word {
                token: token_index,
                word: word.to_string(),
                entity: entity.to_string(),
            },
            word_parents,
            &mut created,
        )?;
        self.state.evidence.insert(w, true);

        // R3 (with symmetric R4 for each fresh slot term)
        for lex in &senses {
            let schemas: Vec<PlanSchema> = self
                .lib
                .triggers_for_type(&lex.sense)
                .map_err(|e| BuildError::MissingDefinition(e.to_string()))?
                .into_iter()
                .cloned()
                .collect();
            for schema in schemas {
                let plan_key = (entity.to_string(), schema.name.clone());
                if self.state.plans.contains_key(&plan_key) {
                    continue;
                }
                let et = self.state.entity_types[&(entity.to_string(), lex.sense.clone())];
                let plan = self.create_node(
                    NodeKind::PlanInstance { entity: entity.to_string(), schema: schema.name.clone() },
                    vec![et],
                    &mut created,
                )?;
                self.state.plans.insert(plan_key, plan);
                for slot in &schema.slots {
                    let term = SlotTerm {
                        plan_entity: entity.to_string(),
                        schema: schema.name.clone(),
                        slot: slot.name.clone(),
                    };
                    let slot_node = self.create_node(
                        NodeKind::SlotType { term: term.clone(), type_name: slot.restriction.clone() },
                        vec![plan],
                        &mut created,
                    )?;
                    let term_ix = self.state.terms.len();
                    self.state.terms.push(TermState {
                        term,
                        restriction: slot.restriction.clone(),
                        node: slot_node,
                        candidates: Vec::new(),
                        excl: None,
                    });
                    let candidates = self
                        .state
                        .entities_by_type
                        .get(&slot.restriction)
                        .cloned()
                        .unwrap_or_default();
                    for cand in candidates {
                        self.try_add_equality(term_ix, &cand, &mut created)?;
                    }
                }
            }
        }

        // R4: the new entity as a candidate filler for existing terms.
        for term_ix in 0..self.state.terms.len() {
            let restriction = self.state.terms[term_ix].restriction.clone();
            if senses.iter().any(|lex| lex.sense == restriction) {
                self.try_add_equality(term_ix, entity, &mut created)?;
            }
        }

        Ok(created)
    }

    fn create_node(
        &mut self,
        kind: NodeKind,
        parents: Vec<NodeId>,
        created: &mut Vec<NodeId>,
    ) -> Result<NodeId, BuildError> {
        let id = NodeId::new(self.state.nodes.len());
        let parent_kinds: Vec<(NodeId, NodeKind)> = parents
            .iter()
            .map(|p| (*p, self.state.nodes[p.index()].kind.clone()))
            .collect();
        let cpt = synth_cpt(id, &kind, &parent_kinds, self.lib, &self.cfg)?;
        self.state.nodes.push(Node::new(id, kind, parents, cpt));
        created.push(id);
        Ok(id)
    }

    fn rebuild_cpt(&mut self, id: NodeId) -> Result<(), BuildError> {
        let kind = self.state.nodes[id.index()].kind.clone();
        let parents: Vec<(NodeId, NodeKind)> = self.state.nodes[id.index()]
            .parents
            .iter()
            .map(|p| (*p, self.state.nodes[p.index()].kind.clone()))
            .collect();
        self.state.nodes[id.index()].cpt = synth_cpt(id, &kind, &parents, self.lib, &self.cfg)?;
        Ok(())
    }

    // Adds the (equality, slot-type) pair to an entity-type node's
    // parents, keeping pairs sorted by slot term so assertion order
    // cannot change the CPT layout.
    fn splice_entity_type(&mut self, et: NodeId, eq: NodeId, slot: NodeId) -> Result<(), BuildError> {
        let term_of = |id: NodeId, nodes: &[Node]| -> Result<SlotTerm, BuildError> {
            match &nodes[id.index()].kind {
                NodeKind::Equality { term, .. } => Ok(term.clone()),
                _ => Err(BuildError::Network(
                    "entity-type parents must alternate equality/slot-type".to_string(),
                )),
            }
        };
        let mut pairs: Vec<(SlotTerm, NodeId, NodeId)> = Vec::new();
        let existing = self.state.nodes[et.index()].parents.clone();
        for chunk in existing.chunks_exact(2) {
            pairs.push((term_of(chunk[0], &self.state.nodes)?, chunk[0], chunk[1]));
        }
        pairs.push((term_of(eq, &self.state.nodes)?, eq, slot));
        pairs.sort();
        let mut parents = Vec::with_capacity(pairs.len() * 2);
        for (_, e, s) in pairs {
            parents.push(e);
            parents.push(s);
        }
        self.state.nodes[et.index()].parents = parents;
        self.rebuild_cpt(et)
    }

    // True if `to` is reachable from `from` along parent->child edges.
    fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); self.state.nodes.len()];
        for node in &self.state.nodes {
            for p in &node.parents {
                children[p.index()].push(node.id);
            }
        }
        let mut stack = vec![from];
        let mut seen = vec![false; self.state.nodes.len()];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if std::mem::replace(&mut seen[n.index()], true) {
                continue;
            }
            stack.extend(children[n.index()].iter().copied());
        }
        false
    }

    fn try_add_equality(
        &mut self,
        term_ix: usize,
        cand: &str,
        created: &mut Vec<NodeId>,
    ) -> Result<(), BuildError> {
        let term = self.state.terms[term_ix].term.clone();
        let restriction = self.state.terms[term_ix].restriction.clone();
        let slot_node = self.state.terms[term_ix].node;
        let key = (term.clone(), cand.to_string());
        if self.state.equalities.contains_key(&key) {
            return Ok(());
        }
        let et = self.state.entity_types[&(cand.to_string(), restriction)];
        // Splicing would add edges eq->et and slot->et; skip the
        // hypothesis when the entity's type node already feeds the slot
        // (mutually recursive step slots), keeping the graph acyclic.
        if self.reaches(et, slot_node) {
            return Ok(());
        }
        if self.state.terms[term_ix].candidates.len() + 1 > self.cfg.max_equality_candidates {
            return Err(BuildError::TooManyEqualityCandidates {
                term: term.to_string(),
                max: self.cfg.max_equality_candidates,
            });
        }
        let eq = self.create_node(
            NodeKind::Equality { term: term.clone(), entity: cand.to_string() },
            Vec::new(),
            created,
        )?;
        self.state.equalities.insert(key, eq);
        self.splice_entity_type(et, eq, slot_node)?;

        let term_state = &mut self.state.terms[term_ix];
        term_state.candidates.push((cand.to_string(), eq));
        term_state.candidates.sort();
        let excl_parents: Vec<NodeId> = term_state.candidates.iter().map(|(_, id)| *id).collect();
        let existing_excl = term_state.excl;
        // R5
        if excl_parents.len() >= 2 {
            match existing_excl {
                Some(x) => {
                    self.state.nodes[x.index()].parents = excl_parents;
                    self.rebuild_cpt(x)?;
                }
                None => {
                    let x = self.create_node(
                        NodeKind::SlotExclusivity { term: term.clone() },
                        excl_parents,
                        created,
                    )?;
                    self.state.terms[term_ix].excl = Some(x);
                    self.state.evidence.insert(x, true);
                }
            }
        }
        // R6: the candidate's mention node gains the new equality parent.
        if let Some(&m) = self.state.mentions.get(cand) {
            let mut eq_parents: Vec<(SlotTerm, NodeId)> = self
                .state
                .nodes
                .iter()
                .filter_map(|n| match &n.kind {
                    NodeKind::Equality { term, entity } if entity == cand => {
                        Some((term.clone(), n.id))
                    }
                    _ => None,
                })
                .collect();
            eq_parents.sort();
            self.state.nodes[m.index()].parents = eq_parents.into_iter().map(|(_, id)| id).collect();
            self.rebuild_cpt(m)?;
        }
        Ok(())
    }
}

/// Builds the full network for a story in file order.
pub fn build_network(lib: &PlanLibrary, story: &Story, cfg: &Config) -> Result<BayesNet, BuildError> {
    let mut session = Session::new(lib, cfg.clone())?;
    session.assert_story(story)?;
    Ok(session.network())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{load_library, load_story};

    const HANG_LIB: &str = "(library
  (type kill :prior 1e-4)
  (type rope :prior 1e-5)
  (word \"kill\" :sense kill :p 0.9)
  (word \"rope\" :sense rope :p 0.9)
  (plan hang :specializes kill :p 1e-3
    (slot rope-of rope)))";

    fn hang_lib() -> PlanLibrary {
        load_library(HANG_LIB).unwrap()
    }

    fn life() -> Config {
        Config::default()
    }

    fn story_mode() -> Config {
        Config { mention_enabled: true, ..Config::default() }
    }

    #[test]
    fn new_session_is_empty() {
        let lib = hang_lib();
        let session = Session::new(&lib, life()).unwrap();
        assert_eq!(session.node_count(), 0);
    }

    #[test]
    fn config_with_excess_mention_lift_is_rejected() {
        let lib = hang_lib();
        let cfg = Config { mention_lift: 200.0, mention_base: 0.01, ..Config::default() };
        match Session::new(&lib, cfg) {
            Err(BuildError::Config(msg)) => assert!(msg.contains("mention_lift")),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_library_accepts_a_session() {
        let lib = load_library("(library)").unwrap();
        assert!(Session::new(&lib, life()).is_ok());
    }

    #[test]
    fn word_leak_must_stay_below_lexicon_probabilities() {
        let lib = load_library("(library (type rope :prior 0.5) (word \"rope\" :sense rope :p 1e-8))").unwrap();
        assert!(matches!(Session::new(&lib, life()), Err(BuildError::Config(_))));
    }

    #[test]
    fn asserting_kill_builds_the_plan_fragment() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        let created = session.assert_token("kill", "k1").unwrap();
        assert_eq!(created.len(), 4);
        let net = session.network();
        assert!(matches!(&net.node(created[0]).kind, NodeKind::EntityType { entity, type_name }
            if entity == "k1" && type_name == "kill"));
        assert!(matches!(&net.node(created[1]).kind, NodeKind::Word { word, .. } if word == "kill"));
        assert!(matches!(&net.node(created[2]).kind, NodeKind::PlanInstance { schema, .. } if schema == "hang"));
        assert!(matches!(&net.node(created[3]).kind, NodeKind::SlotType { type_name, .. } if type_name == "rope"));
    }

    #[test]
    fn asserting_rope_after_kill_splices_the_equality() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        session.assert_token("kill", "k1").unwrap();
        let created = session.assert_token("rope", "r2").unwrap();
        assert_eq!(created.len(), 3);
        let net = session.network();
        assert_eq!(net.len(), 7);
        assert_eq!(net.evidence().len(), 2);
        let rope_et = created[0];
        let eq = created[2];
        assert!(matches!(&net.node(eq).kind, NodeKind::Equality { entity, .. } if entity == "r2"));
        // The type node's parents are the (equality, slot-type) pair.
        let parents = &net.node(rope_et).parents;
        assert_eq!(parents.len(), 2);
        assert!(matches!(net.node(parents[0]).kind, NodeKind::Equality { .. }));
        assert!(matches!(net.node(parents[1]).kind, NodeKind::SlotType { .. }));
    }

    #[test]
    fn rope_alone_is_a_root_plus_word() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        let created = session.assert_token("rope", "r2").unwrap();
        assert_eq!(created.len(), 2);
        let net = session.network();
        assert!(net.node(created[0]).parents.is_empty());
    }

    #[test]
    fn mention_mode_adds_mention_nodes() {
        let lib = hang_lib();
        let story = load_story("(story (token \"kill\" k1) (token \"rope\" r2))", &lib).unwrap();
        let net = build_network(&lib, &story, &story_mode()).unwrap();
        assert_eq!(net.len(), 9);
        // Word nodes gain a mention parent.
        for node in net.nodes() {
            if let NodeKind::Word { .. } = node.kind {
                assert!(node
                    .parents
                    .iter()
                    .any(|p| matches!(net.node(*p).kind, NodeKind::Mention { .. })));
            }
        }
        // The rope's mention node is parented by the equality.
        let m = net.mention_node("r2").unwrap();
        assert_eq!(net.node(m).parents.len(), 1);
    }

    #[test]
    fn empty_story_builds_an_empty_network() {
        let lib = hang_lib();
        let story = load_story("(story)", &lib).unwrap();
        let net = build_network(&lib, &story, &life()).unwrap();
        assert!(net.is_empty());
        assert_eq!(net.to_dot(), "digraph g {\n}\n");
    }

    #[test]
    fn reasserting_a_token_is_idempotent() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        session.assert_token("kill", "k1").unwrap();
        session.assert_token("rope", "r2").unwrap();
        let n = session.node_count();
        assert!(session.assert_token("kill", "k1").unwrap().is_empty());
        assert!(session.assert_token("rope", "r2").unwrap().is_empty());
        assert_eq!(session.node_count(), n);
    }

    #[test]
    fn same_entity_with_a_new_word_is_rejected() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        session.assert_token("kill", "k1").unwrap();
        assert!(matches!(
            session.assert_token("rope", "k1"),
            Err(BuildError::DuplicateEntity { .. })
        ));
        // The failure left the session unchanged.
        assert_eq!(session.node_count(), 4);
    }

    #[test]
    fn unknown_word_is_rejected() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        assert!(matches!(
            session.assert_token("pistol", "p1"),
            Err(BuildError::UnknownWord(w)) if w == "pistol"
        ));
    }

    #[test]
    fn equality_candidates_are_capped_per_slot_term() {
        let lib = hang_lib();
        let cfg = Config { max_equality_candidates: 2, ..Config::default() };
        let mut session = Session::new(&lib, cfg).unwrap();
        session.assert_token("kill", "k1").unwrap();
        session.assert_token("rope", "r1").unwrap();
        session.assert_token("rope", "r2").unwrap();
        match session.assert_token("rope", "r3") {
            Err(BuildError::TooManyEqualityCandidates { term, max }) => {
                assert_eq!(term, "(rope-of k1)");
                assert_eq!(max, 2);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn two_rope_candidates_get_an_exclusivity_constraint() {
        let lib = hang_lib();
        let mut session = Session::new(&lib, life()).unwrap();
        session.assert_token("kill", "k1").unwrap();
        session.assert_token("rope", "r1").unwrap();
        session.assert_token("rope", "r2").unwrap();
        let net = session.network();
        let excl: Vec<_> = net
            .nodes()
            .filter(|n| matches!(n.kind, NodeKind::SlotExclusivity { .. }))
            .collect();
        assert_eq!(excl.len(), 1);
        assert_eq!(excl[0].parents.len(), 2);
        assert_eq!(net.evidence()[&excl[0].id], true);
    }

    #[test]
    fn entity_type_cpt_matches_the_equality_semantics() {
        let lib = hang_lib();
        let story = load_story("(story (token \"kill\" k1) (token \"rope\" r2))", &lib).unwrap();
        let net = build_network(&lib, &story, &life()).unwrap();
        let rope_et = net.find_label("(rope r2)").unwrap();
        let table = net.node(rope_et).cpt.table();
        // Rows over (equality, slot-type): p(true) entries.
        let p = |row: usize| table[(row << 1) | 1];
        assert_eq!(p(0b11), 1.0);
        assert_eq!(p(0b10), 0.0);
        assert_eq!(p(0b01), 1e-5);
        assert_eq!(p(0b00), 1e-5);
    }

    #[test]
    fn plan_instance_cpt_has_no_leak() {
        let lib = hang_lib();
        let story = load_story("(story (token \"kill\" k1))", &lib).unwrap();
        let net = build_network(&lib, &story, &life()).unwrap();
        let plan = net.find_label("(hang k1)").unwrap();
        let table = net.node(plan).cpt.table();
        assert_eq!(table[0b11], 1e-3);
        assert_eq!(table[0b01], 0.0);
    }

    #[test]
    fn mention_cpt_applies_the_lift() {
        let lib = hang_lib();
        let cfg = Config {
            mention_enabled: true,
            mention_base: 0.01,
            mention_lift: 50.0,
            ..Config::default()
        };
        let story = load_story("(story (token \"kill\" k1) (token \"rope\" r2))", &lib).unwrap();
        let net = build_network(&lib, &story, &cfg).unwrap();
        let m = net.mention_node("r2").unwrap();
        let table = net.node(m).cpt.table();
        assert_eq!(table[0b11], 0.5);
        assert_eq!(table[0b01], 0.01);
    }

    #[test]
    fn word_cpt_uses_max_over_active_senses() {
        let lib = load_library(
            "(library (type rope :prior 1e-5) (type snake :prior 1e-6)
  (word \"rope\" :sense rope :p 0.9) (word \"rope\" :sense snake :p 0.4))",
        )
        .unwrap();
        let story = load_story("(story (token \"rope\" r1))", &lib).unwrap();
        let net = build_network(&lib, &story, &Config::default()).unwrap();
        let word = net
            .nodes()
            .find(|n| matches!(n.kind, NodeKind::Word { .. }))
            .unwrap();
        assert_eq!(word.parents.len(), 2);
        let p = |row: usize| word.cpt.table()[(row << 1) | 1];
        assert_eq!(p(0b11), 0.9);
        assert_eq!(p(0b10), 0.9);
        assert_eq!(p(0b01), 0.4);
        assert_eq!(p(0b00), 1e-7);
    }

    #[test]
    fn dot_output_lists_nodes_and_edges_deterministically() {
        let lib = hang_lib();
        let story = load_story("(story (token \"kill\" k1) (token \"rope\" r2))", &lib).unwrap();
        let net = build_network(&lib, &story, &life()).unwrap();
        let dot = net.to_dot();
        for label in [
            "(kill k1)",
            "(hang k1)",
            "(rope (rope-of k1))",
            "(= (rope-of k1) r2)",
            "(rope r2)",
        ] {
            assert!(dot.contains(&dot_escape(label)), "missing {label} in:\n{dot}");
        }
        assert!(dot.contains("peripheries=2"));
        assert!(dot.contains("n0 -> n1;"));
        assert_eq!(dot, net.to_dot());
    }

    #[test]
    fn every_cpt_row_sums_to_one() {
        let lib = hang_lib();
        let story = load_story("(story (token \"kill\" k1) (token \"rope\" r2))", &lib).unwrap();
        for cfg in [life(), story_mode()] {
            let net = build_network(&lib, &story, &cfg).unwrap();
            for node in net.nodes() {
                for row in node.cpt.table().chunks_exact(2) {
                    assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn slot_term_labels_use_role_notation() {
        let term = SlotTerm {
            plan_entity: "k1".to_string(),
            schema: "hang".to_string(),
            slot: "rope-of".to_string(),
        };
        assert_eq!(term.to_string(), "(rope-of k1)");
        let kind = NodeKind::Equality { term, entity: "r2".to_string() };
        assert_eq!(kind.label(), "(= (rope-of k1) r2)");
    }
}
