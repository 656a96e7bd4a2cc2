//! Exact posterior computation over boolean networks: variable
//! elimination for production queries, full-joint enumeration as an
//! independent oracle for testing.
//!
//! All functions are pure over immutable inputs and deterministic,
//! including tie-breaking, so repeated runs are byte-for-byte stable.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::netbuild::{BayesNet, NodeId};

/// Hard cap for full-joint enumeration (2^25 assignments).
pub const MAX_ENUMERATION_NODES: usize = 25;

// Normalizers below this are treated as impossible evidence rather than
// silently dividing toward NaN.
const MIN_NORMALIZER: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error("evidence has zero probability")]
    InconsistentEvidence,
    #[error("network too large to enumerate: {nodes} nodes exceeds the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("node {0} appears in both the query and the evidence")]
    QueryIsEvidence(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid factor: {0}")]
    BadFactor(String),
    #[error("invalid elimination order: {0}")]
    BadOrder(String),
}

/// A nonnegative table over a set of boolean variables.
///
/// `table` has length `2^scope.len()` and is laid out row-major over
/// assignments: the first scope variable is the most significant bit,
/// the last varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    scope: Vec<NodeId>,
    table: Vec<f64>,
}

impl Factor {
    pub fn new(scope: Vec<NodeId>, table: Vec<f64>) -> Result<Self, InferError> {
        let mut seen = BTreeSet::new();
        for id in &scope {
            if !seen.insert(*id) {
                return Err(InferError::BadFactor(format!("duplicate variable {id} in scope")));
            }
        }
        if table.len() != 1usize << scope.len() {
            return Err(InferError::BadFactor(format!(
                "table length {} does not match scope size {}",
                table.len(),
                scope.len()
            )));
        }
        if table.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(InferError::BadFactor("entries must be finite and nonnegative".to_string()));
        }
        Ok(Factor { scope, table })
    }

    /// The empty-scope factor holding a single value.
    pub fn constant(value: f64) -> Self {
        Factor { scope: Vec::new(), table: vec![value] }
    }

    pub fn scope(&self) -> &[NodeId] {
        &self.scope
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    fn position(&self, var: NodeId) -> Option<usize> {
        self.scope.iter().position(|v| *v == var)
    }

    fn bit_shift(&self, position: usize) -> usize {
        self.scope.len() - 1 - position
    }

    /// Table entry for a full assignment of the scope.
    pub fn value(&self, assignment: impl Fn(NodeId) -> bool) -> f64 {
        let mut idx = 0usize;
        for (i, var) in self.scope.iter().enumerate() {
            if assignment(*var) {
                idx |= 1 << self.bit_shift(i);
            }
        }
        self.table[idx]
    }

    /// Pointwise product, joining on shared variables. The result scope
    /// is the sorted union of both scopes.
    pub fn product(&self, other: &Factor) -> Factor {
        let scope: Vec<NodeId> = self
            .scope
            .iter()
            .chain(other.scope.iter())
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n = scope.len();
        let lhs_shift = shifts_into(&scope, &self.scope);
        let rhs_shift = shifts_into(&scope, &other.scope);
        let mut table = vec![0.0; 1 << n];
        for (idx, slot) in table.iter_mut().enumerate() {
            let li = project(idx, &lhs_shift);
            let ri = project(idx, &rhs_shift);
            *slot = self.table[li] * other.table[ri];
        }
        Factor { scope, table }
    }

    /// Marginalizes one variable out of the scope.
    pub fn sum_out(&self, var: NodeId) -> Factor {
        let Some(pos) = self.position(var) else {
            return self.clone();
        };
        let n = self.scope.len();
        let keep: Vec<NodeId> = self.scope.iter().copied().filter(|v| *v != var).collect();
        let mut table = vec![0.0; 1 << keep.len()];
        let var_shift = n - 1 - pos;
        for (idx, value) in self.table.iter().enumerate() {
            let out = drop_bit(idx, var_shift);
            table[out] += value;
        }
        Factor { scope: keep, table }
    }

    /// Slices the table at `var = value`, removing it from the scope.
    pub fn reduce(&self, var: NodeId, value: bool) -> Factor {
        let Some(pos) = self.position(var) else {
            return self.clone();
        };
        let n = self.scope.len();
        let keep: Vec<NodeId> = self.scope.iter().copied().filter(|v| *v != var).collect();
        let mut table = vec![0.0; 1 << keep.len()];
        let var_shift = n - 1 - pos;
        for (idx, entry) in self.table.iter().enumerate() {
            if ((idx >> var_shift) & 1 == 1) == value {
                table[drop_bit(idx, var_shift)] = *entry;
            }
        }
        Factor { scope: keep, table }
    }
}

// For each variable of `inner`, its bit shift within an index over `outer`.
fn shifts_into(outer: &[NodeId], inner: &[NodeId]) -> Vec<usize> {
    inner
        .iter()
        .map(|v| {
            let pos = outer.iter().position(|o| o == v).expect("scope containment");
            outer.len() - 1 - pos
        })
        .collect()
}

fn project(outer_idx: usize, shifts: &[usize]) -> usize {
    let mut idx = 0usize;
    let n = shifts.len();
    for (i, shift) in shifts.iter().enumerate() {
        if (outer_idx >> shift) & 1 == 1 {
            idx |= 1 << (n - 1 - i);
        }
    }
    idx
}

// Removes one bit position from an index, closing the gap.
fn drop_bit(idx: usize, shift: usize) -> usize {
    let high = idx >> (shift + 1);
    let low = idx & ((1 << shift) - 1);
    (high << shift) | low
}

/// A permutation of exactly the nodes that are neither query nor
/// evidence, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EliminationOrder(Vec<NodeId>);

impl EliminationOrder {
    pub fn new(
        net: &BayesNet,
        query: &[NodeId],
        evidence: &[NodeId],
        order: Vec<NodeId>,
    ) -> Result<Self, InferError> {
        let expected = eliminable(net, query, evidence)?;
        let got: BTreeSet<NodeId> = order.iter().copied().collect();
        if got.len() != order.len() || got != expected {
            return Err(InferError::BadOrder(
                "order must be a permutation of the non-query, non-evidence nodes".to_string(),
            ));
        }
        Ok(EliminationOrder(order))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}

fn check_ids(net: &BayesNet, ids: &[NodeId]) -> Result<(), InferError> {
    for id in ids {
        if id.index() >= net.len() {
            return Err(InferError::UnknownNode(*id));
        }
    }
    Ok(())
}

fn eliminable(net: &BayesNet, query: &[NodeId], evidence: &[NodeId]) -> Result<BTreeSet<NodeId>, InferError> {
    check_ids(net, query)?;
    check_ids(net, evidence)?;
    let ev: BTreeSet<NodeId> = evidence.iter().copied().collect();
    for q in query {
        if ev.contains(q) {
            return Err(InferError::QueryIsEvidence(*q));
        }
    }
    let keep: BTreeSet<NodeId> = query.iter().chain(evidence.iter()).copied().collect();
    Ok(net.node_ids().filter(|id| !keep.contains(id)).collect())
}

/// Greedy min-degree order over the moralized graph, ties broken by
/// smallest node id.
pub fn elimination_order(
    net: &BayesNet,
    query: &[NodeId],
    evidence: &[NodeId],
) -> Result<EliminationOrder, InferError> {
    let to_eliminate = eliminable(net, query, evidence)?;
    let ev: BTreeSet<NodeId> = evidence.iter().copied().collect();

    // Moral graph over non-evidence nodes: each CPT family (node plus
    // parents), restricted to non-evidence members, forms a clique.
    let mut neighbors: BTreeMap<NodeId, BTreeSet<NodeId>> = net
        .node_ids()
        .filter(|id| !ev.contains(id))
        .map(|id| (id, BTreeSet::new()))
        .collect();
    for node in net.nodes() {
        let family: Vec<NodeId> = node
            .parents
            .iter()
            .copied()
            .chain(std::iter::once(node.id))
            .filter(|id| !ev.contains(id))
            .collect();
        for i in 0..family.len() {
            for j in (i + 1)..family.len() {
                neighbors.get_mut(&family[i]).unwrap().insert(family[j]);
                neighbors.get_mut(&family[j]).unwrap().insert(family[i]);
            }
        }
    }

    let mut remaining = to_eliminate.clone();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        // BTreeSet iteration is ascending by id, so `<` keeps the
        // smallest id among equal degrees.
        let pick = remaining
            .iter()
            .copied()
            .min_by_key(|id| (neighbors[id].len(), *id))
            .expect("nonempty");
        order.push(pick);
        remaining.remove(&pick);
        let nbrs: Vec<NodeId> = neighbors[&pick].iter().copied().collect();
        for n in &nbrs {
            neighbors.get_mut(n).unwrap().remove(&pick);
        }
        for i in 0..nbrs.len() {
            for j in (i + 1)..nbrs.len() {
                neighbors.get_mut(&nbrs[i]).unwrap().insert(nbrs[j]);
                neighbors.get_mut(&nbrs[j]).unwrap().insert(nbrs[i]);
            }
        }
        neighbors.remove(&pick);
    }
    Ok(EliminationOrder(order))
}

fn reduced_factors(net: &BayesNet, evidence: &BTreeMap<NodeId, bool>) -> Vec<Factor> {
    net.nodes()
        .map(|node| {
            let mut f = node.cpt.clone();
            for (id, value) in evidence {
                if f.position(*id).is_some() {
                    f = f.reduce(*id, *value);
                }
            }
            f
        })
        .collect()
}

/// P(query = true | evidence) by variable elimination, exact up to
/// floating point.
pub fn posterior(net: &BayesNet, evidence: &BTreeMap<NodeId, bool>, query: NodeId) -> Result<f64, InferError> {
    check_ids(net, &[query])?;
    if let Some(v) = evidence.get(&query) {
        return Ok(if *v { 1.0 } else { 0.0 });
    }
    let ev_ids: Vec<NodeId> = evidence.keys().copied().collect();
    let order = elimination_order(net, &[query], &ev_ids)?;
    posterior_with_order(net, evidence, query, &order)
}

/// Variable elimination under an explicit order (used to verify that
/// the order never changes the result).
pub fn posterior_with_order(
    net: &BayesNet,
    evidence: &BTreeMap<NodeId, bool>,
    query: NodeId,
    order: &EliminationOrder,
) -> Result<f64, InferError> {
    check_ids(net, &[query])?;
    if let Some(v) = evidence.get(&query) {
        return Ok(if *v { 1.0 } else { 0.0 });
    }
    let mut factors = reduced_factors(net, evidence);
    for var in order.ids() {
        let (touching, rest): (Vec<Factor>, Vec<Factor>) =
            factors.into_iter().partition(|f| f.position(*var).is_some());
        factors = rest;
        if touching.is_empty() {
            continue;
        }
        let mut prod = touching[0].clone();
        for f in &touching[1..] {
            prod = prod.product(f);
        }
        factors.push(prod.sum_out(*var));
    }
    let mut joint = Factor::constant(1.0);
    for f in &factors {
        joint = joint.product(f);
    }
    debug_assert!(joint.scope().len() <= 1);
    let p_true = joint.value(|_| true);
    let p_false = joint.value(|_| false);
    let z = p_true + p_false;
    if !(z > MIN_NORMALIZER) {
        return Err(InferError::InconsistentEvidence);
    }
    Ok(p_true / z)
}

/// Batched posteriors; equivalent to one `posterior` call per query.
pub fn marginals(
    net: &BayesNet,
    evidence: &BTreeMap<NodeId, bool>,
    query: &[NodeId],
) -> Result<BTreeMap<NodeId, f64>, InferError> {
    let mut out = BTreeMap::new();
    for q in query {
        out.insert(*q, posterior(net, evidence, *q)?);
    }
    Ok(out)
}

struct JointWalker {
    // Per node: (bit shifts of its parents within the assignment mask,
    // its own shift, its CPT table).
    families: Vec<(Vec<usize>, usize, Vec<f64>)>,
    n: usize,
}

impl JointWalker {
    fn new(net: &BayesNet) -> Self {
        let n = net.len();
        let families = net
            .nodes()
            .map(|node| {
                let parent_shifts: Vec<usize> =
                    node.parents.iter().map(|p| n - 1 - p.index()).collect();
                (parent_shifts, n - 1 - node.id.index(), node.cpt.table().to_vec())
            })
            .collect();
        JointWalker { families, n }
    }

    fn joint(&self, mask: usize) -> f64 {
        let mut p = 1.0;
        for (parent_shifts, self_shift, table) in &self.families {
            let mut idx = 0usize;
            for shift in parent_shifts {
                idx = (idx << 1) | ((mask >> shift) & 1);
            }
            idx = (idx << 1) | ((mask >> self_shift) & 1);
            p *= table[idx];
            if p == 0.0 {
                return 0.0;
            }
        }
        p
    }
}

/// Ground-truth posteriors for several queries in one sweep of the
/// full joint. Summation order is fixed, so results are bit-for-bit
/// deterministic.
pub fn enumerate_marginals(
    net: &BayesNet,
    evidence: &BTreeMap<NodeId, bool>,
    query: &[NodeId],
) -> Result<BTreeMap<NodeId, f64>, InferError> {
    let n = net.len();
    if n > MAX_ENUMERATION_NODES {
        return Err(InferError::TooLarge { nodes: n, cap: MAX_ENUMERATION_NODES });
    }
    check_ids(net, query)?;
    let ev_ids: Vec<NodeId> = evidence.keys().copied().collect();
    check_ids(net, &ev_ids)?;

    let mut ev_mask = 0usize;
    let mut ev_bits = 0usize;
    for (id, value) in evidence {
        let shift = n - 1 - id.index();
        ev_mask |= 1 << shift;
        if *value {
            ev_bits |= 1 << shift;
        }
    }

    let walker = JointWalker::new(net);
    let mut z = 0.0;
    let mut numerators = vec![0.0; query.len()];
    for mask in 0..(1usize << n) {
        if mask & ev_mask != ev_bits {
            continue;
        }
        let p = walker.joint(mask);
        if p == 0.0 {
            continue;
        }
        z += p;
        for (qi, q) in query.iter().enumerate() {
            if (mask >> (n - 1 - q.index())) & 1 == 1 {
                numerators[qi] += p;
            }
        }
    }
    if !(z > MIN_NORMALIZER) {
        return Err(InferError::InconsistentEvidence);
    }
    Ok(query
        .iter()
        .zip(numerators)
        .map(|(q, num)| (*q, num / z))
        .collect())
}

/// Ground-truth posterior by summing the full joint distribution.
pub fn enumerate_posterior(
    net: &BayesNet,
    evidence: &BTreeMap<NodeId, bool>,
    query: NodeId,
) -> Result<f64, InferError> {
    Ok(enumerate_marginals(net, evidence, &[query])?[&query])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{BayesNet, Node, NodeKind};

    fn id(i: usize) -> NodeId {
        NodeId::new(i)
    }

    fn root(i: usize, p: f64) -> Node {
        Node::new(
            id(i),
            NodeKind::Free { label: format!("v{i}") },
            vec![],
            Factor::new(vec![id(i)], vec![1.0 - p, p]).unwrap(),
        )
    }

    fn child(i: usize, parent: usize, p_given_true: f64, p_given_false: f64) -> Node {
        Node::new(
            id(i),
            NodeKind::Free { label: format!("v{i}") },
            vec![id(parent)],
            Factor::new(
                vec![id(parent), id(i)],
                vec![1.0 - p_given_false, p_given_false, 1.0 - p_given_true, p_given_true],
            )
            .unwrap(),
        )
    }

    fn chain_net() -> BayesNet {
        // A -> B -> C
        BayesNet::from_parts(
            vec![root(0, 0.3), child(1, 0, 0.8, 0.1), child(2, 1, 0.6, 0.2)],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn factor_product_joins_on_shared_variables() {
        let f = Factor::new(vec![id(0), id(1)], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = Factor::new(vec![id(1)], vec![10.0, 100.0]).unwrap();
        let p = f.product(&g);
        assert_eq!(p.scope(), &[id(0), id(1)]);
        assert_eq!(p.table(), &[1.0, 20.0, 3.0, 40.0]);
    }

    #[test]
    fn factor_sum_out_and_reduce() {
        let f = Factor::new(vec![id(0), id(1)], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s = f.sum_out(id(0));
        assert_eq!(s.scope(), &[id(1)]);
        assert!((s.table()[0] - 0.4).abs() < 1e-15);
        assert!((s.table()[1] - 0.6).abs() < 1e-15);
        let r = f.reduce(id(1), true);
        assert_eq!(r.scope(), &[id(0)]);
        assert_eq!(r.table(), &[0.2, 0.4]);
    }

    #[test]
    fn factor_rejects_bad_shapes() {
        assert!(Factor::new(vec![id(0), id(0)], vec![0.0; 4]).is_err());
        assert!(Factor::new(vec![id(0)], vec![0.0; 3]).is_err());
        assert!(Factor::new(vec![id(0)], vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn min_degree_order_on_a_chain() {
        let net = chain_net();
        let order = elimination_order(&net, &[id(2)], &[]).unwrap();
        assert_eq!(order.ids(), &[id(0), id(1)]);
    }

    #[test]
    fn single_node_order_is_empty() {
        let net = BayesNet::from_parts(vec![root(0, 0.3)], BTreeMap::new()).unwrap();
        let order = elimination_order(&net, &[id(0)], &[]).unwrap();
        assert!(order.ids().is_empty());
    }

    #[test]
    fn query_in_evidence_is_an_order_error() {
        let net = chain_net();
        assert!(matches!(
            elimination_order(&net, &[id(1)], &[id(1)]),
            Err(InferError::QueryIsEvidence(_))
        ));
    }

    #[test]
    fn isolated_root_posterior_is_its_prior() {
        let net = BayesNet::from_parts(vec![root(0, 0.3)], BTreeMap::new()).unwrap();
        let p = posterior(&net, &BTreeMap::new(), id(0)).unwrap();
        assert!((p - 0.3).abs() < 1e-15);
        let e = enumerate_posterior(&net, &BTreeMap::new(), id(0)).unwrap();
        assert!((e - 0.3).abs() < 1e-15);
    }

    #[test]
    fn independent_roots_do_not_influence_each_other() {
        let net = BayesNet::from_parts(vec![root(0, 0.3), root(1, 0.7)], BTreeMap::new()).unwrap();
        let ev = BTreeMap::from([(id(1), true)]);
        assert!((enumerate_posterior(&net, &ev, id(0)).unwrap() - 0.3).abs() < 1e-15);
        assert!((posterior(&net, &ev, id(0)).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn evidence_node_posterior_is_its_observed_value() {
        let net = chain_net();
        let ev = BTreeMap::from([(id(1), false)]);
        assert_eq!(posterior(&net, &ev, id(1)).unwrap(), 0.0);
    }

    #[test]
    fn chain_posterior_matches_hand_computation() {
        let net = chain_net();
        // P(C) = P(B)*0.6 + (1-P(B))*0.2, with P(B) = 0.3*0.8 + 0.7*0.1.
        let p_b = 0.3 * 0.8 + 0.7 * 0.1;
        let expected = p_b * 0.6 + (1.0 - p_b) * 0.2;
        let p = posterior(&net, &BTreeMap::new(), id(2)).unwrap();
        assert!((p - expected).abs() < 1e-12);
        let e = enumerate_posterior(&net, &BTreeMap::new(), id(2)).unwrap();
        assert!((p - e).abs() < 1e-12);
    }

    #[test]
    fn impossible_evidence_is_reported_not_nan() {
        // Child is deterministically false when parent is false.
        let net = BayesNet::from_parts(
            vec![root(0, 0.5), child(1, 0, 1.0, 0.0)],
            BTreeMap::new(),
        )
        .unwrap();
        let ev = BTreeMap::from([(id(0), false), (id(1), true)]);
        assert_eq!(posterior(&net, &ev, id(0)), Err(InferError::InconsistentEvidence));
        assert_eq!(
            enumerate_posterior(&net, &ev, id(0)),
            Err(InferError::InconsistentEvidence)
        );
    }

    #[test]
    fn marginals_match_single_queries() {
        let net = chain_net();
        let ev = BTreeMap::from([(id(2), true)]);
        let m = marginals(&net, &ev, &[id(0), id(1)]).unwrap();
        for q in [id(0), id(1)] {
            assert_eq!(m[&q], posterior(&net, &ev, q).unwrap());
        }
        assert!(marginals(&net, &ev, &[]).unwrap().is_empty());
    }

    #[test]
    fn enumeration_rejects_oversize_networks() {
        let nodes: Vec<Node> = (0..26).map(|i| root(i, 0.5)).collect();
        let net = BayesNet::from_parts(nodes, BTreeMap::new()).unwrap();
        assert!(matches!(
            enumerate_posterior(&net, &BTreeMap::new(), id(0)),
            Err(InferError::TooLarge { nodes: 26, .. })
        ));
    }

    #[test]
    fn posterior_complement_sums_to_one() {
        let net = chain_net();
        let ev = BTreeMap::from([(id(0), true)]);
        let p = posterior(&net, &ev, id(2)).unwrap();
        // Flip the query by reducing against rows instead: enumerate both.
        let e = enumerate_posterior(&net, &ev, id(2)).unwrap();
        assert!((p - e).abs() < 1e-12);
        assert!(p >= 0.0 && p <= 1.0);
    }
}
