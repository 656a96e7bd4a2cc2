//! Quantitative behavior of the recognizer as first-class computations:
//! the closed-form lift of the three-node equality fragment, sweeps of
//! the equality prior, mode presets, and the mention lift.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::infer::{self, Factor, InferError};
use crate::library::{PlanLibrary, Story};
use crate::netbuild::{build_network, BayesNet, BuildError, Config, Node, NodeId, NodeKind};

/// Default equality prior: equal to the rope base rate, which is the
/// point where a single matching observation doubles the slot-filler
/// posterior.
pub const LIFE_EQUALITY_PRIOR: f64 = 1e-5;
/// Word leak shared by all presets.
pub const DEFAULT_WORD_LEAK: f64 = 1e-7;
/// Story preset: base mention probability. Calibrated (together with
/// the lift) so narrative readings of suggestive stories cross 0.2.
pub const STORY_MENTION_BASE: f64 = 1e-3;
/// Story preset: mention lift for entities filling a hypothesized role.
pub const STORY_MENTION_LIFT: f64 = 500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("fragment ratio denominator is zero")]
    ZeroDenominator,
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("unknown preset `{0}` (expected `life` or `story`)")]
    UnknownPreset(String),
    #[error("grid must be non-empty, lie within [0,1] and be strictly increasing")]
    BadGrid,
    #[error("query `{query}` matches no plan node; available: {}", available.join(", "))]
    UnknownQuery { query: String, available: Vec<String> },
    #[error("entity `{0}` has no equality hypotheses")]
    NoEqualities(String),
    #[error("mentions are disabled in this config")]
    MentionsDisabled,
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Life,
    Story,
    Knob,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Life => write!(f, "life"),
            Mode::Story => write!(f, "story"),
            Mode::Knob => write!(f, "knob"),
        }
    }
}

impl FromStr for Mode {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "life" => Ok(Mode::Life),
            "story" => Ok(Mode::Story),
            "knob" => Ok(Mode::Knob),
            other => Err(AnalysisError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModePreset {
    pub mode: Mode,
    pub config: Config,
}

/// Shipped presets. `life` reads observations with no relevance
/// assumption; `story` assumes an author mentioning role fillers.
pub fn preset(name: &str) -> Result<ModePreset, AnalysisError> {
    match name {
        "life" => Ok(ModePreset {
            mode: Mode::Life,
            config: Config {
                equality_prior: LIFE_EQUALITY_PRIOR,
                mention_enabled: false,
                word_leak: DEFAULT_WORD_LEAK,
                ..Config::default()
            },
        }),
        "story" => Ok(ModePreset {
            mode: Mode::Story,
            config: Config {
                equality_prior: LIFE_EQUALITY_PRIOR,
                mention_enabled: true,
                mention_base: STORY_MENTION_BASE,
                mention_lift: STORY_MENTION_LIFT,
                word_leak: DEFAULT_WORD_LEAK,
                ..Config::default()
            },
        }),
        other => Err(AnalysisError::UnknownPreset(other.to_string())),
    }
}

/// Life-like reading with a caller-chosen equality prior.
pub fn knob_preset(equality_prior: f64) -> ModePreset {
    ModePreset {
        mode: Mode::Knob,
        config: Config {
            equality_prior,
            mention_enabled: false,
            word_leak: DEFAULT_WORD_LEAK,
            ..Config::default()
        },
    }
}

/// Closed form of the three-node equality fragment (equality `e` and
/// slot type `k` as independent roots, observed type `r` as their
/// child): the factor by which observing `r` lifts `k`,
///
/// ```text
/// P(k | r) / P(k) = [P_e + (1-P_e) p_r] / [P_e P_k + (1-P_e) p_r]
/// ```
pub fn fragment_ratio(p_e: f64, p_r: f64, p_k: f64) -> Result<f64, AnalysisError> {
    for (name, v) in [("P_e", p_e), ("p_r", p_r), ("P_k", p_k)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(AnalysisError::OutOfRange(format!("{name} must lie in [0,1], got {v}")));
        }
    }
    let numerator = p_e + (1.0 - p_e) * p_r;
    let denominator = p_e * p_k + (1.0 - p_e) * p_r;
    if denominator <= 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok(numerator / denominator)
}

/// The literal three-node fragment as a network, for checking the
/// closed form against exact inference.
pub fn fragment_net(p_e: f64, p_r: f64, p_k: f64) -> Result<BayesNet, BuildError> {
    let e = NodeId::new(0);
    let k = NodeId::new(1);
    let r = NodeId::new(2);
    let root = |id: NodeId, label: &str, p: f64| {
        Node::new(
            id,
            NodeKind::Free { label: label.to_string() },
            vec![],
            Factor::new(vec![id], vec![1.0 - p, p]).expect("valid root factor"),
        )
    };
    // Rows over (e, k): both -> certain, equality without the type ->
    // impossible, no equality -> base rate.
    let r_rows = [(0b11, 1.0), (0b10, 0.0), (0b01, p_r), (0b00, p_r)];
    let mut table = vec![0.0; 8];
    for (row, p) in r_rows {
        table[(row << 1) | 1] = p;
        table[row << 1] = 1.0 - p;
    }
    let r_node = Node::new(
        r,
        NodeKind::Free { label: "r".to_string() },
        vec![e, k],
        Factor::new(vec![e, k, r], table).expect("valid child factor"),
    );
    BayesNet::from_parts(vec![root(e, "e", p_e), root(k, "k", p_k), r_node], BTreeMap::new())
}

/// P(k | r=true) / P(k) on the literal fragment, by exact inference.
pub fn fragment_inference_ratio(p_e: f64, p_r: f64, p_k: f64) -> Result<f64, AnalysisError> {
    let net = fragment_net(p_e, p_r, p_k)?;
    let k = NodeId::new(1);
    let r = NodeId::new(2);
    let prior = infer::posterior(&net, &BTreeMap::new(), k)?;
    let posterior = infer::posterior(&net, &BTreeMap::from([(r, true)]), k)?;
    if prior <= 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok(posterior / prior)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub equality_prior: f64,
    pub query: String,
    pub posterior: f64,
}

fn plan_labels(net: &BayesNet) -> Vec<String> {
    let plans = net.plan_instances();
    net.labels()
        .into_iter()
        .filter(|(id, _)| plans.contains(id))
        .map(|(_, label)| label)
        .collect()
}

/// Recognizes the story once per grid value of the equality prior and
/// reports the posterior of the queried plan node. Grid points are
/// evaluated concurrently; rows come back in grid order.
pub fn sweep_equality_prior(
    lib: &PlanLibrary,
    story: &Story,
    base: &Config,
    grid: &[f64],
    query: &str,
) -> Result<Vec<SweepRow>, AnalysisError> {
    if grid.is_empty()
        || grid.iter().any(|e| !(0.0..=1.0).contains(e))
        || grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(AnalysisError::BadGrid);
    }
    // Resolve the query once against the base network so an unknown
    // label reports the available plans.
    let base_net = build_network(lib, story, base)?;
    let query_id = match base_net.find_label(query) {
        Some(id) if base_net.plan_instances().contains(&id) => id,
        _ => {
            return Err(AnalysisError::UnknownQuery {
                query: query.to_string(),
                available: plan_labels(&base_net),
            })
        }
    };
    grid.par_iter()
        .map(|&e| {
            let cfg = Config { equality_prior: e, ..base.clone() };
            let net = build_network(lib, story, &cfg)?;
            // Construction is deterministic, so the node id carries over.
            let p = infer::posterior(&net, net.evidence(), query_id)?;
            Ok(SweepRow { equality_prior: e, query: query.to_string(), posterior: p })
        })
        .collect()
}

/// Posterior ratio of the isolated equality -> mention fragment:
/// P(equality | mention) / P(equality). Approaches the configured lift
/// as the equality prior vanishes.
pub fn mention_fragment_ratio(
    equality_prior: f64,
    mention_base: f64,
    mention_lift: f64,
) -> Result<f64, AnalysisError> {
    let cfg = Config {
        equality_prior,
        mention_enabled: true,
        mention_base,
        mention_lift,
        ..Config::default()
    };
    cfg.validate()?;
    if equality_prior <= 0.0 {
        return Err(AnalysisError::OutOfRange(
            "equality prior must be positive for a posterior ratio".to_string(),
        ));
    }
    let eq = NodeId::new(0);
    let m = NodeId::new(1);
    let eq_node = Node::new(
        eq,
        NodeKind::Free { label: "equality".to_string() },
        vec![],
        Factor::new(vec![eq], vec![1.0 - equality_prior, equality_prior])
            .expect("valid root factor"),
    );
    let lifted = mention_lift * mention_base;
    let m_node = Node::new(
        m,
        NodeKind::Free { label: "mention".to_string() },
        vec![eq],
        Factor::new(
            vec![eq, m],
            vec![1.0 - mention_base, mention_base, 1.0 - lifted, lifted],
        )
        .expect("valid child factor"),
    );
    let net = BayesNet::from_parts(vec![eq_node, m_node], BTreeMap::new())?;
    let prior = infer::posterior(&net, &BTreeMap::new(), eq)?;
    let posterior = infer::posterior(&net, &BTreeMap::from([(m, true)]), eq)?;
    Ok(posterior / prior)
}

/// Measured mention lift on a full story network: the factor by which
/// clamping the entity's mention node true (on top of the word
/// evidence) raises its strongest equality hypothesis. Word evidence
/// already implies the mention, so this is reported rather than equal
/// to the configured lift.
pub fn mention_lift(
    lib: &PlanLibrary,
    story: &Story,
    cfg: &Config,
    entity: &str,
) -> Result<f64, AnalysisError> {
    if !cfg.mention_enabled {
        return Err(AnalysisError::MentionsDisabled);
    }
    let net = build_network(lib, story, cfg)?;
    let eqs = net.equalities_for(entity);
    if eqs.is_empty() {
        return Err(AnalysisError::NoEqualities(entity.to_string()));
    }
    let mention = net
        .mention_node(entity)
        .ok_or_else(|| AnalysisError::NoEqualities(entity.to_string()))?;
    let base_ev = net.evidence().clone();
    let mut clamped = base_ev.clone();
    clamped.insert(mention, true);
    let mut best: Option<f64> = None;
    for eq in eqs {
        let base = infer::posterior(&net, &base_ev, eq)?;
        if base <= 0.0 {
            return Err(AnalysisError::OutOfRange(
                "equality posterior is zero; the ratio is undefined".to_string(),
            ));
        }
        let lifted = infer::posterior(&net, &clamped, eq)?;
        let ratio = lifted / base;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    Ok(best.expect("at least one equality"))
}
