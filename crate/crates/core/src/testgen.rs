//! Randomized library/story/config fixtures for the property and
//! acceptance suites. Generation is deterministic given the RNG, and
//! slot restrictions only name object (non-plan-triggering) types, so
//! construction order can never change the resulting networks.

use rand::Rng;

use crate::library::{load_library, load_story, PlanLibrary, Story};
use crate::netbuild::{build_network, Config};

#[derive(Debug, Clone)]
pub struct GeneratedCase {
    type_decls: Vec<String>,
    word_decls: Vec<String>,
    plan_decls: Vec<String>,
    pub story_text: String,
    pub config: Config,
}

impl GeneratedCase {
    pub fn library_text(&self) -> String {
        let mut decls = Vec::new();
        decls.extend(self.type_decls.iter().cloned());
        decls.extend(self.word_decls.iter().cloned());
        decls.extend(self.plan_decls.iter().cloned());
        format!("(library\n  {})", decls.join("\n  "))
    }

    /// Same library with every plan schema removed.
    pub fn library_text_without_plans(&self) -> String {
        let mut decls = Vec::new();
        decls.extend(self.type_decls.iter().cloned());
        decls.extend(self.word_decls.iter().cloned());
        format!("(library\n  {})", decls.join("\n  "))
    }

    pub fn library(&self) -> PlanLibrary {
        load_library(&self.library_text()).expect("generated library loads")
    }

    pub fn story(&self, lib: &PlanLibrary) -> Story {
        load_story(&self.story_text, lib).expect("generated story loads")
    }
}

fn log_uniform(rng: &mut impl Rng, lo_exp: f64, hi_exp: f64) -> f64 {
    10f64.powf(rng.random_range(lo_exp..hi_exp))
}

/// One random case: types, lexicon, up to two plan schemas, a short
/// story and a config (sometimes with mentions enabled, sometimes with
/// a zero equality prior).
pub fn random_case(rng: &mut impl Rng) -> GeneratedCase {
    let n_obj = rng.random_range(1..=3usize);
    let n_act = rng.random_range(1..=2usize);

    let mut type_decls = Vec::new();
    let mut word_decls = Vec::new();
    let mut words = Vec::new();
    for i in 0..n_obj {
        let prior = log_uniform(rng, -6.0, -1.0);
        type_decls.push(format!("(type obj{i} :prior {prior:e})"));
        let p = rng.random_range(0.5..1.0);
        word_decls.push(format!("(word \"wo{i}\" :sense obj{i} :p {p})"));
        words.push(format!("wo{i}"));
    }
    for i in 0..n_act {
        let prior = log_uniform(rng, -5.0, -2.0);
        type_decls.push(format!("(type act{i} :prior {prior:e})"));
        let p = rng.random_range(0.5..1.0);
        word_decls.push(format!("(word \"wa{i}\" :sense act{i} :p {p})"));
        words.push(format!("wa{i}"));
    }
    // Occasionally an ambiguous word covering one object and one action.
    if rng.random_bool(0.3) {
        let o = rng.random_range(0..n_obj);
        let a = rng.random_range(0..n_act);
        let p1 = rng.random_range(0.5..1.0);
        let p2 = rng.random_range(0.5..1.0);
        word_decls.push(format!("(word \"amb\" :sense obj{o} :p {p1})"));
        word_decls.push(format!("(word \"amb\" :sense act{a} :p {p2})"));
        words.push("amb".to_string());
    }

    let n_plans = rng.random_range(0..=2usize);
    let mut plan_decls = Vec::new();
    for i in 0..n_plans {
        let act = rng.random_range(0..n_act);
        let p = log_uniform(rng, -3.0, -0.5);
        let n_slots = rng.random_range(0..=2usize);
        let slots: Vec<String> = (0..n_slots)
            .map(|s| format!("(slot s{s} obj{})", rng.random_range(0..n_obj)))
            .collect();
        plan_decls.push(format!(
            "(plan plan{i} :specializes act{act} :p {p:e} {})",
            slots.join(" ")
        ));
    }

    let n_tokens = rng.random_range(2..=4usize);
    let tokens: Vec<String> = (0..n_tokens)
        .map(|i| {
            let w = &words[rng.random_range(0..words.len())];
            format!("(token \"{w}\" e{i})")
        })
        .collect();
    let story_text = format!("(story {})", tokens.join(" "));

    let equality_prior = if rng.random_bool(0.1) {
        0.0
    } else {
        log_uniform(rng, -6.0, -1.0)
    };
    let mention_base = log_uniform(rng, -3.0, -1.0);
    let mention_lift = 1.0 + rng.random::<f64>() * (1.0 / mention_base - 1.0);
    let config = Config {
        equality_prior,
        mention_enabled: rng.random_bool(0.4),
        mention_base,
        mention_lift,
        word_leak: 1e-7,
        max_equality_candidates: 16,
    };

    GeneratedCase { type_decls, word_decls, plan_decls, story_text, config }
}

/// A random case whose built network stays within `max_nodes`.
pub fn random_case_bounded(rng: &mut impl Rng, max_nodes: usize) -> GeneratedCase {
    loop {
        let case = random_case(rng);
        let lib = case.library();
        let story = case.story(&lib);
        let net = build_network(&lib, &story, &case.config).expect("generated case builds");
        if net.len() <= max_nodes {
            return case;
        }
    }
}
