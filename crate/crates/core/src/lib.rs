//! Plan recognition over word/entity observations.
//!
//! A [`library::PlanLibrary`] declares entity types with base rates, a
//! word lexicon, and plan schemas with typed slots. Asserting a story's
//! tokens into a [`netbuild::Session`] incrementally grows a boolean
//! Bayesian network of type, plan, slot-filler and equality hypotheses;
//! [`infer`] computes exact posteriors over it; [`analysis`] packages
//! the quantitative behavior (the equality-prior knob, mode presets,
//! and the mention lift).

pub mod analysis;
pub mod infer;
pub mod library;
pub mod netbuild;
pub mod sexpr;

#[cfg(feature = "testgen")]
pub mod testgen;

pub use infer::{enumerate_posterior, marginals, posterior, Factor, InferError};
pub use library::{load_library, load_story, LoadError, PlanLibrary, Story};
pub use netbuild::{build_network, BayesNet, BuildError, Config, NodeId, NodeKind, Session};
