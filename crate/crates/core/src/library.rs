//! Knowledge-base data model: entity types with base rates, a lexicon
//! mapping words to type senses, and plan schemas with typed slots.
//!
//! Libraries and stories load from the s-expression formats:
//!
//! ```text
//! (library
//!   (type kill :prior 1e-4)
//!   (type rope :prior 1e-5)
//!   (word "kill" :sense kill :p 0.9)
//!   (word "rope" :sense rope :p 0.9)
//!   (plan hang :specializes kill :p 1e-3
//!     (slot rope-of rope)))
//!
//! (story (token "kill" k1) (token "rope" r2))
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::sexpr::{self, ParseError, Pos, Sexpr};

/// An entity type together with the base rate that an arbitrary domain
/// entity is of this type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeDef {
    pub name: String,
    pub prior: f64,
}

/// One sense of a word: the probability that the word is used for an
/// entity of the given type.
#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    pub word: String,
    pub sense: String,
    pub p_word: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDef {
    pub name: String,
    pub restriction: String,
}

/// A complex action schema: a way of doing the more general action it
/// specializes, with typed participant slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSchema {
    pub name: String,
    pub specializes: String,
    pub p_given_parent: f64,
    pub slots: Vec<SlotDef>,
}

/// Immutable after load; safe to share read-only across concurrent
/// inference runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanLibrary {
    types: BTreeMap<String, TypeDef>,
    lexicon: Vec<LexEntry>,
    schemas: BTreeMap<String, PlanSchema>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub word: String,
    pub entity: String,
}

/// An ordered sequence of (word, entity) observations. Each token
/// introduces one fresh entity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Story {
    pub tokens: Vec<Token>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoadError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{pos}: expected {expected}")]
    Form { pos: Pos, expected: String },
    #[error("{pos}: duplicate {what} `{name}`")]
    Duplicate { pos: Pos, what: &'static str, name: String },
    #[error("{pos}: unknown type `{name}`")]
    UnknownType { pos: Pos, name: String },
    #[error("{pos}: plan name `{name}` collides with a type name")]
    NameCollision { pos: Pos, name: String },
    #[error("{pos}: {what} must lie in {bounds}, got {value}")]
    OutOfRange { pos: Pos, what: String, bounds: &'static str, value: f64 },
    #[error("{pos}: word `{word}` is not in the lexicon")]
    UnknownWord { pos: Pos, word: String },
    #[error("{pos}: duplicate entity `{name}`")]
    DuplicateEntity { pos: Pos, name: String },
}

/// Programmatic query against a type name that was never declared.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown type `{0}`")]
pub struct UnknownTypeName(pub String);

impl PlanLibrary {
    pub fn types(&self) -> impl Iterator<Item = &TypeDef> {
        self.types.values()
    }

    pub fn type_def(&self, name: &str) -> Option<&TypeDef> {
        self.types.get(name)
    }

    pub fn lexicon(&self) -> &[LexEntry] {
        &self.lexicon
    }

    /// Lexicon entries for a word, in declaration order.
    pub fn senses_of(&self, word: &str) -> Vec<&LexEntry> {
        self.lexicon.iter().filter(|e| e.word == word).collect()
    }

    pub fn has_word(&self, word: &str) -> bool {
        self.lexicon.iter().any(|e| e.word == word)
    }

    /// Smallest word-use probability across the lexicon (the word leak
    /// must stay strictly below it).
    pub fn min_p_word(&self) -> f64 {
        self.lexicon.iter().map(|e| e.p_word).fold(f64::INFINITY, f64::min)
    }

    pub fn schemas(&self) -> impl Iterator<Item = &PlanSchema> {
        self.schemas.values()
    }

    pub fn schema(&self, name: &str) -> Option<&PlanSchema> {
        self.schemas.get(name)
    }

    pub fn schema_count(&self) -> usize {
        self.schemas.len()
    }

    pub fn slot_count(&self) -> usize {
        self.schemas.values().map(|s| s.slots.len()).sum()
    }

    /// The schemas that are ways of doing the general action `type_name`.
    pub fn triggers_for_type(&self, type_name: &str) -> Result<Vec<&PlanSchema>, UnknownTypeName> {
        self.require_type(type_name)?;
        Ok(self
            .schemas
            .values()
            .filter(|s| s.specializes == type_name)
            .collect())
    }

    /// All (schema, slot) pairs whose restriction is `type_name`.
    pub fn slots_accepting(&self, type_name: &str) -> Result<Vec<(&PlanSchema, &SlotDef)>, UnknownTypeName> {
        self.require_type(type_name)?;
        Ok(self
            .schemas
            .values()
            .flat_map(|s| s.slots.iter().map(move |d| (s, d)))
            .filter(|(_, d)| d.restriction == type_name)
            .collect())
    }

    fn require_type(&self, name: &str) -> Result<(), UnknownTypeName> {
        if self.types.contains_key(name) {
            Ok(())
        } else {
            Err(UnknownTypeName(name.to_string()))
        }
    }
}

fn expect_list<'a>(form: &'a Sexpr, expected: &str) -> Result<&'a [Sexpr], LoadError> {
    form.list().ok_or_else(|| LoadError::Form {
        pos: form.pos,
        expected: expected.to_string(),
    })
}

fn expect_symbol<'a>(form: &'a Sexpr, expected: &str) -> Result<&'a str, LoadError> {
    form.symbol().ok_or_else(|| LoadError::Form {
        pos: form.pos,
        expected: expected.to_string(),
    })
}

fn expect_string<'a>(form: &'a Sexpr, expected: &str) -> Result<&'a str, LoadError> {
    form.string().ok_or_else(|| LoadError::Form {
        pos: form.pos,
        expected: expected.to_string(),
    })
}

fn expect_number(form: &Sexpr, expected: &str) -> Result<f64, LoadError> {
    form.number().ok_or_else(|| LoadError::Form {
        pos: form.pos,
        expected: expected.to_string(),
    })
}

fn expect_keyword(form: &Sexpr, keyword: &str) -> Result<(), LoadError> {
    if form.symbol() == Some(keyword) {
        Ok(())
    } else {
        Err(LoadError::Form {
            pos: form.pos,
            expected: format!("keyword `{keyword}`"),
        })
    }
}

fn item<'a>(items: &'a [Sexpr], i: usize, parent: &Sexpr, expected: &str) -> Result<&'a Sexpr, LoadError> {
    items.get(i).ok_or_else(|| LoadError::Form {
        pos: parent.pos,
        expected: expected.to_string(),
    })
}

fn check_unit_interval(value: f64, what: &str, allow_one: bool, pos: Pos) -> Result<(), LoadError> {
    let ok = value > 0.0 && (value < 1.0 || (allow_one && value == 1.0));
    if ok {
        Ok(())
    } else {
        Err(LoadError::OutOfRange {
            pos,
            what: what.to_string(),
            bounds: if allow_one { "(0,1]" } else { "(0,1)" },
            value,
        })
    }
}

/// Loads and fully validates one `(library ...)` form.
pub fn load_library(text: &str) -> Result<PlanLibrary, LoadError> {
    let form = sexpr::parse_sexpr(text)?;
    let items = expect_list(&form, "a `(library ...)` form")?;
    if items.first().and_then(|s| s.symbol()) != Some("library") {
        return Err(LoadError::Form {
            pos: form.pos,
            expected: "a `(library ...)` form".to_string(),
        });
    }

    let mut lib = PlanLibrary::default();
    let mut deferred_schemas: Vec<(Pos, PlanSchema)> = Vec::new();
    let mut seen_lex: Vec<(String, String)> = Vec::new();

    for decl in &items[1..] {
        let fields = expect_list(decl, "a `(type ...)`, `(word ...)` or `(plan ...)` declaration")?;
        let head = expect_symbol(
            item(fields, 0, decl, "a declaration head symbol")?,
            "a declaration head symbol",
        )?;
        match head {
            "type" => {
                let name = expect_symbol(item(fields, 1, decl, "a type name")?, "a type name")?;
                expect_keyword(item(fields, 2, decl, "`:prior`")?, ":prior")?;
                let prior = expect_number(item(fields, 3, decl, "a prior probability")?, "a prior probability")?;
                check_unit_interval(prior, &format!("prior of type `{name}`"), false, decl.pos)?;
                if lib.types.contains_key(name) {
                    return Err(LoadError::Duplicate {
                        pos: decl.pos,
                        what: "type",
                        name: name.to_string(),
                    });
                }
                lib.types.insert(
                    name.to_string(),
                    TypeDef { name: name.to_string(), prior },
                );
            }
            "word" => {
                let word = expect_string(item(fields, 1, decl, "a quoted word")?, "a quoted word")?;
                expect_keyword(item(fields, 2, decl, "`:sense`")?, ":sense")?;
                let sense = expect_symbol(item(fields, 3, decl, "a sense type name")?, "a sense type name")?;
                expect_keyword(item(fields, 4, decl, "`:p`")?, ":p")?;
                let p = expect_number(item(fields, 5, decl, "a word-use probability")?, "a word-use probability")?;
                check_unit_interval(p, &format!("p of word `{word}`"), true, decl.pos)?;
                let key = (word.to_string(), sense.to_string());
                if seen_lex.contains(&key) {
                    return Err(LoadError::Duplicate {
                        pos: decl.pos,
                        what: "lexicon entry",
                        name: format!("{word}/{sense}"),
                    });
                }
                seen_lex.push(key);
                lib.lexicon.push(LexEntry {
                    word: word.to_string(),
                    sense: sense.to_string(),
                    p_word: p,
                });
            }
            "plan" => {
                let name = expect_symbol(item(fields, 1, decl, "a plan name")?, "a plan name")?;
                expect_keyword(item(fields, 2, decl, "`:specializes`")?, ":specializes")?;
                let parent = expect_symbol(item(fields, 3, decl, "a type name")?, "a type name")?;
                expect_keyword(item(fields, 4, decl, "`:p`")?, ":p")?;
                let p = expect_number(
                    item(fields, 5, decl, "a specialization probability")?,
                    "a specialization probability",
                )?;
                check_unit_interval(p, &format!("p of plan `{name}`"), false, decl.pos)?;
                let mut slots = Vec::new();
                for slot_form in &fields[6..] {
                    let sf = expect_list(slot_form, "a `(slot NAME TYPE)` form")?;
                    if sf.first().and_then(|s| s.symbol()) != Some("slot") || sf.len() != 3 {
                        return Err(LoadError::Form {
                            pos: slot_form.pos,
                            expected: "a `(slot NAME TYPE)` form".to_string(),
                        });
                    }
                    let slot_name = expect_symbol(&sf[1], "a slot name")?;
                    let restriction = expect_symbol(&sf[2], "a slot restriction type name")?;
                    if slots.iter().any(|d: &SlotDef| d.name == slot_name) {
                        return Err(LoadError::Duplicate {
                            pos: slot_form.pos,
                            what: "slot",
                            name: slot_name.to_string(),
                        });
                    }
                    // Restrictions may name types declared later; resolved below.
                    slots.push(SlotDef {
                        name: slot_name.to_string(),
                        restriction: restriction.to_string(),
                    });
                }
                if deferred_schemas.iter().any(|(_, s)| s.name == name) {
                    return Err(LoadError::Duplicate {
                        pos: decl.pos,
                        what: "plan",
                        name: name.to_string(),
                    });
                }
                deferred_schemas.push((
                    decl.pos,
                    PlanSchema {
                        name: name.to_string(),
                        specializes: parent.to_string(),
                        p_given_parent: p,
                        slots,
                    },
                ));
            }
            other => {
                return Err(LoadError::Form {
                    pos: decl.pos,
                    expected: format!("`type`, `word` or `plan`, not `{other}`"),
                })
            }
        }
    }

    // Cross-reference resolution after all types are known.
    for entry in &lib.lexicon {
        if !lib.types.contains_key(&entry.sense) {
            return Err(LoadError::UnknownType {
                pos: form.pos,
                name: entry.sense.clone(),
            });
        }
    }
    for (pos, schema) in deferred_schemas {
        if lib.types.contains_key(&schema.name) {
            return Err(LoadError::NameCollision {
                pos,
                name: schema.name.clone(),
            });
        }
        if !lib.types.contains_key(&schema.specializes) {
            return Err(LoadError::UnknownType {
                pos,
                name: schema.specializes.clone(),
            });
        }
        for slot in &schema.slots {
            if !lib.types.contains_key(&slot.restriction) {
                return Err(LoadError::UnknownType {
                    pos,
                    name: slot.restriction.clone(),
                });
            }
        }
        lib.schemas.insert(schema.name.clone(), schema);
    }
    Ok(lib)
}

/// Loads one `(story ...)` form and validates it against a library.
pub fn load_story(text: &str, lib: &PlanLibrary) -> Result<Story, LoadError> {
    let form = sexpr::parse_sexpr(text)?;
    let items = expect_list(&form, "a `(story ...)` form")?;
    if items.first().and_then(|s| s.symbol()) != Some("story") {
        return Err(LoadError::Form {
            pos: form.pos,
            expected: "a `(story ...)` form".to_string(),
        });
    }
    let mut story = Story::default();
    for token_form in &items[1..] {
        let tf = expect_list(token_form, "a `(token \"word\" entity)` form")?;
        if tf.first().and_then(|s| s.symbol()) != Some("token") || tf.len() != 3 {
            return Err(LoadError::Form {
                pos: token_form.pos,
                expected: "a `(token \"word\" entity)` form".to_string(),
            });
        }
        let word = expect_string(&tf[1], "a quoted word")?;
        let entity = expect_symbol(&tf[2], "an entity identifier")?;
        if !lib.has_word(word) {
            return Err(LoadError::UnknownWord {
                pos: tf[1].pos,
                word: word.to_string(),
            });
        }
        if story.tokens.iter().any(|t| t.entity == entity) {
            return Err(LoadError::DuplicateEntity {
                pos: tf[2].pos,
                name: entity.to_string(),
            });
        }
        story.tokens.push(Token {
            word: word.to_string(),
            entity: entity.to_string(),
        });
    }
    Ok(story)
}
