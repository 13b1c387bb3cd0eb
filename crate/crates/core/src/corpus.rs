//! Deterministic template grammar that emits annotated sentences.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{AnnotatedExample, GoldEntity, GoldRelation};

/// Built-in grammar: 5 entity types, 4 relation types.
pub const DEFAULT_GRAMMAR: &str = include_str!("../grammars/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityTypeSpec {
    pub label: String,
    pub surface: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub label: String,
    /// Alternative label for zero-shot checks; never used during generation.
    #[serde(default)]
    pub paraphrase: Option<String>,
    pub head: Vec<String>,
    pub tail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub text: String,
    pub weight: f64,
    pub slots: BTreeMap<String, String>,
    /// `(head slot, relation label, tail slot)`.
    pub relations: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub seed: u64,
    pub entity_types: Vec<EntityTypeSpec>,
    pub relations: Vec<RelationSpec>,
    pub templates: Vec<TemplateSpec>,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Slot(String),
}

fn parse_template(text: &str) -> Result<Vec<Piece>> {
    text.split_whitespace()
        .map(|w| {
            if let Some(inner) = w.strip_prefix('{') {
                let name = inner
                    .strip_suffix('}')
                    .ok_or_else(|| Error::Grammar(format!("malformed slot {w:?} in {text:?}")))?;
                Ok(Piece::Slot(name.to_owned()))
            } else if w.contains('{') || w.contains('}') {
                Err(Error::Grammar(format!("malformed slot {w:?} in {text:?}")))
            } else {
                Ok(Piece::Word(w.to_owned()))
            }
        })
        .collect()
}

impl GrammarSpec {
    pub fn default_grammar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("built-in grammar is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: GrammarSpec = toml::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn entity_labels(&self) -> Vec<String> {
        self.entity_types.iter().map(|e| e.label.clone()).collect()
    }

    pub fn relation_labels(&self) -> Vec<String> {
        self.relations.iter().map(|r| r.label.clone()).collect()
    }

    /// Paraphrased relation labels, falling back to the original label.
    pub fn relation_paraphrases(&self) -> Vec<String> {
        self.relations
            .iter()
            .map(|r| r.paraphrase.clone().unwrap_or_else(|| r.label.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let types: HashMap<&str, &EntityTypeSpec> = self.entity_types.iter().map(|e| (e.label.as_str(), e)).collect();
        if types.len() != self.entity_types.len() {
            return Err(Error::Grammar("duplicate entity type label".into()));
        }
        for e in &self.entity_types {
            if e.label.trim().is_empty() || e.surface.is_empty() || e.surface.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Grammar(format!("entity type {:?} needs a label and nonempty surface forms", e.label)));
            }
        }
        let relations: HashMap<&str, &RelationSpec> = self.relations.iter().map(|r| (r.label.as_str(), r)).collect();
        if relations.len() != self.relations.len() {
            return Err(Error::Grammar("duplicate relation label".into()));
        }
        for r in &self.relations {
            for t in r.head.iter().chain(&r.tail) {
                if !types.contains_key(t.as_str()) {
                    return Err(Error::Grammar(format!("relation {:?} names unknown type {t:?}", r.label)));
                }
            }
        }
        if self.templates.is_empty() {
            return Err(Error::Grammar("no templates".into()));
        }
        for t in &self.templates {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(Error::Grammar(format!("template {:?} needs a positive weight", t.text)));
            }
            let pieces = parse_template(&t.text)?;
            let mut used = Vec::new();
            for p in &pieces {
                if let Piece::Slot(name) = p {
                    let ty = t
                        .slots
                        .get(name)
                        .ok_or_else(|| Error::Grammar(format!("slot {name:?} in {:?} has no type", t.text)))?;
                    if !types.contains_key(ty.as_str()) {
                        return Err(Error::Grammar(format!("slot {name:?} has unknown type {ty:?}")));
                    }
                    if used.contains(name) {
                        return Err(Error::Grammar(format!("slot {name:?} appears twice in {:?}", t.text)));
                    }
                    used.push(name.clone());
                }
            }
            for (head, label, tail) in &t.relations {
                let r = relations
                    .get(label.as_str())
                    .ok_or_else(|| Error::Grammar(format!("template {:?} uses unknown relation {label:?}", t.text)))?;
                for (slot, legal) in [(head, &r.head), (tail, &r.tail)] {
                    if !used.contains(slot) {
                        return Err(Error::Grammar(format!("relation slot {slot:?} unresolved in {:?}", t.text)));
                    }
                    if !legal.contains(&t.slots[slot]) {
                        return Err(Error::Grammar(format!(
                            "slot {slot:?} of type {:?} is not a legal argument of {label:?}",
                            t.slots[slot]
                        )));
                    }
                }
                if head == tail {
                    return Err(Error::Grammar(format!("relation {label:?} links slot {head:?} to itself")));
                }
            }
        }
        Ok(())
    }
}

/// `size` examples, deterministic in the grammar seed.
pub fn generate_corpus(spec: &GrammarSpec, size: usize) -> Result<Vec<AnnotatedExample>> {
    if size == 0 {
        return Err(Error::Grammar("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let types: HashMap<&str, &EntityTypeSpec> = spec.entity_types.iter().map(|e| (e.label.as_str(), e)).collect();
    let total: f64 = spec.templates.iter().map(|t| t.weight).sum();
    let parsed: Vec<Vec<Piece>> = spec.templates.iter().map(|t| parse_template(&t.text)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let mut pick = rng.random::<f64>() * total;
        let mut which = spec.templates.len() - 1;
        for (i, t) in spec.templates.iter().enumerate() {
            if pick < t.weight {
                which = i;
                break;
            }
            pick -= t.weight;
        }
        let template = &spec.templates[which];
        let mut tokens = Vec::new();
        let mut entities = Vec::new();
        let mut slot_entity = HashMap::new();
        let mut taken: Vec<&str> = Vec::new();
        for piece in &parsed[which] {
            match piece {
                Piece::Word(w) => tokens.push(w.clone()),
                Piece::Slot(name) => {
                    let ty = &template.slots[name];
                    let lexicon = &types[ty.as_str()].surface;
                    // distinct surface forms within one sentence
                    let choices: Vec<&String> = lexicon.iter().filter(|s| !taken.contains(&s.as_str())).collect();
                    let surface = if choices.is_empty() {
                        lexicon.choose(&mut rng).expect("nonempty lexicon")
                    } else {
                        *choices.choose(&mut rng).expect("nonempty choices")
                    };
                    taken.push(surface);
                    let start = tokens.len();
                    tokens.extend(surface.split_whitespace().map(str::to_owned));
                    slot_entity.insert(name.as_str(), entities.len());
                    entities.push(GoldEntity {
                        start,
                        end: tokens.len() - 1,
                        label: ty.clone(),
                    });
                }
            }
        }
        let relations = template
            .relations
            .iter()
            .map(|(h, label, t)| GoldRelation {
                head: slot_entity[h.as_str()],
                tail: slot_entity[t.as_str()],
                label: label.clone(),
            })
            .collect();
        let ex = AnnotatedExample {
            tokens,
            gold_entities: entities,
            gold_relations: relations,
        };
        ex.validate().map_err(Error::Grammar)?;
        out.push(ex);
    }
    Ok(out)
}
