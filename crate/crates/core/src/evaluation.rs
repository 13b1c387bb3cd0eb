//! Line-delimited dataset IO and strict-match micro-F1.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEntity {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Directed relation between two entries of `gold_entities`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRelation {
    pub head: usize,
    pub tail: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedExample {
    pub tokens: Vec<String>,
    pub gold_entities: Vec<GoldEntity>,
    pub gold_relations: Vec<GoldRelation>,
}

impl AnnotatedExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        for (i, e) in self.gold_entities.iter().enumerate() {
            if e.start > e.end || e.end >= n {
                return Err(format!("entity {i} span [{}, {}] out of bounds for {n} tokens", e.start, e.end));
            }
            if e.label.trim().is_empty() {
                return Err(format!("entity {i} has an empty label"));
            }
        }
        let k = self.gold_entities.len();
        for (i, r) in self.gold_relations.iter().enumerate() {
            if r.head >= k || r.tail >= k {
                return Err(format!(
                    "relation {i} endpoint ({}, {}) dangles over {k} entities",
                    r.head, r.tail
                ));
            }
            if r.head == r.tail {
                return Err(format!("relation {i} links entity {} to itself", r.head));
            }
            if r.label.trim().is_empty() {
                return Err(format!("relation {i} has an empty label"));
            }
        }
        Ok(())
    }

    /// Mentions with labels resolved, in gold order.
    pub fn entity_mentions(&self) -> Vec<EntityMention> {
        self.gold_entities
            .iter()
            .map(|e| EntityMention {
                start: e.start,
                end: e.end,
                label: e.label.clone(),
            })
            .collect()
    }

    pub fn relation_mentions(&self) -> Vec<RelationMention> {
        let ents = self.entity_mentions();
        self.gold_relations
            .iter()
            .map(|r| RelationMention {
                head: ents[r.head].clone(),
                tail: ents[r.tail].clone(),
                label: r.label.clone(),
            })
            .collect()
    }
}

/// Reads one JSON object per non-blank line.
pub fn load_dataset(path: &Path) -> Result<Vec<AnnotatedExample>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let ex: AnnotatedExample = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        ex.validate().map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[AnnotatedExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationMention {
    pub head: EntityMention,
    pub tail: EntityMention,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let micro_f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            micro_f1,
        }
    }
}

/// Counts `(tp, fp, fn)` with each gold item matched at most once.
fn match_counts<T, G>(predicted: &[T], gold: &[G], same: impl Fn(&T, &G) -> bool) -> (usize, usize, usize) {
    let mut used = vec![false; gold.len()];
    let mut tp = 0;
    for p in predicted {
        if let Some(i) = (0..gold.len()).find(|&i| !used[i] && same(p, &gold[i])) {
            used[i] = true;
            tp += 1;
        }
    }
    (tp, predicted.len() - tp, gold.len() - tp)
}

fn aligned<T>(predicted: &[T], gold: &[AnnotatedExample]) -> Result<()> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} prediction lists for {} examples",
            predicted.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Exact `(start, end, label)` entity matching.
pub fn entity_f1(predicted: &[Vec<EntityMention>], gold: &[AnnotatedExample]) -> Result<Scores> {
    aligned(predicted, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let (a, b, c) = match_counts(p, &g.entity_mentions(), |x, y| x == y);
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(Scores::from_counts(tp, fp, fn_))
}

/// Relation matching on head and tail boundaries plus relation label; with
/// `check_entity_types` the endpoint labels must match too.
pub fn micro_f1_relations(predicted: &[Vec<RelationMention>], gold: &[AnnotatedExample], check_entity_types: bool) -> Result<Scores> {
    aligned(predicted, gold)?;
    let same = |x: &RelationMention, y: &RelationMention| {
        x.label == y.label
            && (x.head.start, x.head.end, x.tail.start, x.tail.end) == (y.head.start, y.head.end, y.tail.start, y.tail.end)
            && (!check_entity_types || (x.head.label == y.head.label && x.tail.label == y.tail.label))
    };
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let (a, b, c) = match_counts(p, &g.relation_mentions(), same);
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(Scores::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub entities: Scores,
    pub relations: Scores,
    pub entity_support: BTreeMap<String, usize>,
    pub relation_support: BTreeMap<String, usize>,
}

pub fn evaluate(
    entities: &[Vec<EntityMention>],
    relations: &[Vec<RelationMention>],
    gold: &[AnnotatedExample],
    check_entity_types: bool,
) -> Result<MetricsReport> {
    let mut entity_support = BTreeMap::new();
    let mut relation_support = BTreeMap::new();
    for ex in gold {
        for e in &ex.gold_entities {
            *entity_support.entry(e.label.clone()).or_insert(0) += 1;
        }
        for r in &ex.gold_relations {
            *relation_support.entry(r.label.clone()).or_insert(0) += 1;
        }
    }
    Ok(MetricsReport {
        examples: gold.len(),
        entities: entity_f1(entities, gold)?,
        relations: micro_f1_relations(relations, gold, check_entity_types)?,
        entity_support,
        relation_support,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples: {}", self.examples)?;
        writeln!(f, "{:<10} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "task", "precision", "recall", "micro-f1", "tp", "fp", "fn")?;
        for (name, s) in [("entities", &self.entities), ("relations", &self.relations)] {
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name, s.precision, s.recall, s.micro_f1, s.true_positives, s.false_positives, s.false_negatives
            )?;
        }
        writeln!(f, "support:")?;
        for (label, n) in self.entity_support.iter().chain(&self.relation_support) {
            writeln!(f, "  {label:<20} {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schema_file_matches_record_fields() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../../../schema/dataset.schema.json")).unwrap();
        let keys = |v: &serde_json::Value| {
            let mut k: Vec<String> = v["properties"].as_object().unwrap().keys().cloned().collect();
            k.sort();
            let mut r: Vec<String> = v["required"].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
            r.sort();
            assert_eq!(k, r);
            k
        };
        assert_eq!(keys(&schema), ["gold_entities", "gold_relations", "tokens"]);
        assert_eq!(keys(&schema["properties"]["gold_entities"]["items"]), ["end", "label", "start"]);
        assert_eq!(keys(&schema["properties"]["gold_relations"]["items"]), ["head", "label", "tail"]);
        let example = AnnotatedExample {
            tokens: vec!["a".into(), "b".into()],
            gold_entities: vec![GoldEntity { start: 0, end: 0, label: "x".into() }, GoldEntity { start: 1, end: 1, label: "y".into() }],
            gold_relations: vec![GoldRelation { head: 0, tail: 1, label: "r".into() }],
        };
        let v = serde_json::to_value(&example).unwrap();
        let mut fields: Vec<&String> = v.as_object().unwrap().keys().collect();
        fields.sort();
        assert_eq!(fields, ["gold_entities", "gold_relations", "tokens"]);
    }

    fn ent(start: usize, end: usize, label: &str) -> EntityMention {
        EntityMention {
            start,
            end,
            label: label.into(),
        }
    }

    fn example() -> AnnotatedExample {
        AnnotatedExample {
            tokens: "Alice works for Acme Corp".split(' ').map(String::from).collect(),
            gold_entities: vec![
                GoldEntity { start: 0, end: 0, label: "person".into() },
                GoldEntity { start: 3, end: 4, label: "organization".into() },
            ],
            gold_relations: vec![GoldRelation { head: 0, tail: 1, label: "works for".into() }],
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &[example()]).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), vec![example()]);

        let empty = dir.path().join("e.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_dataset(&empty).unwrap().is_empty());

        let mut bad = example();
        bad.gold_relations[0].tail = 5;
        let path = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{}", serde_json::to_string(&example()).unwrap()).unwrap();
        writeln!(f, "{}", serde_json::to_string(&bad).unwrap()).unwrap();
        match load_dataset(&path) {
            Err(Error::Dataset { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("dangles"));
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset { line: 1, .. })));
        let mut oob = example();
        oob.gold_entities[1].end = 9;
        assert!(oob.validate().is_err());
    }

    #[test]
    fn scores_from_definition() {
        let s = Scores::from_counts(2, 1, 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = Scores::from_counts(0, 0, 4);
        assert_eq!((none.micro_f1, none.recall), (0.0, 0.0));
    }

    #[test]
    fn strict_matching() {
        let gold = vec![example()];
        let exact = vec![gold[0].entity_mentions()];
        assert_eq!(entity_f1(&exact, &gold).unwrap().micro_f1, 1.0);
        let shifted = vec![vec![ent(0, 0, "person"), ent(3, 3, "organization")]];
        let s = entity_f1(&shifted, &gold).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 1, 1));

        let rel = gold[0].relation_mentions();
        let mut retyped = rel.clone();
        retyped[0].head.label = "city".into();
        assert_eq!(micro_f1_relations(&[retyped.clone()], &gold, false).unwrap().micro_f1, 1.0);
        assert_eq!(micro_f1_relations(&[retyped], &gold, true).unwrap().micro_f1, 0.0);
        let doubled = vec![vec![rel[0].clone(), rel[0].clone()]];
        let s = micro_f1_relations(&doubled, &gold, false).unwrap();
        assert_eq!((s.true_positives, s.false_positives), (1, 1));
        assert!(matches!(entity_f1(&[], &gold), Err(Error::Contract(_))));
    }

    fn arb_example() -> impl Strategy<Value = (AnnotatedExample, Vec<RelationMention>, Vec<EntityMention>)> {
        let labels = ["a", "b"];
        (
            prop::collection::vec((0usize..5, 0usize..3, 0usize..2), 0..5),
            prop::collection::vec((0usize..6, 0usize..6, 0usize..2), 0..5),
            prop::collection::vec((0usize..5, 0usize..3, 0usize..2, 0usize..5, 0usize..3, 0usize..2, 0usize..2), 0..6),
            prop::collection::vec((0usize..5, 0usize..3, 0usize..2), 0..6),
        )
            .prop_map(move |(ents, rels, preds, pred_ents)| {
                let gold_entities: Vec<GoldEntity> = ents
                    .iter()
                    .map(|&(s, w, l)| GoldEntity { start: s, end: s + w, label: labels[l].into() })
                    .collect();
                let k = gold_entities.len();
                let gold_relations = rels
                    .iter()
                    .filter(|(h, t, _)| *h < k && *t < k && h != t)
                    .map(|&(h, t, l)| GoldRelation { head: h, tail: t, label: labels[l].into() })
                    .collect();
                let ex = AnnotatedExample {
                    tokens: vec!["w".into(); 8],
                    gold_entities,
                    gold_relations,
                };
                let rel_preds = preds
                    .iter()
                    .map(|&(hs, hw, hl, ts, tw, tl, l)| RelationMention {
                        head: ent(hs, hs + hw, labels[hl]),
                        tail: ent(ts, ts + tw, labels[tl]),
                        label: labels[l].into(),
                    })
                    .collect();
                let ent_preds = pred_ents.iter().map(|&(s, w, l)| ent(s, s + w, labels[l])).collect();
                (ex, rel_preds, ent_preds)
            })
    }

    /// Maximum matching by exhaustive search over assignments.
    fn brute_tp<T, G>(pred: &[T], gold: &[G], same: &dyn Fn(&T, &G) -> bool) -> usize {
        fn go<T, G>(i: usize, pred: &[T], gold: &[G], used: &mut Vec<bool>, same: &dyn Fn(&T, &G) -> bool) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, gold, used, same);
            for j in 0..gold.len() {
                if !used[j] && same(&pred[i], &gold[j]) {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, gold, used, same));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, gold, &mut vec![false; gold.len()], same)
    }

    proptest! {
        #[test]
        fn metrics_match_exhaustive_oracle(items in prop::collection::vec(arb_example(), 1..20), strict in any::<bool>()) {
            let gold: Vec<AnnotatedExample> = items.iter().map(|x| x.0.clone()).collect();
            let rels: Vec<Vec<RelationMention>> = items.iter().map(|x| x.1.clone()).collect();
            let ents: Vec<Vec<EntityMention>> = items.iter().map(|x| x.2.clone()).collect();

            let rel_same = |x: &RelationMention, y: &RelationMention| {
                x.label == y.label && x.head.start == y.head.start && x.head.end == y.head.end
                    && x.tail.start == y.tail.start && x.tail.end == y.tail.end
                    && (!strict || (x.head.label == y.head.label && x.tail.label == y.tail.label))
            };
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for (p, g) in rels.iter().zip(&gold) {
                let gm = g.relation_mentions();
                tp += brute_tp(p, &gm, &rel_same);
                np += p.len();
                ng += gm.len();
            }
            let want = Scores::from_counts(tp, np - tp, ng - tp);
            let got = micro_f1_relations(&rels, &gold, strict).unwrap();
            prop_assert_eq!(got, want);
            prop_assert!((0.0..=1.0).contains(&got.micro_f1));

            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for (p, g) in ents.iter().zip(&gold) {
                let gm = g.entity_mentions();
                tp += brute_tp(p, &gm, &|a: &EntityMention, b: &EntityMention| a == b);
                np += p.len();
                ng += gm.len();
            }
            prop_assert_eq!(entity_f1(&ents, &gold).unwrap(), Scores::from_counts(tp, np - tp, ng - tp));

            // permutation invariance
            let mut rev_gold = gold.clone();
            rev_gold.reverse();
            let mut rev_rels = rels.clone();
            rev_rels.reverse();
            prop_assert_eq!(micro_f1_relations(&rev_rels, &rev_gold, strict).unwrap(), got);
        }

        #[test]
        fn adding_predictions_moves_f1_the_right_way(item in arb_example()) {
            let (ex, _, ents) = item;
            let gold = vec![ex.clone()];
            let base = entity_f1(&[ents.clone()], &gold).unwrap().micro_f1;
            let unmatched: Vec<_> = ex.entity_mentions().into_iter().filter(|g| !ents.contains(g)).collect();
            if let Some(g) = unmatched.first() {
                let mut more = ents.clone();
                more.push(g.clone());
                prop_assert!(entity_f1(&[more], &gold).unwrap().micro_f1 >= base);
            }
            let mut wrong = ents.clone();
            wrong.push(ent(7, 7, "never"));
            prop_assert!(entity_f1(&[wrong], &gold).unwrap().micro_f1 <= base);
        }
    }
}
