//! The joint extractor: shared encoder, span head, pair construction and relation head.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TOY_BACKBONE};
use crate::encoder::{aggregate_subwords, bilstm_refine, encode, BiLstm, EncoderBackend, ToyEncoder, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{AnnotatedExample, EntityMention, MetricsReport, RelationMention};
use crate::graph::Var;
use crate::loss::{adjacency_loss, entity_loss, negative_sample, relation_loss, total_loss};
use crate::pair_head::{all_pairs, apply_pair_mask, select_pairs, AdjacencyDecoder, PairCandidateSet};
use crate::params::{Forward, Gradients, Init, ParamId, ParamStore};
use crate::prompt::{build_prompt, truncate_words};
use crate::relation_head::{decode_relations, RelationHead, RelationTriplet};
use crate::span_head::{decode_entities, enumerate_spans, score_entities, Entity, Span, SpanHead};

/// Entity and relation label lists in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub entity_labels: Vec<String>,
    pub relation_labels: Vec<String>,
}

impl Schema {
    pub fn new(entity_labels: Vec<String>, relation_labels: Vec<String>) -> Self {
        Self {
            entity_labels,
            relation_labels,
        }
    }

    /// Sorted label inventory observed in a dataset.
    pub fn from_examples(examples: &[AnnotatedExample]) -> Self {
        let mut ents: Vec<String> = examples.iter().flat_map(|e| e.gold_entities.iter().map(|g| g.label.clone())).collect();
        let mut rels: Vec<String> = examples.iter().flat_map(|e| e.gold_relations.iter().map(|g| g.label.clone())).collect();
        ents.sort();
        ents.dedup();
        rels.sort();
        rels.dedup();
        Self::new(ents, rels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub entity_threshold: f64,
    pub relation_threshold: f64,
    pub flat_ner: bool,
}

impl ExtractOptions {
    pub fn from_config(config: &Config) -> Self {
        Self {
            entity_threshold: config.inference.entity_threshold,
            relation_threshold: config.inference.relation_threshold,
            flat_ner: config.inference.flat_ner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extraction {
    /// Sorted by `(start, end, type_index)`.
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationTriplet>,
    pub word_count: usize,
}

impl Extraction {
    pub fn mentions(&self, schema: &Schema) -> (Vec<EntityMention>, Vec<RelationMention>) {
        let mention = |e: &Entity| EntityMention {
            start: e.span.start,
            end: e.span.end,
            label: schema.entity_labels[e.type_index].clone(),
        };
        let ents = self.entities.iter().map(mention).collect();
        let rels = self
            .relations
            .iter()
            .map(|r| RelationMention {
                head: mention(&r.head),
                tail: mention(&r.tail),
                label: schema.relation_labels[r.relation_index].clone(),
            })
            .collect();
        (ents, rels)
    }
}

/// Scalar loss components for one example.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub entity: f64,
    pub adjacency: f64,
    pub relation: f64,
    pub total: f64,
    /// Gold relations that received no relation target.
    pub dropped_pairs: usize,
}

/// How a training loss is built for one example.
#[derive(Debug, Clone, Copy)]
pub struct LossMode {
    /// Enables dropout with this seed; `None` for deterministic evaluation.
    pub dropout_seed: Option<u64>,
    /// Negative-sampling seed; `None` keeps every cell.
    pub sample_seed: Option<u64>,
}

impl LossMode {
    pub const EVAL: LossMode = LossMode {
        dropout_seed: None,
        sample_seed: None,
    };
}

struct LossVars {
    entity: Var,
    adjacency: Option<Var>,
    relation: Var,
    total: Var,
    dropped_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub config: Config,
    pub schema: Schema,
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub bilstm: Option<BiLstm>,
    pub span_head: SpanHead,
    pub adjacency: Option<AdjacencyDecoder>,
    pub relation_head: RelationHead,
}

/// Vocabulary over corpus tokens and label words.
pub fn build_vocab(examples: &[AnnotatedExample], schema: &Schema, config: &Config) -> Vocab {
    let label_words = schema
        .entity_labels
        .iter()
        .chain(&schema.relation_labels)
        .flat_map(|l| l.split_whitespace());
    let words = examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str)).chain(label_words);
    Vocab::build(words, config.encoder.vocab_min_freq, config.encoder.hash_buckets)
}

impl JointModel {
    /// Registers parameters in a fixed order so checkpoints can be restored by name.
    pub fn new(config: Config, vocab: Vocab, schema: Schema) -> Result<Self> {
        config.validate()?;
        if config.encoder.backbone != TOY_BACKBONE {
            return Err(Error::config(format!(
                "backbone {:?} needs the pretrained-encoder adapter, which this build does not ship; set encoder.backbone = \"toy\"",
                config.encoder.backbone
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(config.training.seed);
        let dim = config.encoder.dim;
        let encoder = ToyEncoder::new(config.encoder.toy(), vocab, &mut store, &mut init)?;
        let bilstm = if config.encoder.bilstm {
            Some(BiLstm::new(&mut store, &mut init, "bilstm", dim)?)
        } else {
            None
        };
        let span_head = SpanHead::new(&mut store, &mut init, dim, config.span.max_width, config.span.type_activation)?;
        let adjacency = match config.pairs.decoder()? {
            Some(kind) => Some(AdjacencyDecoder::new(&mut store, &mut init, dim, kind)?),
            None => None,
        };
        let relation_head = RelationHead::new(
            &mut store,
            &mut init,
            dim,
            config.relation.scorer,
            config.relation.activation,
            config.relation.dropout,
        )?;
        Ok(Self {
            config,
            schema,
            store,
            encoder,
            bilstm,
            span_head,
            adjacency,
            relation_head,
        })
    }

    /// Parameters grouped by module, in registration order.
    pub fn modules(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut out = vec![("encoder", self.encoder.params())];
        if let Some(l) = &self.bilstm {
            out.push(("bilstm", l.params()));
        }
        out.push(("span", self.span_head.params()));
        if let Some(a) = &self.adjacency {
            out.push(("adjacency", a.params()));
        }
        out.push(("relation", self.relation_head.params()));
        out
    }

    fn encode_views<S: AsRef<str>>(
        &self,
        f: &mut Forward<'_>,
        words: &[S],
        entity_labels: &[String],
        relation_labels: &[String],
    ) -> Result<(Var, Var, Var)> {
        let layout = build_prompt(entity_labels, relation_labels, words)?;
        let (hidden, sub) = encode(&self.encoder, f, &layout)?;
        let views = aggregate_subwords(f, hidden, &layout, &sub, self.config.encoder.aggregation)?;
        let words = bilstm_refine(f, views.word_reps, self.bilstm.as_ref());
        Ok((words, views.entity_type_reps, views.relation_type_reps))
    }

    fn build_loss(
        &self,
        f: &mut Forward<'_>,
        example: &AnnotatedExample,
        entity_labels: &[String],
        relation_labels: &[String],
        mode: LossMode,
    ) -> Result<LossVars> {
        let cfg = &self.config.loss;
        let words = truncate_words(&example.tokens, self.config.encoder.max_words);
        let n = words.len();
        let (word_reps, ent_types, rel_types) = self.encode_views(f, &words, entity_labels, relation_labels)?;
        let spans = enumerate_spans(n, self.span_head.max_width);
        let span_index: HashMap<Span, usize> = spans.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let k = entity_labels.len();
        let m = relation_labels.len();
        let ent_label: HashMap<&str, usize> = entity_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let rel_label: HashMap<&str, usize> = relation_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let sample = |labels: &Array2<f64>, salt: u64| match mode.sample_seed {
            Some(seed) if cfg.negative_sample_rate < 1.0 => negative_sample(labels, cfg.negative_sample_rate, seed ^ salt),
            _ => Array2::from_elem(labels.dim(), true),
        };

        // entity grid; gold spans outside the scorable set are left unsupervised
        let mut ent_targets = Array2::zeros((spans.len(), k));
        let mut gold_slot: Vec<Option<usize>> = Vec::with_capacity(example.gold_entities.len());
        let mut entity_spans: Vec<usize> = Vec::new();
        for g in &example.gold_entities {
            let idx = span_index.get(&Span { start: g.start, end: g.end }).copied();
            let label = ent_label.get(g.label.as_str()).copied();
            if let (Some(s), Some(t)) = (idx, label) {
                ent_targets[[s, t]] = 1.0;
            }
            // an entity whose type is not in the prompt takes no part in pairs
            gold_slot.push(idx.filter(|_| label.is_some()).map(|s| match entity_spans.iter().position(|&x| x == s) {
                Some(p) => p,
                None => {
                    entity_spans.push(s);
                    entity_spans.len() - 1
                }
            }));
        }
        let span_reps = if spans.is_empty() {
            f.graph.constant(Array2::zeros((0, self.config.encoder.dim)))
        } else {
            self.span_head.span_represent(f, word_reps, &spans)?
        };
        let projected = self.span_head.project_entity_types(f, ent_types);
        let ent_logits = score_entities(f, span_reps, projected);
        let ent_mask = sample(&ent_targets, 0x1);
        let l_ent = entity_loss(f, ent_logits, ent_targets, ent_mask, cfg)?;

        // pair stage runs on gold entities (teacher forcing)
        let e = entity_spans.len();
        let gold_pairs: Vec<(usize, usize, Option<usize>)> = example
            .gold_relations
            .iter()
            .filter_map(|r| {
                let (a, b) = (gold_slot[r.head]?, gold_slot[r.tail]?);
                (a != b).then(|| (a, b, rel_label.get(r.label.as_str()).copied()))
            })
            .collect();
        let mut dropped_pairs = example.gold_relations.len() - gold_pairs.len();
        let zero = f.graph.constant(Array2::zeros((1, 1)));
        let (l_adj, l_rel) = if e < 2 {
            (self.adjacency.as_ref().map(|_| zero), zero)
        } else {
            let s = f.graph.gather_rows(span_reps, &entity_spans);
            let (candidates, l_adj) = match &self.adjacency {
                Some(decoder) => {
                    let out = decoder.forward(f, s);
                    let mut adj_targets = Array2::zeros((e, e));
                    for &(a, b, _) in &gold_pairs {
                        adj_targets[[a, b]] = 1.0;
                        adj_targets[[b, a]] = 1.0;
                    }
                    let mut adj_mask = sample(&adj_targets, 0x2);
                    for i in 0..e {
                        adj_mask[[i, i]] = false;
                    }
                    let l = adjacency_loss(f, out.probs, adj_targets, adj_mask, cfg)?;
                    let masked = apply_pair_mask(f.graph.value(out.probs), &vec![true; e]);
                    (select_pairs(&masked, self.config.pairs.adjacency.threshold), Some(l))
                }
                None => (all_pairs(e), None),
            };
            let pair_row: HashMap<(usize, usize), usize> = candidates.pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
            let mut rel_targets = Array2::zeros((candidates.len(), m));
            for &(a, b, label) in &gold_pairs {
                match (pair_row.get(&(a, b)), label) {
                    (Some(&row), Some(label)) => rel_targets[[row, label]] = 1.0,
                    (None, _) => dropped_pairs += 1,
                    _ => {}
                }
            }
            let rel_logits = self.relation_head.score(f, s, &candidates.pairs, rel_types)?;
            let rel_mask = sample(&rel_targets, 0x3);
            (l_adj, relation_loss(f, rel_logits, rel_targets, rel_mask, cfg)?)
        };
        let total = total_loss(f, l_ent, l_adj, l_rel, cfg);
        Ok(LossVars {
            entity: l_ent,
            adjacency: l_adj,
            relation: l_rel,
            total,
            dropped_pairs,
        })
    }

    fn forward_context(&self, mode: LossMode) -> Forward<'_> {
        match mode.dropout_seed {
            Some(seed) => Forward::training(&self.store, seed),
            None => Forward::new(&self.store),
        }
    }

    fn values(f: &Forward<'_>, v: &LossVars) -> LossValues {
        LossValues {
            entity: f.graph.scalar(v.entity),
            adjacency: v.adjacency.map_or(0.0, |a| f.graph.scalar(a)),
            relation: f.graph.scalar(v.relation),
            total: f.graph.scalar(v.total),
            dropped_pairs: v.dropped_pairs,
        }
    }

    /// Loss components without gradients.
    pub fn loss(&self, example: &AnnotatedExample, schema: &Schema, mode: LossMode) -> Result<LossValues> {
        let mut f = self.forward_context(mode);
        let v = self.build_loss(&mut f, example, &schema.entity_labels, &schema.relation_labels, mode)?;
        Ok(Self::values(&f, &v))
    }

    /// Loss components plus gradients of the weighted total.
    pub fn loss_and_gradients(&self, example: &AnnotatedExample, schema: &Schema, mode: LossMode) -> Result<(LossValues, Gradients)> {
        let mut f = self.forward_context(mode);
        let v = self.build_loss(&mut f, example, &schema.entity_labels, &schema.relation_labels, mode)?;
        f.graph.backward(v.total);
        Ok((Self::values(&f, &v), f.gradients()))
    }

    /// Mean evaluation-mode total loss over a dataset, using the model's own schema.
    pub fn mean_loss(&self, examples: &[AnnotatedExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for ex in examples {
            sum += self.loss(ex, &self.schema, LossMode::EVAL)?.total;
        }
        Ok(sum / examples.len() as f64)
    }

    /// Entities and relations for one text.
    pub fn extract<S: AsRef<str> + Clone>(
        &self,
        words: &[S],
        entity_labels: &[String],
        relation_labels: &[String],
        options: &ExtractOptions,
    ) -> Result<Extraction> {
        let words = truncate_words(words, self.config.encoder.max_words);
        let n = words.len();
        let mut f = Forward::new(&self.store);
        let (word_reps, ent_types, rel_types) = self.encode_views(&mut f, &words, entity_labels, relation_labels)?;
        let spans = enumerate_spans(n, self.span_head.max_width);
        if spans.is_empty() {
            return Ok(Extraction::default());
        }
        let span_reps = self.span_head.span_represent(&mut f, word_reps, &spans)?;
        let projected = self.span_head.project_entity_types(&mut f, ent_types);
        let ent_logits = score_entities(&mut f, span_reps, projected);
        let mut entities = decode_entities(f.graph.value(ent_logits), &spans, options.entity_threshold, options.flat_ner);
        entities.sort_by_key(|e| (e.span.start, e.span.end, e.type_index));

        let mut relations = Vec::new();
        if entities.len() >= 2 && !relation_labels.is_empty() {
            let span_index: HashMap<Span, usize> = spans.iter().enumerate().map(|(i, s)| (*s, i)).collect();
            let rows: Vec<usize> = entities.iter().map(|e| span_index[&e.span]).collect();
            let s = f.graph.gather_rows(span_reps, &rows);
            let candidates: PairCandidateSet = match &self.adjacency {
                Some(decoder) => {
                    let out = decoder.forward(&mut f, s);
                    let masked = apply_pair_mask(f.graph.value(out.probs), &vec![true; entities.len()]);
                    select_pairs(&masked, self.config.pairs.adjacency.threshold)
                }
                None => all_pairs(entities.len()),
            };
            let logits = self.relation_head.score(&mut f, s, &candidates.pairs, rel_types)?;
            relations = decode_relations(f.graph.value(logits), &candidates, &entities, options.relation_threshold);
        }
        Ok(Extraction {
            entities,
            relations,
            word_count: n,
        })
    }

    /// Runs extraction with `prompt` labels and scores predictions under the
    /// matching `report_as` names.
    pub fn evaluate(
        &self,
        examples: &[AnnotatedExample],
        prompt: &Schema,
        report_as: &Schema,
        options: &ExtractOptions,
        check_entity_types: bool,
    ) -> Result<MetricsReport> {
        if prompt.entity_labels.len() != report_as.entity_labels.len() || prompt.relation_labels.len() != report_as.relation_labels.len() {
            return Err(Error::config("prompt and reporting label lists differ in length"));
        }
        let mut ents = Vec::with_capacity(examples.len());
        let mut rels = Vec::with_capacity(examples.len());
        for ex in examples {
            let out = self.extract(&ex.tokens, &prompt.entity_labels, &prompt.relation_labels, options)?;
            let (e, r) = out.mentions(report_as);
            ents.push(e);
            rels.push(r);
        }
        crate::evaluation::evaluate(&ents, &rels, examples, check_entity_types)
    }
}
