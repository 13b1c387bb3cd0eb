//! Span enumeration, span representations, entity-type projection, span × type
//! scoring and greedy entity decoding.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Var};
use crate::params::{Activation, Forward, Init, Linear, ParamGroup, ParamId, ParamStore};

/// Inclusive word range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Overlap without containment: `a < c ≤ b < d` or the mirror case.
    pub fn partially_overlaps(&self, other: &Span) -> bool {
        let (a, b, c, d) = (self.start, self.end, other.start, other.end);
        (a < c && c <= b && b < d) || (c < a && a <= d && d < b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub span: Span,
    pub type_index: usize,
    pub score: f64,
}

/// Every span of width `1..=max_width`, ordered by `(start, end)`.
pub fn enumerate_spans(word_count: usize, max_width: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    for start in 0..word_count {
        for end in start..word_count.min(start + max_width) {
            spans.push(Span { start, end });
        }
    }
    spans
}

/// Span representation and entity-type projection parameters.
#[derive(Debug, Clone)]
pub struct SpanHead {
    pub max_width: usize,
    width_embedding: ParamId,
    hidden: Linear,
    out: Linear,
    type_projection: Linear,
    type_activation: Activation,
}

impl SpanHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        dim: usize,
        max_width: usize,
        type_activation: Activation,
    ) -> Result<Self> {
        if max_width == 0 {
            return Err(Error::config("max span width must be at least 1"));
        }
        let g = ParamGroup::Head;
        let width_embedding = store.register("span.width_embedding", g, init.normal(max_width, dim, 0.5));
        let hidden = Linear::new(store, init, "span.hidden", g, 3 * dim, dim);
        let out = Linear::new(store, init, "span.out", g, dim, dim);
        let type_projection = Linear::new(store, init, "span.type_projection", g, dim, dim);
        Ok(Self {
            max_width,
            width_embedding,
            hidden,
            out,
            type_projection,
            type_activation,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.width_embedding,
            self.hidden.weight,
            self.hidden.bias,
            self.out.weight,
            self.out.bias,
            self.type_projection.weight,
            self.type_projection.bias,
        ]
    }

    pub fn width_embedding(&self) -> ParamId {
        self.width_embedding
    }

    pub fn type_projection(&self) -> Linear {
        self.type_projection
    }

    /// `MLP([h_start; h_end; width_emb(width)])` for every span, `|spans| × D`.
    pub fn span_represent(&self, f: &mut Forward<'_>, word_reps: Var, spans: &[Span]) -> Result<Var> {
        let n = f.graph.shape(word_reps).0;
        if let Some(bad) = spans.iter().find(|s| s.start > s.end || s.end >= n || s.width() > self.max_width) {
            return Err(Error::contract(format!(
                "span {bad:?} invalid for {n} words and max width {}",
                self.max_width
            )));
        }
        let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
        let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
        let widths: Vec<usize> = spans.iter().map(|s| s.width() - 1).collect();
        let start_reps = f.graph.gather_rows(word_reps, &starts);
        let end_reps = f.graph.gather_rows(word_reps, &ends);
        let table = f.p(self.width_embedding);
        let width_reps = f.graph.gather_rows(table, &widths);
        let joined = f.graph.concat_cols(&[start_reps, end_reps, width_reps]);
        let h = self.hidden.forward(f, joined);
        let h = f.graph.gelu(h);
        Ok(self.out.forward(f, h))
    }

    pub fn project_entity_types(&self, f: &mut Forward<'_>, entity_type_reps: Var) -> Var {
        let projected = self.type_projection.forward(f, entity_type_reps);
        self.type_activation.apply(f, projected)
    }
}

/// `span_reps · projected_typesᵀ`.
pub fn score_entities(f: &mut Forward<'_>, span_reps: Var, projected_types: Var) -> Var {
    let t = f.graph.transpose(projected_types);
    f.graph.matmul(span_reps, t)
}

/// Plain-matrix form of [`score_entities`].
pub fn score_entities_matrix(span_reps: &Array2<f64>, projected_types: &Array2<f64>) -> Array2<f64> {
    span_reps.dot(&projected_types.t())
}

fn rank(a: &Entity, b: &Entity) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.span.start.cmp(&b.span.start))
        .then(a.span.end.cmp(&b.span.end))
        .then(a.type_index.cmp(&b.type_index))
}

/// Threshold, keep each span's best type, then accept greedily by score.
///
/// Flat mode rejects any overlap with an accepted span; nested mode rejects only
/// partial overlaps. Output is in acceptance (score-descending) order.
pub fn decode_entities(logits: &Array2<f64>, spans: &[Span], threshold: f64, flat: bool) -> Vec<Entity> {
    assert_eq!(logits.nrows(), spans.len(), "one logit row per span");
    let mut candidates: Vec<Entity> = Vec::new();
    for (row, span) in logits.rows().into_iter().zip(spans) {
        let mut best: Option<Entity> = None;
        for (k, &z) in row.iter().enumerate() {
            let p = sigmoid(z);
            if p <= threshold {
                continue;
            }
            let cand = Entity {
                span: *span,
                type_index: k,
                score: p,
            };
            if best.is_none_or(|b| rank(&cand, &b) == Ordering::Less) {
                best = Some(cand);
            }
        }
        candidates.extend(best);
    }
    candidates.sort_by(rank);
    let mut accepted: Vec<Entity> = Vec::new();
    for cand in candidates {
        let conflict = accepted.iter().any(|a| {
            if flat {
                a.span.overlaps(&cand.span)
            } else {
                a.span.partially_overlaps(&cand.span)
            }
        });
        if !conflict {
            accepted.push(cand);
        }
    }
    accepted
}
