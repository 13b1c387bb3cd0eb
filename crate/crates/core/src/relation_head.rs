//! Pair representations, relation scoring and triplet decoding.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Var};
use crate::pair_head::PairCandidateSet;
use crate::params::{Activation, Forward, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::span_head::Entity;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub head: Entity,
    pub tail: Entity,
    /// Positions of head and tail in the decoded entity list.
    pub head_index: usize,
    pub tail_index: usize,
    pub relation_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleScorerKind {
    /// `Linear([s_a; s_b]) · h_r`.
    #[default]
    PairMlp,
    /// `-‖h + r - t‖₂`.
    Translational,
    /// `Σ hᵢ rᵢ tᵢ`.
    Multiplicative,
    /// `Re(Σ hᵢ rᵢ conj(tᵢ))` with the halves of each vector as real and imaginary parts.
    ComplexBilinear,
}

impl TripleScorerKind {
    pub fn validate(self, dim: usize) -> Result<()> {
        if self == TripleScorerKind::ComplexBilinear && dim % 2 != 0 {
            return Err(Error::config(format!("complex_bilinear scorer needs an even dimension, got {dim}")));
        }
        Ok(())
    }
}

/// Single-triple reference scorer on plain vectors.
pub fn triple_score(h: ArrayView1<f64>, r: ArrayView1<f64>, t: ArrayView1<f64>, kind: TripleScorerKind) -> Result<f64> {
    let d = h.len();
    if r.len() != d || t.len() != d {
        return Err(Error::contract("triple_score: dimension mismatch"));
    }
    kind.validate(d)?;
    Ok(match kind {
        TripleScorerKind::Translational => -(&h + &r - &t).mapv(|x| x * x).sum().sqrt(),
        TripleScorerKind::Multiplicative | TripleScorerKind::PairMlp => (&h * &r * &t).sum(),
        TripleScorerKind::ComplexBilinear => {
            let k = d / 2;
            (0..k)
                .map(|i| {
                    let (a, b) = (h[i], h[k + i]);
                    let (c, e) = (r[i], r[k + i]);
                    let (x, y) = (t[i], -t[k + i]);
                    let (re, im) = (a * c - b * e, a * e + b * c);
                    re * x - im * y
                })
                .sum()
        }
    })
}

#[derive(Debug, Clone)]
pub struct RelationHead {
    pub kind: TripleScorerKind,
    pub dropout: f64,
    pair_linear: Option<Linear>,
    activation: Activation,
}

impl RelationHead {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        dim: usize,
        kind: TripleScorerKind,
        activation: Activation,
        dropout: f64,
    ) -> Result<Self> {
        kind.validate(dim)?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config("relation dropout must lie in [0, 1)"));
        }
        let pair_linear = (kind == TripleScorerKind::PairMlp)
            .then(|| Linear::new(store, init, "relation.pair", ParamGroup::Head, 2 * dim, dim));
        Ok(Self {
            kind,
            dropout,
            pair_linear,
            activation,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.pair_linear.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Pair representations for `pairs`, `|pairs| × D`. Only meaningful for `pair_mlp`.
    pub fn pair_represent(&self, f: &mut Forward<'_>, entity_reps: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let linear = self
            .pair_linear
            .ok_or_else(|| Error::contract("pair_represent requires the pair_mlp scorer"))?;
        let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h = f.graph.gather_rows(entity_reps, &heads);
        let t = f.graph.gather_rows(entity_reps, &tails);
        let joined = f.graph.concat_cols(&[h, t]);
        let out = linear.forward(f, joined);
        let out = self.activation.apply(f, out);
        Ok(f.dropout(out, self.dropout))
    }

    /// Logits `|pairs| × M` for every candidate pair against every relation type.
    pub fn score(&self, f: &mut Forward<'_>, entity_reps: Var, pairs: &[(usize, usize)], relation_reps: Var) -> Result<Var> {
        let n = f.graph.shape(entity_reps).0;
        let (m, d) = f.graph.shape(relation_reps);
        if f.graph.shape(entity_reps).1 != d {
            return Err(Error::contract("entity and relation representations differ in width"));
        }
        if let Some(bad) = pairs.iter().find(|(a, b)| a == b || *a >= n || *b >= n) {
            return Err(Error::contract(format!("invalid pair {bad:?} over {n} entities")));
        }
        if pairs.is_empty() || m == 0 {
            return Ok(f.graph.constant(Array2::zeros((pairs.len(), m))));
        }
        if self.kind == TripleScorerKind::PairMlp {
            let reps = self.pair_represent(f, entity_reps, pairs)?;
            return Ok(score_relations(f, reps, relation_reps));
        }
        let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h = f.graph.gather_rows(entity_reps, &heads);
        let t = f.graph.gather_rows(entity_reps, &tails);
        Ok(batched_triple_scores(f, h, relation_reps, t, self.kind))
    }
}

/// `pair_reps · relation_repsᵀ`.
pub fn score_relations(f: &mut Forward<'_>, pair_reps: Var, relation_reps: Var) -> Var {
    let rt = f.graph.transpose(relation_reps);
    f.graph.matmul(pair_reps, rt)
}

/// Batched KG scorers: row `p` of `h`/`t` against every row of `r`, `P × M`.
pub fn batched_triple_scores(f: &mut Forward<'_>, h: Var, r: Var, t: Var, kind: TripleScorerKind) -> Var {
    let g = &mut f.graph;
    match kind {
        TripleScorerKind::Translational => g.translational_scores(h, t, r),
        TripleScorerKind::Multiplicative | TripleScorerKind::PairMlp => {
            let ht = g.mul(h, t);
            let rt = g.transpose(r);
            g.matmul(ht, rt)
        }
        TripleScorerKind::ComplexBilinear => {
            let k = g.shape(h).1 / 2;
            let (hr, hi) = (g.slice_cols(h, 0, k), g.slice_cols(h, k, k));
            let (tr, ti) = (g.slice_cols(t, 0, k), g.slice_cols(t, k, k));
            let (rr, ri) = (g.slice_cols(r, 0, k), g.slice_cols(r, k, k));
            let a = g.mul(hr, tr);
            let b = g.mul(hi, ti);
            let real_coef = g.add(a, b);
            let c = g.mul(hr, ti);
            let d = g.mul(hi, tr);
            let imag_coef = g.sub(c, d);
            let rrt = g.transpose(rr);
            let rit = g.transpose(ri);
            let x = g.matmul(real_coef, rrt);
            let y = g.matmul(imag_coef, rit);
            g.add(x, y)
        }
    }
}

/// Every `(pair, relation)` with `σ(logit) > threshold`, sorted by
/// `(head start, tail start, relation_index)`.
pub fn decode_relations(
    logits: &Array2<f64>,
    pairs: &PairCandidateSet,
    entities: &[Entity],
    threshold: f64,
) -> Vec<RelationTriplet> {
    assert_eq!(logits.nrows(), pairs.len(), "one logit row per pair");
    let mut out = Vec::new();
    for (row, &(a, b)) in logits.rows().into_iter().zip(&pairs.pairs) {
        for (m, &z) in row.iter().enumerate() {
            let p = sigmoid(z);
            if p > threshold {
                out.push(RelationTriplet {
                    head: entities[a],
                    tail: entities[b],
                    head_index: a,
                    tail_index: b,
                    relation_index: m,
                    score: p,
                });
            }
        }
    }
    out.sort_by(|x, y| {
        (x.head.span.start, x.tail.span.start, x.relation_index)
            .cmp(&(y.head.span.start, y.tail.span.start, y.relation_index))
            .then((x.head_index, x.tail_index).cmp(&(y.head_index, y.tail_index)))
    });
    out
}
