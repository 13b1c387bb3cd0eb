//! Entity-pair construction: exhaustive enumeration or adjacency-guided
//! selection through one of six soft-adjacency decoders.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, Init, Linear, ParamGroup, ParamId, ParamStore};
use crate::span_head::Entity;

/// Ordered candidate pairs over a recognised-entity list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCandidateSet {
    pub pairs: Vec<(usize, usize)>,
    /// Soft adjacency, `|ℰ| × |ℰ|`; absent in all-pairs mode.
    pub adjacency: Option<Array2<f64>>,
    /// `true` for real entities, `false` for padding.
    pub mask: Vec<bool>,
}

impl PairCandidateSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Every ordered pair `(a, b)`, `a ≠ b`, in lexicographic order.
pub fn enumerate_all_pairs(entities: &[Entity]) -> PairCandidateSet {
    all_pairs(entities.len())
}

pub(crate) fn all_pairs(n: usize) -> PairCandidateSet {
    let pairs = (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    PairCandidateSet {
        pairs,
        adjacency: None,
        mask: vec![true; n],
    }
}

/// `Â[a,b] · m_a · m_b`.
pub fn apply_pair_mask(adjacency: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    assert_eq!(adjacency.nrows(), mask.len(), "mask length must match adjacency");
    assert_eq!(adjacency.ncols(), mask.len(), "mask length must match adjacency");
    Array2::from_shape_fn(adjacency.dim(), |(a, b)| {
        if mask[a] && mask[b] {
            adjacency[[a, b]]
        } else {
            0.0
        }
    })
}

/// Pairs `(a, b)`, `a ≠ b`, with `Â[a,b] > threshold`, lexicographic.
pub fn select_pairs(adjacency: &Array2<f64>, threshold: f64) -> PairCandidateSet {
    let n = adjacency.nrows();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && adjacency[[a, b]] > threshold {
                pairs.push((a, b));
            }
        }
    }
    PairCandidateSet {
        pairs,
        adjacency: Some(adjacency.clone()),
        mask: vec![true; n],
    }
}

/// Symmetric GCN normalisation `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn sym_normalize(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let tilde = adjacency + &Array2::<f64>::eye(n);
    let inv_sqrt: Vec<f64> = tilde.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| tilde[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

/// Which soft-adjacency decoder to use, with its resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyDecoderKind {
    /// `σ(s_aᵀ s_b)`, optionally on unit-normalised rows.
    Dot { normalize: bool },
    /// `σ(z_aᵀ z_b)`, `z = W_Pᵀ s`.
    Bilinear { proj_dim: usize },
    /// `σ(MLP([s_a; s_b]))` with one hidden layer.
    Mlp { hidden_dim: usize },
    /// Multi-head attention weights averaged over heads.
    Attention { heads: usize, proj_dim: usize },
    /// Dot adjacency → one normalised graph convolution → dot adjacency.
    Gcn,
    /// Graph-attention refinement, projection, bilinear score.
    Gat { heads: usize, proj_dim: usize },
}

/// Serialized decoder settings; `kind = "none"` disables adjacency-guided selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default = "default_adjacency_threshold")]
    pub threshold: f64,
}

fn default_adjacency_threshold() -> f64 {
    0.5
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            normalize: None,
            proj_dim: None,
            hidden_dim: None,
            heads: None,
            threshold: default_adjacency_threshold(),
        }
    }
}

impl AdjacencyConfig {
    pub fn from_kind(kind: AdjacencyDecoderKind) -> Self {
        let mut c = Self::default();
        match kind {
            AdjacencyDecoderKind::Dot { normalize } => {
                c.kind = "dot".into();
                c.normalize = Some(normalize);
            }
            AdjacencyDecoderKind::Bilinear { proj_dim } => {
                c.kind = "bilinear".into();
                c.proj_dim = Some(proj_dim);
            }
            AdjacencyDecoderKind::Mlp { hidden_dim } => {
                c.kind = "mlp".into();
                c.hidden_dim = Some(hidden_dim);
            }
            AdjacencyDecoderKind::Attention { heads, proj_dim } => {
                c.kind = "attention".into();
                c.heads = Some(heads);
                c.proj_dim = Some(proj_dim);
            }
            AdjacencyDecoderKind::Gcn => c.kind = "gcn".into(),
            AdjacencyDecoderKind::Gat { heads, proj_dim } => {
                c.kind = "gat".into();
                c.heads = Some(heads);
                c.proj_dim = Some(proj_dim);
            }
        }
        c
    }

    /// `Ok(None)` when disabled.
    pub fn resolve(&self) -> Result<Option<AdjacencyDecoderKind>> {
        let need = |v: Option<usize>, what: &str| -> Result<usize> {
            match v {
                Some(x) if x > 0 => Ok(x),
                _ => Err(Error::config(format!("adjacency decoder {:?} requires a positive `{what}`", self.kind))),
            }
        };
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config("adjacency threshold must lie in [0, 1)"));
        }
        let kind = match self.kind.as_str() {
            "none" => return Ok(None),
            "dot" => AdjacencyDecoderKind::Dot {
                normalize: self
                    .normalize
                    .ok_or_else(|| Error::config("adjacency decoder \"dot\" requires `normalize`"))?,
            },
            "bilinear" => AdjacencyDecoderKind::Bilinear {
                proj_dim: need(self.proj_dim, "proj_dim")?,
            },
            "mlp" => AdjacencyDecoderKind::Mlp {
                hidden_dim: need(self.hidden_dim, "hidden_dim")?,
            },
            "attention" => AdjacencyDecoderKind::Attention {
                heads: need(self.heads, "heads")?,
                proj_dim: need(self.proj_dim, "proj_dim")?,
            },
            "gcn" => AdjacencyDecoderKind::Gcn,
            "gat" => AdjacencyDecoderKind::Gat {
                heads: need(self.heads, "heads")?,
                proj_dim: need(self.proj_dim, "proj_dim")?,
            },
            other => return Err(Error::config(format!("unknown adjacency decoder {other:?}"))),
        };
        Ok(Some(kind))
    }
}

#[derive(Debug, Clone)]
enum DecoderParams {
    Dot { normalize: bool },
    Bilinear { proj: ParamId },
    Mlp { head: Linear, tail: ParamId, out: Linear },
    Attention { query: Linear, key: Linear, heads: usize },
    Gcn { conv: Linear },
    Gat { proj: Linear, src: ParamId, dst: ParamId, heads: usize, out: ParamId },
}

/// Soft-adjacency decoder over entity span representations.
#[derive(Debug, Clone)]
pub struct AdjacencyDecoder {
    pub kind: AdjacencyDecoderKind,
    params: DecoderParams,
    ids: Vec<ParamId>,
}

/// Decoder output: probabilities, plus logits for the kinds that have them.
#[derive(Debug, Clone, Copy)]
pub struct AdjacencyOutput {
    pub probs: Var,
    pub logits: Option<Var>,
}

impl AdjacencyDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, kind: AdjacencyDecoderKind) -> Result<Self> {
        let g = ParamGroup::Head;
        let before = store.len();
        let params = match kind {
            AdjacencyDecoderKind::Dot { normalize } => DecoderParams::Dot { normalize },
            AdjacencyDecoderKind::Bilinear { proj_dim } => DecoderParams::Bilinear {
                proj: store.register("adjacency.bilinear.proj", g, init.xavier(dim, proj_dim)),
            },
            AdjacencyDecoderKind::Mlp { hidden_dim } => {
                // first layer split into head and tail halves of W₁ [s_a; s_b]
                let head = Linear::new(store, init, "adjacency.mlp.head", g, dim, hidden_dim);
                let tail = store.register("adjacency.mlp.tail", g, init.xavier(dim, hidden_dim));
                let out = Linear::new(store, init, "adjacency.mlp.out", g, hidden_dim, 1);
                DecoderParams::Mlp { head, tail, out }
            }
            AdjacencyDecoderKind::Attention { heads, proj_dim } => DecoderParams::Attention {
                query: Linear::new(store, init, "adjacency.attention.query", g, dim, heads * proj_dim),
                key: Linear::new(store, init, "adjacency.attention.key", g, dim, heads * proj_dim),
                heads,
            },
            AdjacencyDecoderKind::Gcn => DecoderParams::Gcn {
                conv: Linear::new(store, init, "adjacency.gcn.conv", g, dim, dim),
            },
            AdjacencyDecoderKind::Gat { heads, proj_dim } => DecoderParams::Gat {
                proj: Linear::new(store, init, "adjacency.gat.proj", g, dim, heads * proj_dim),
                src: store.register("adjacency.gat.src", g, init.xavier(proj_dim, heads)),
                dst: store.register("adjacency.gat.dst", g, init.xavier(proj_dim, heads)),
                out: store.register("adjacency.gat.out", g, init.xavier(heads * proj_dim, proj_dim)),
                heads,
            },
        };
        let ids = store.ids().skip(before).collect();
        Ok(Self { kind, params, ids })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.ids.clone()
    }

    /// `|ℰ| × |ℰ|` adjacency in `[0, 1]` from entity representations `s` (`|ℰ| × D`).
    pub fn forward(&self, f: &mut Forward<'_>, s: Var) -> AdjacencyOutput {
        let n = f.graph.shape(s).0;
        let with_logits = |f: &mut Forward<'_>, logits: Var| AdjacencyOutput {
            probs: f.graph.sigmoid(logits),
            logits: Some(logits),
        };
        match &self.params {
            DecoderParams::Dot { normalize } => {
                let s = if *normalize { unit_rows(f, s) } else { s };
                let logits = gram(f, s);
                with_logits(f, logits)
            }
            DecoderParams::Bilinear { proj } => {
                let w = f.p(*proj);
                let z = f.graph.matmul(s, w);
                let logits = gram(f, z);
                with_logits(f, logits)
            }
            DecoderParams::Mlp { head, tail, out } => {
                let a = head.forward(f, s);
                let tw = f.p(*tail);
                let b = f.graph.matmul(s, tw);
                let heads: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, n)).collect();
                let tails: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
                let a = f.graph.gather_rows(a, &heads);
                let b = f.graph.gather_rows(b, &tails);
                let h = f.graph.add(a, b);
                let h = f.graph.gelu(h);
                let flat = out.forward(f, h);
                let logits = f.graph.reshape(flat, n, n);
                with_logits(f, logits)
            }
            DecoderParams::Attention { query, key, heads } => {
                let q = query.forward(f, s);
                let k = key.forward(f, s);
                let width = f.graph.shape(q).1 / heads;
                let mut sum: Option<Var> = None;
                for h in 0..*heads {
                    let qh = f.graph.slice_cols(q, h * width, width);
                    let kh = f.graph.slice_cols(k, h * width, width);
                    let kt = f.graph.transpose(kh);
                    let scores = f.graph.matmul(qh, kt);
                    let scores = f.graph.scale(scores, 1.0 / (width as f64).sqrt());
                    let weights = f.graph.softmax_rows(scores);
                    sum = Some(match sum {
                        Some(acc) => f.graph.add(acc, weights),
                        None => weights,
                    });
                }
                let mean = f.graph.scale(sum.expect("at least one head"), 1.0 / *heads as f64);
                let off_diag = f.graph.constant(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }));
                AdjacencyOutput {
                    probs: f.graph.mul(mean, off_diag),
                    logits: None,
                }
            }
            DecoderParams::Gcn { conv } => {
                let initial = gram(f, s);
                let initial = f.graph.sigmoid(initial);
                let norm = sym_normalize_var(f, initial);
                let msg = f.graph.matmul(norm, s);
                let refined = conv.forward(f, msg);
                let refined = f.graph.gelu(refined);
                let logits = gram(f, refined);
                with_logits(f, logits)
            }
            DecoderParams::Gat {
                proj,
                src,
                dst,
                out,
                heads,
            } => {
                let wh = proj.forward(f, s);
                let width = f.graph.shape(wh).1 / heads;
                let src = f.p(*src);
                let dst = f.p(*dst);
                let mut updated = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let x = f.graph.slice_cols(wh, h * width, width);
                    let a_src = f.graph.slice_cols(src, h, 1);
                    let a_dst = f.graph.slice_cols(dst, h, 1);
                    let e_src = f.graph.matmul(x, a_src);
                    let e_dst = f.graph.matmul(x, a_dst);
                    let e_dst = f.graph.transpose(e_dst);
                    let zero = f.graph.constant(Array2::zeros((n, n)));
                    let e = f.graph.add_col(zero, e_src);
                    let e = f.graph.add_row(e, e_dst);
                    let e = f.graph.leaky_relu(e, 0.2);
                    let alpha = f.graph.softmax_rows(e);
                    updated.push(f.graph.matmul(alpha, x));
                }
                let h = f.graph.concat_cols(&updated);
                let h = f.graph.gelu(h);
                let w_out = f.p(*out);
                let z = f.graph.matmul(h, w_out);
                let logits = gram(f, z);
                with_logits(f, logits)
            }
        }
    }

    /// Plain-matrix evaluation over frozen parameters.
    pub fn scores_matrix(&self, store: &ParamStore, s: &Array2<f64>) -> Array2<f64> {
        let mut f = Forward::new(store);
        let v = f.graph.constant(s.clone());
        let out = self.forward(&mut f, v);
        f.graph.value(out.probs).clone()
    }
}

/// `x xᵀ`.
fn gram(f: &mut Forward<'_>, x: Var) -> Var {
    let t = f.graph.transpose(x);
    f.graph.matmul(x, t)
}

fn unit_rows(f: &mut Forward<'_>, x: Var) -> Var {
    let sq = f.graph.mul(x, x);
    let norms = f.graph.sum_rows(sq);
    let norms = f.graph.add_scalar(norms, 1e-12);
    let inv = f.graph.powf(norms, -0.5);
    f.graph.mul_col(x, inv)
}

fn sym_normalize_var(f: &mut Forward<'_>, a: Var) -> Var {
    let n = f.graph.shape(a).0;
    let eye = f.graph.constant(Array2::eye(n));
    let tilde = f.graph.add(a, eye);
    let deg = f.graph.sum_rows(tilde);
    let inv = f.graph.powf(deg, -0.5);
    let inv_row = f.graph.transpose(inv);
    let left = f.graph.mul_col(tilde, inv);
    f.graph.mul_row(left, inv_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use crate::span_head::Span;
    use proptest::prelude::*;

    fn entities(n: usize) -> Vec<Entity> {
        (0..n)
            .map(|i| Entity {
                span: Span::new(i, i),
                type_index: 0,
                score: 0.9,
            })
            .collect()
    }

    fn all_kinds() -> Vec<AdjacencyDecoderKind> {
        vec![
            AdjacencyDecoderKind::Dot { normalize: false },
            AdjacencyDecoderKind::Dot { normalize: true },
            AdjacencyDecoderKind::Bilinear { proj_dim: 4 },
            AdjacencyDecoderKind::Mlp { hidden_dim: 6 },
            AdjacencyDecoderKind::Attention { heads: 2, proj_dim: 3 },
            AdjacencyDecoderKind::Gcn,
            AdjacencyDecoderKind::Gat { heads: 2, proj_dim: 3 },
        ]
    }

    #[test]
    fn all_pairs_counts_and_order() {
        assert_eq!(enumerate_all_pairs(&entities(4)).len(), 12);
        assert!(enumerate_all_pairs(&entities(1)).is_empty());
        let three = enumerate_all_pairs(&entities(3));
        let mut brute = vec![];
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    brute.push((a, b));
                }
            }
        }
        assert_eq!(three.pairs, brute);
        assert_eq!(three.pairs, [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        assert!(three.adjacency.is_none());
        for n in 0..9 {
            assert_eq!(enumerate_all_pairs(&entities(n)).len(), n * n.saturating_sub(1));
        }
    }

    #[test]
    fn dot_examples() {
        let mut store = ParamStore::new();
        let dec = AdjacencyDecoder::new(&mut store, &mut Init::new(0), 3, AdjacencyDecoderKind::Dot { normalize: false }).unwrap();
        let zeros = Array2::zeros((3, 3));
        assert!(dec.scores_matrix(&store, &zeros).iter().all(|&p| p == 0.5));

        let norm = AdjacencyDecoder::new(&mut store, &mut Init::new(0), 3, AdjacencyDecoderKind::Dot { normalize: true }).unwrap();
        let s = ndarray::array![[1.0, 2.0, -1.0], [2.5, 5.0, -2.5]];
        let a = norm.scores_matrix(&store, &s);
        assert!((a[[0, 1]] - sigmoid(1.0)).abs() < 1e-12);
        assert!((a[[1, 0]] - sigmoid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn every_kind_yields_probabilities_and_symmetric_kinds_are_symmetric() {
        for kind in all_kinds() {
            let mut store = ParamStore::new();
            let dec = AdjacencyDecoder::new(&mut store, &mut Init::new(11), 8, kind).unwrap();
            let s = Init::new(12).normal(5, 8, 0.5);
            let a = dec.scores_matrix(&store, &s);
            assert_eq!(a.dim(), (5, 5));
            assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)), "{kind:?}");
            if matches!(kind, AdjacencyDecoderKind::Dot { .. } | AdjacencyDecoderKind::Bilinear { .. } | AdjacencyDecoderKind::Gcn) {
                for i in 0..5 {
                    for j in 0..5 {
                        assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-12, "{kind:?}");
                    }
                }
            }
            if let AdjacencyDecoderKind::Attention { .. } = kind {
                for i in 0..5 {
                    assert_eq!(a[[i, i]], 0.0);
                    assert!(a.row(i).sum() < 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn mlp_is_asymmetric_for_random_weights() {
        let mut store = ParamStore::new();
        let dec = AdjacencyDecoder::new(&mut store, &mut Init::new(3), 6, AdjacencyDecoderKind::Mlp { hidden_dim: 5 }).unwrap();
        let s = Init::new(4).normal(3, 6, 1.0);
        let a = dec.scores_matrix(&store, &s);
        assert!((a[[0, 1]] - a[[1, 0]]).abs() > 1e-6);
        // brute-force one entry through the two-layer MLP on [s_a; s_b]
        let (hw, hb) = (&store.get(store.id("adjacency.mlp.head.weight").unwrap()).value, &store.get(store.id("adjacency.mlp.head.bias").unwrap()).value);
        let tw = &store.get(store.id("adjacency.mlp.tail").unwrap()).value;
        let (ow, ob) = (&store.get(store.id("adjacency.mlp.out.weight").unwrap()).value, &store.get(store.id("adjacency.mlp.out.bias").unwrap()).value);
        let (x, y) = (0, 2);
        let mut z = ob[[0, 0]];
        for h in 0..5 {
            let mut pre = hb[[0, h]];
            for d in 0..6 {
                pre += s[[x, d]] * hw[[d, h]] + s[[y, d]] * tw[[d, h]];
            }
            z += crate::graph::gelu(pre) * ow[[h, 0]];
        }
        assert!((a[[x, y]] - sigmoid(z)).abs() < 1e-12);
    }

    #[test]
    fn mask_examples() {
        let a = Init::new(1).uniform(4, 4, 1.0).mapv(f64::abs);
        assert_eq!(apply_pair_mask(&a, &[true; 4]), a);
        let m = apply_pair_mask(&a, &[true, false, true, true]);
        assert!(m.row(1).iter().all(|&x| x == 0.0));
        assert!(m.column(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn select_examples() {
        let a = ndarray::array![[0.0, 0.9, 0.2], [0.6, 0.0, 0.4], [0.51, 0.5, 0.0]];
        assert_eq!(select_pairs(&a, 0.5).pairs, [(0, 1), (1, 0), (2, 0)]);
        let pos = Array2::from_elem((3, 3), 0.3);
        assert_eq!(select_pairs(&pos, 0.0).pairs, all_pairs(3).pairs);
        assert!(select_pairs(&a, 1.0).is_empty());
    }

    #[test]
    fn gcn_normalisation_matches_per_entry_formula() {
        for n in 1..=5 {
            let a = Init::new(n as u64).uniform(n, n, 1.0).mapv(f64::abs);
            let norm = sym_normalize(&a);
            for i in 0..n {
                for j in 0..n {
                    let di: f64 = (0..n).map(|k| a[[i, k]] + if i == k { 1.0 } else { 0.0 }).sum();
                    let dj: f64 = (0..n).map(|k| a[[j, k]] + if j == k { 1.0 } else { 0.0 }).sum();
                    let aij = a[[i, j]] + if i == j { 1.0 } else { 0.0 };
                    let expected = aij / (di.sqrt() * dj.sqrt());
                    assert!((norm[[i, j]] - expected).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&norm[[i, j]]));
                }
            }
            let store = ParamStore::new();
            let mut f = Forward::new(&store);
            let v = f.graph.constant(a.clone());
            let via_graph = sym_normalize_var(&mut f, v);
            for (x, y) in f.graph.value(via_graph).iter().zip(norm.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_resolution() {
        for kind in all_kinds() {
            assert_eq!(AdjacencyConfig::from_kind(kind).resolve().unwrap(), Some(kind));
        }
        assert_eq!(AdjacencyConfig::default().resolve().unwrap(), None);
        let missing = AdjacencyConfig {
            kind: "bilinear".into(),
            ..AdjacencyConfig::default()
        };
        assert!(matches!(missing.resolve(), Err(Error::Config(_))));
        let missing = AdjacencyConfig {
            kind: "gat".into(),
            heads: Some(2),
            ..AdjacencyConfig::default()
        };
        assert!(missing.resolve().is_err());
        let unknown = AdjacencyConfig {
            kind: "transformer".into(),
            ..AdjacencyConfig::default()
        };
        assert!(unknown.resolve().is_err());
    }

    fn mask_oracle(a: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
        let mut out = a.clone();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let mi = if mask[i] { 1.0 } else { 0.0 };
                let mj = if mask[j] { 1.0 } else { 0.0 };
                out[[i, j]] = a[[i, j]] * mi * mj;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn mask_and_selection_oracles(
            n in 1usize..=6,
            seed in any::<u64>(),
            mask in prop::collection::vec(any::<bool>(), 6),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let a = Init::new(seed).uniform(n, n, 1.0).mapv(f64::abs);
            let mask = &mask[..n];
            let masked = apply_pair_mask(&a, mask);
            prop_assert_eq!(&masked, &mask_oracle(&a, mask));

            let mut brute = vec![];
            for i in 0..n {
                for j in 0..n {
                    if i != j && masked[[i, j]] > t1 {
                        brute.push((i, j));
                    }
                }
            }
            let sel = select_pairs(&masked, t1);
            prop_assert_eq!(&sel.pairs, &brute);
            prop_assert!(sel.pairs.iter().all(|(x, y)| x != y));

            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let low = select_pairs(&masked, lo).pairs;
            let high = select_pairs(&masked, hi).pairs;
            prop_assert!(high.iter().all(|p| low.contains(p)));
        }

        #[test]
        fn symmetric_decoders_on_any_representations(seed in any::<u64>(), n in 1usize..=5) {
            let s = Init::new(seed).normal(n, 6, 1.0);
            for kind in [AdjacencyDecoderKind::Dot { normalize: false }, AdjacencyDecoderKind::Dot { normalize: true }, AdjacencyDecoderKind::Bilinear { proj_dim: 3 }] {
                let mut store = ParamStore::new();
                let dec = AdjacencyDecoder::new(&mut store, &mut Init::new(seed ^ 1), 6, kind).unwrap();
                let a = dec.scores_matrix(&store, &s);
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
