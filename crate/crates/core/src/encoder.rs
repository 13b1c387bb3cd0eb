//! Shared bidirectional encoder, subword aggregation and BiLSTM refinement.
//!
//! The encoder is pluggable through [`EncoderBackend`]. The crate ships
//! [`ToyEncoder`], a small trainable transformer used at desk scale; a
//! pretrained backbone can be slotted in behind the same trait.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::prompt::{PromptLayout, TokenUnit};

pub const ENT_ID: usize = 0;
pub const REL_ID: usize = 1;
pub const SEP_ID: usize = 2;
const SPECIAL_COUNT: usize = 3;
const PIECE_CHARS: usize = 3;

/// How text-word vectors are pooled from their subwords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    First,
    Mean,
}

/// Word-level vocabulary with a hashed character-piece fallback.
///
/// Words seen at least `min_freq` times get their own id. Every other word is
/// cut into chunks of three characters, each hashed into one of
/// `hash_buckets` shared piece ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocab {
    words: Vec<String>,
    hash_buckets: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabData {
    words: Vec<String>,
    hash_buckets: usize,
}

impl From<VocabData> for Vocab {
    fn from(d: VocabData) -> Self {
        Vocab::from_words(d.words, d.hash_buckets.max(1))
    }
}

impl From<Vocab> for VocabData {
    fn from(v: Vocab) -> Self {
        VocabData {
            words: v.words,
            hash_buckets: v.hash_buckets,
        }
    }
}

impl Vocab {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, min_freq: usize, hash_buckets: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut kept: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .map(|(w, _)| w.to_owned())
            .collect();
        kept.sort();
        Self::from_words(kept, hash_buckets)
    }

    pub fn from_words(words: Vec<String>, hash_buckets: usize) -> Self {
        assert!(hash_buckets > 0, "at least one hash bucket is required");
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words,
            hash_buckets,
            index,
        }
    }

    pub fn size(&self) -> usize {
        SPECIAL_COUNT + self.words.len() + self.hash_buckets
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn segment_word(&self, word: &str) -> Vec<usize> {
        if let Some(&i) = self.index.get(word) {
            return vec![SPECIAL_COUNT + i];
        }
        let chars: Vec<char> = word.chars().collect();
        let base = SPECIAL_COUNT + self.words.len();
        if chars.is_empty() {
            return vec![base];
        }
        chars
            .chunks(PIECE_CHARS)
            .enumerate()
            .map(|(i, chunk)| {
                let marker = if i == 0 { '^' } else { '#' };
                let piece: String = std::iter::once(marker).chain(chunk.iter().copied()).collect();
                base + (fnv1a(piece.as_bytes()) % self.hash_buckets as u64) as usize
            })
            .collect()
    }

    pub fn segment(&self, unit: &TokenUnit) -> Vec<usize> {
        match unit {
            TokenUnit::EntDelimiter => vec![ENT_ID],
            TokenUnit::RelDelimiter => vec![REL_ID],
            TokenUnit::Separator => vec![SEP_ID],
            TokenUnit::LabelWord(w) | TokenUnit::TextWord(w) => self.segment_word(w),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Subword ids for a layout plus the token → subword index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordLayout {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// First subword index of each token unit.
    pub starts: Vec<usize>,
    /// Subword count of each token unit.
    pub lengths: Vec<usize>,
}

impl SubwordLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Behavioural contract for the shared encoder.
pub trait EncoderBackend: Send + Sync {
    /// Hidden size of every output row.
    fn dim(&self) -> usize;

    /// Subword ids for one token unit. Delimiters must map to a single id.
    fn segment(&self, unit: &TokenUnit) -> Vec<usize>;

    /// Per-subword hidden vectors, `ids.len() × dim`.
    fn forward(&self, f: &mut Forward<'_>, ids: &[usize], segments: &[usize]) -> Result<Var>;

    /// Parameters owned by the backend (all in [`ParamGroup::Encoder`]).
    fn params(&self) -> Vec<ParamId>;

    fn layout(&self, layout: &PromptLayout) -> SubwordLayout {
        let token_segments = layout.segments();
        let mut out = SubwordLayout {
            ids: vec![],
            segments: vec![],
            starts: vec![],
            lengths: vec![],
        };
        for (unit, seg) in layout.tokens.iter().zip(token_segments) {
            let pieces = self.segment(unit);
            out.starts.push(out.ids.len());
            out.lengths.push(pieces.len());
            out.segments.extend(std::iter::repeat_n(seg, pieces.len()));
            out.ids.extend(pieces);
        }
        out
    }
}

/// Runs the backend over a prompt layout.
pub fn encode(backend: &dyn EncoderBackend, f: &mut Forward<'_>, layout: &PromptLayout) -> Result<(Var, SubwordLayout)> {
    let sub = backend.layout(layout);
    let hidden = backend.forward(f, &sub.ids, &sub.segments)?;
    let (rows, cols) = f.graph.shape(hidden);
    if rows != sub.len() || cols != backend.dim() {
        return Err(Error::Encoder(format!(
            "backend returned {rows}×{cols}, expected {}×{}",
            sub.len(),
            backend.dim()
        )));
    }
    if !f.graph.value(hidden).iter().all(|x| x.is_finite()) {
        return Err(Error::Encoder("backend produced non-finite activations".into()));
    }
    Ok((hidden, sub))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Small pre-norm transformer encoder with learned token and segment embeddings
/// and fixed sinusoidal positions.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    pub vocab: Vocab,
    token_embedding: ParamId,
    segment_embedding: ParamId,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig, vocab: Vocab, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        if config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} must be a positive multiple of heads {}",
                config.dim, config.heads
            )));
        }
        let g = ParamGroup::Encoder;
        let d = config.dim;
        let token_embedding = store.register("encoder.token_embedding", g, init.normal(vocab.size(), d, 1.0));
        let segment_embedding = store.register("encoder.segment_embedding", g, init.normal(3, d, 0.5));
        let layers = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("encoder.layer{l}.{s}");
                TransformerLayer {
                    attn_norm: LayerNorm::new(store, &n("attn_norm"), g, d),
                    query: Linear::new(store, init, &n("query"), g, d, d),
                    key: Linear::new(store, init, &n("key"), g, d, d),
                    value: Linear::new(store, init, &n("value"), g, d, d),
                    output: Linear::new(store, init, &n("output"), g, d, d),
                    ffn_norm: LayerNorm::new(store, &n("ffn_norm"), g, d),
                    ffn_in: Linear::new(store, init, &n("ffn_in"), g, d, d * config.ffn_mult),
                    ffn_out: Linear::new(store, init, &n("ffn_out"), g, d * config.ffn_mult, d),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "encoder.final_norm", g, d);
        Ok(Self {
            config,
            vocab,
            token_embedding,
            segment_embedding,
            layers,
            final_norm,
        })
    }

    fn self_attention(&self, f: &mut Forward<'_>, layer: &TransformerLayer, x: Var) -> Var {
        let q = layer.query.forward(f, x);
        let k = layer.key.forward(f, x);
        let v = layer.value.forward(f, x);
        let head_dim = self.config.dim / self.config.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = f.graph.slice_cols(q, h * head_dim, head_dim);
            let kh = f.graph.slice_cols(k, h * head_dim, head_dim);
            let vh = f.graph.slice_cols(v, h * head_dim, head_dim);
            let kt = f.graph.transpose(kh);
            let scores = f.graph.matmul(qh, kt);
            let scores = f.graph.scale(scores, scale);
            let weights = f.graph.softmax_rows(scores);
            outs.push(f.graph.matmul(weights, vh));
        }
        let joined = f.graph.concat_cols(&outs);
        layer.output.forward(f, joined)
    }
}

impl EncoderBackend for ToyEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn segment(&self, unit: &TokenUnit) -> Vec<usize> {
        self.vocab.segment(unit)
    }

    fn forward(&self, f: &mut Forward<'_>, ids: &[usize], segments: &[usize]) -> Result<Var> {
        if ids.len() != segments.len() {
            return Err(Error::Encoder("ids and segments differ in length".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab.size()) {
            return Err(Error::Encoder(format!("token id {bad} outside vocabulary")));
        }
        let table = f.p(self.token_embedding);
        let seg_table = f.p(self.segment_embedding);
        let tok = f.graph.gather_rows(table, ids);
        let seg = f.graph.gather_rows(seg_table, segments);
        let pos = f.graph.constant(sinusoidal_positions(ids.len(), self.config.dim));
        let x = f.graph.add(tok, seg);
        let mut x = f.graph.add(x, pos);
        for layer in &self.layers {
            let normed = layer.attn_norm.forward(f, x);
            let attn = self.self_attention(f, layer, normed);
            x = f.graph.add(x, attn);
            let normed = layer.ffn_norm.forward(f, x);
            let hidden = layer.ffn_in.forward(f, normed);
            let hidden = f.graph.gelu(hidden);
            let out = layer.ffn_out.forward(f, hidden);
            x = f.graph.add(x, out);
        }
        Ok(self.final_norm.forward(f, x))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.segment_embedding];
        for l in &self.layers {
            ids.extend([l.attn_norm.gain, l.attn_norm.shift, l.ffn_norm.gain, l.ffn_norm.shift]);
            for lin in [l.query, l.key, l.value, l.output, l.ffn_in, l.ffn_out] {
                ids.extend([lin.weight, lin.bias]);
            }
        }
        ids.extend([self.final_norm.gain, self.final_norm.shift]);
        ids
    }
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Word, entity-type and relation-type representations pulled out of the encoder output.
#[derive(Debug, Clone, Copy)]
pub struct EncodedViews {
    pub word_reps: Var,
    pub entity_type_reps: Var,
    pub relation_type_reps: Var,
}

/// Pools subwords into text words and picks delimiter rows as label embeddings.
pub fn aggregate_subwords(
    f: &mut Forward<'_>,
    hidden: Var,
    layout: &PromptLayout,
    sub: &SubwordLayout,
    mode: Aggregation,
) -> Result<EncodedViews> {
    let (rows, _) = f.graph.shape(hidden);
    if rows != sub.len() || sub.starts.len() != layout.tokens.len() {
        return Err(Error::contract(format!(
            "hidden has {rows} rows but layout has {} subwords over {} tokens",
            sub.len(),
            layout.tokens.len()
        )));
    }
    let text = layout.text_start..layout.text_start + layout.word_count;
    let word_reps = match mode {
        Aggregation::First => {
            let idx: Vec<usize> = text.map(|t| sub.starts[t]).collect();
            f.graph.gather_rows(hidden, &idx)
        }
        Aggregation::Mean => {
            let mut pool = Array2::zeros((layout.word_count, rows));
            for (w, t) in text.enumerate() {
                let len = sub.lengths[t];
                for s in sub.starts[t]..sub.starts[t] + len {
                    pool[[w, s]] = 1.0 / len as f64;
                }
            }
            let pool = f.graph.constant(pool);
            f.graph.matmul(pool, hidden)
        }
    };
    let pick = |positions: &[usize]| -> Vec<usize> { positions.iter().map(|&p| sub.starts[p]).collect() };
    let entity_type_reps = f.graph.gather_rows(hidden, &pick(&layout.ent_delimiter_positions));
    let relation_type_reps = f.graph.gather_rows(hidden, &pick(&layout.rel_delimiter_positions));
    Ok(EncodedViews {
        word_reps,
        entity_type_reps,
        relation_type_reps,
    })
}

#[derive(Debug, Clone, Copy)]
struct LstmDirection {
    input: Linear,
    recurrent: ParamId,
}

/// Bidirectional LSTM with `dim / 2` units per direction so the output width stays `dim`.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    forward_dir: LstmDirection,
    backward_dir: LstmDirection,
    hidden: usize,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::config(format!("BiLSTM width {dim} must be even")));
        }
        let hidden = dim / 2;
        let mut direction = |tag: &str| {
            let input = Linear::new(store, init, &format!("{name}.{tag}.input"), ParamGroup::Head, dim, 4 * hidden);
            // forget-gate bias starts at 1
            store
                .get_mut(input.bias)
                .value
                .slice_mut(ndarray::s![.., hidden..2 * hidden])
                .fill(1.0);
            let recurrent = store.register(
                format!("{name}.{tag}.recurrent"),
                ParamGroup::Head,
                init.xavier(hidden, 4 * hidden),
            );
            LstmDirection { input, recurrent }
        };
        let forward_dir = direction("fwd");
        let backward_dir = direction("bwd");
        Ok(Self {
            forward_dir,
            backward_dir,
            hidden,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.forward_dir, self.backward_dir]
            .iter()
            .flat_map(|d| [d.input.weight, d.input.bias, d.recurrent])
            .collect()
    }

    fn run(&self, f: &mut Forward<'_>, dir: &LstmDirection, x: Var, order: &[usize]) -> Vec<Var> {
        let h_dim = self.hidden;
        let projected = dir.input.forward(f, x);
        let w_hh = f.p(dir.recurrent);
        let mut h = f.graph.constant(Array2::zeros((1, h_dim)));
        let mut c = f.graph.constant(Array2::zeros((1, h_dim)));
        let mut outputs = vec![h; order.len()];
        for &t in order {
            let xt = f.graph.gather_rows(projected, &[t]);
            let rec = f.graph.matmul(h, w_hh);
            let gates = f.graph.add(xt, rec);
            let i = f.graph.slice_cols(gates, 0, h_dim);
            let fg = f.graph.slice_cols(gates, h_dim, h_dim);
            let g = f.graph.slice_cols(gates, 2 * h_dim, h_dim);
            let o = f.graph.slice_cols(gates, 3 * h_dim, h_dim);
            let i = f.graph.sigmoid(i);
            let fg = f.graph.sigmoid(fg);
            let g = f.graph.tanh(g);
            let o = f.graph.sigmoid(o);
            let keep = f.graph.mul(fg, c);
            let write = f.graph.mul(i, g);
            c = f.graph.add(keep, write);
            let squashed = f.graph.tanh(c);
            h = f.graph.mul(o, squashed);
            outputs[t] = h;
        }
        outputs
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Var {
        let n = f.graph.shape(x).0;
        if n == 0 {
            return x;
        }
        let order: Vec<usize> = (0..n).collect();
        let reversed: Vec<usize> = (0..n).rev().collect();
        let fwd = self.run(f, &self.forward_dir, x, &order);
        let bwd = self.run(f, &self.backward_dir, x, &reversed);
        let fwd = f.graph.concat_rows(&fwd);
        let bwd = f.graph.concat_rows(&bwd);
        f.graph.concat_cols(&[fwd, bwd])
    }
}

/// Optional BiLSTM pass; `None` leaves the word vectors untouched.
pub fn bilstm_refine(f: &mut Forward<'_>, word_reps: Var, lstm: Option<&BiLstm>) -> Var {
    match lstm {
        Some(l) => l.forward(f, word_reps),
        None => word_reps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::build_prompt;

    fn toy(dim: usize, words: &[&str]) -> (ParamStore, ToyEncoder) {
        let mut store = ParamStore::new();
        let vocab = Vocab::build(words.iter().copied(), 1, 16);
        let cfg = ToyEncoderConfig {
            dim,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
        };
        let enc = ToyEncoder::new(cfg, vocab, &mut store, &mut Init::new(1)).unwrap();
        (store, enc)
    }

    #[test]
    fn vocab_splits_unknown_words_into_pieces() {
        let vocab = Vocab::build(["alpha", "alpha", "beta"], 2, 32);
        assert_eq!(vocab.segment_word("alpha").len(), 1);
        assert!(!vocab.contains("beta"));
        assert_eq!(vocab.segment_word("beta").len(), 2);
        assert_eq!(vocab.segment_word("abcdefghi").len(), 3);
        assert_eq!(vocab.segment_word("zeta"), vocab.segment_word("zeta"));
        let base = SPECIAL_COUNT + vocab.word_count();
        assert!(vocab.segment_word("whatever").iter().all(|&i| i >= base && i < vocab.size()));
    }

    #[test]
    fn encode_shape_counts_every_subword() {
        let (store, enc) = toy(16, &["person", "Alice", "works", "here", "born", "in"]);
        // "abcdefghi" is unknown: 9 chars → 3 pieces
        let layout = build_prompt(&["person", "abcdefghi"], &["born in"], &["Alice", "works", "here"]).unwrap();
        let mut f = Forward::new(&store);
        let (hidden, sub) = encode(&enc, &mut f, &layout).unwrap();
        let expected: usize = layout.tokens.iter().map(|t| enc.vocab.segment(t).len()).sum();
        assert_eq!(sub.len(), expected);
        assert_eq!(f.graph.shape(hidden), (expected, 16));
        assert_eq!(sub.lengths[3], 3);
    }

    #[test]
    fn eight_token_layout_with_nine_subwords() {
        let (store, enc) = toy(16, &["a", "b", "c", "d", "e"]);
        // [ENT] a [REL] b [SEP] c d xyzw → 8 tokens, "xyzw" is 2 pieces
        let layout = build_prompt(&["a"], &["b"], &["c", "d", "xyzw"]).unwrap();
        assert_eq!(layout.tokens.len(), 8);
        let mut f = Forward::new(&store);
        let (hidden, _) = encode(&enc, &mut f, &layout).unwrap();
        assert_eq!(f.graph.shape(hidden), (9, 16));
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, enc) = toy(16, &["x", "y"]);
        let layout = build_prompt(&["x"], &["y"], &["x", "y", "x"]).unwrap();
        let run = || {
            let mut f = Forward::new(&store);
            let (h, _) = encode(&enc, &mut f, &layout).unwrap();
            f.graph.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn aggregation_modes() {
        let store = ParamStore::new();
        let layout = build_prompt(&["t"], &["r"], &["w0", "w1"]).unwrap();
        // [ENT] t [REL] r [SEP] w0 w1 with w1 split into two subwords
        let sub = SubwordLayout {
            ids: vec![0; 8],
            segments: vec![0; 8],
            starts: vec![0, 1, 2, 3, 4, 5, 6],
            lengths: vec![1, 1, 1, 1, 1, 1, 2],
        };
        let hidden = Array2::from_shape_fn((8, 2), |(r, c)| (r * 10 + c) as f64);
        for (mode, expected_w1) in [(Aggregation::First, [60.0, 61.0]), (Aggregation::Mean, [65.0, 66.0])] {
            let mut f = Forward::new(&store);
            let h = f.graph.constant(hidden.clone());
            let views = aggregate_subwords(&mut f, h, &layout, &sub, mode).unwrap();
            let words = f.graph.value(views.word_reps);
            assert_eq!(words.row(0).to_vec(), [50.0, 51.0]);
            assert_eq!(words.row(1).to_vec(), expected_w1);
            assert_eq!(f.graph.value(views.entity_type_reps).row(0).to_vec(), [0.0, 1.0]);
            assert_eq!(f.graph.value(views.relation_type_reps).row(0).to_vec(), [20.0, 21.0]);
        }
    }

    #[test]
    fn views_are_exact_delimiter_rows() {
        let (store, enc) = toy(8, &["a", "b"]);
        let layout = build_prompt(&["a", "qqqqqq", "b"], &["b a", "zzzz"], &["a", "longerword", "b"]).unwrap();
        let mut f = Forward::new(&store);
        let (hidden, sub) = encode(&enc, &mut f, &layout).unwrap();
        let views = aggregate_subwords(&mut f, hidden, &layout, &sub, Aggregation::First).unwrap();
        // brute-force: walk tokens and count subwords to find each delimiter row
        let mut offset = 0;
        let mut ent_rows = vec![];
        let mut rel_rows = vec![];
        for t in &layout.tokens {
            match t {
                TokenUnit::EntDelimiter => ent_rows.push(offset),
                TokenUnit::RelDelimiter => rel_rows.push(offset),
                _ => {}
            }
            offset += enc.vocab.segment(t).len();
        }
        let h = f.graph.value(hidden).clone();
        let e = f.graph.value(views.entity_type_reps);
        for (k, &r) in ent_rows.iter().enumerate() {
            assert_eq!(e.row(k), h.row(r));
        }
        let rr = f.graph.value(views.relation_type_reps);
        for (m, &r) in rel_rows.iter().enumerate() {
            assert_eq!(rr.row(m), h.row(r));
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let store = ParamStore::new();
        let layout = build_prompt(&["t"], &[] as &[&str], &["w"]).unwrap();
        let sub = SubwordLayout {
            ids: vec![0; 4],
            segments: vec![0; 4],
            starts: vec![0, 1, 2, 3],
            lengths: vec![1; 4],
        };
        let mut f = Forward::new(&store);
        let h = f.graph.constant(Array2::zeros((5, 2)));
        assert!(matches!(
            aggregate_subwords(&mut f, h, &layout, &sub, Aggregation::First),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilstm_shapes_and_passthrough() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, &mut Init::new(4), "lstm", 6).unwrap();
        let x = Init::new(5).normal(4, 6, 1.0);
        let mut f = Forward::new(&store);
        let xv = f.graph.constant(x.clone());
        assert_eq!(bilstm_refine(&mut f, xv, None), xv);
        assert_eq!(f.graph.value(xv), &x);
        let y = bilstm_refine(&mut f, xv, Some(&lstm));
        assert_eq!(f.graph.shape(y), (4, 6));
        let empty = f.graph.constant(Array2::zeros((0, 6)));
        let y0 = bilstm_refine(&mut f, empty, Some(&lstm));
        assert_eq!(f.graph.shape(y0), (0, 6));

        let again = {
            let mut g = Forward::new(&store);
            let xv = g.graph.constant(x.clone());
            let y = lstm.forward(&mut g, xv);
            g.graph.value(y).clone()
        };
        assert_eq!(f.graph.value(y), &again);
    }

    #[test]
    fn bilstm_directions_see_opposite_context() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, &mut Init::new(4), "lstm", 4).unwrap();
        let x = Init::new(5).normal(3, 4, 1.0);
        let mut x2 = x.clone();
        x2[[2, 0]] += 1.0; // perturb the last step only
        let run = |input: &Array2<f64>| {
            let mut f = Forward::new(&store);
            let v = f.graph.constant(input.clone());
            let y = lstm.forward(&mut f, v);
            f.graph.value(y).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        // forward half of step 0 cannot see step 2, backward half can
        assert_eq!(a.row(0).slice(ndarray::s![..2]), b.row(0).slice(ndarray::s![..2]));
        assert_ne!(a.row(0).slice(ndarray::s![2..]), b.row(0).slice(ndarray::s![2..]));
    }
}
