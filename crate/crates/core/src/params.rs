//! Named trainable tensors and the forward-pass context that binds them to a tape.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};

/// Optimisation group a parameter belongs to; each group gets its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The shared backbone (token embeddings and transformer layers).
    Encoder,
    /// Task-specific layers: BiLSTM, span, pair and relation heads.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.scaled_add(scale, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    /// Inference mode: dropout disabled.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training mode: dropout enabled with a seeded mask generator.
    pub fn training(store: &'a ParamStore, seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.graph.param(self.store.get(id).value.clone());
        self.bound.insert(id, v);
        v
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let dim = self.graph.shape(x);
        let mask = Array2::from_shape_fn(dim, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    /// Copies the gradients of every bound parameter into a [`Gradients`] buffer.
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::zeros_like(self.store);
        for (id, var) in &self.bound {
            if let Some(g) = self.graph.grad(*var) {
                out.grads[id.0].assign(g);
            }
        }
        out
    }
}

/// Parameter initialisation helper with a deterministic stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng))
    }

    /// Glorot-uniform.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Array2<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_simple_fn((fan_in, fan_out), || self.rng.random_range(-limit..limit))
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-limit..limit))
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), group, init.xavier(fan_in, fan_out));
        let bias = store.register(format!("{name}.bias"), group, Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Var {
        let w = f.p(self.weight);
        let b = f.p(self.bias);
        let xw = f.graph.matmul(x, w);
        f.graph.add_row(xw, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.nrows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.ncols()
    }
}

/// Row-wise layer normalisation with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), group, Array2::ones((1, dim)));
        let shift = store.register(format!("{name}.shift"), group, Array2::zeros((1, dim)));
        Self { gain, shift }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Var {
        let gain = f.p(self.gain);
        let shift = f.p(self.shift);
        let n = f.graph.layer_norm_rows(x, 1e-5);
        let n = f.graph.mul_row(n, gain);
        f.graph.add_row(n, shift)
    }
}

/// Pointwise nonlinearity choice for configurable layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, f: &mut Forward<'_>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Gelu => f.graph.gelu(x),
            Activation::Tanh => f.graph.tanh(x),
        }
    }
}
