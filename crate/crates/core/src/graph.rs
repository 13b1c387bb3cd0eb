//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a leaf
//! created with `requires_grad = true`.
//!
//! Everything is a 2-D matrix. Vectors are `1 × n` rows or `n × 1` columns,
//! scalars are `1 × 1`.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Probability clamp used by the focal-loss node.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
    Reshape(Var),
    Focal(Box<FocalSpec>),
    Translational { head: Var, tail: Var, rel: Var },
}

#[derive(Debug, Clone)]
struct FocalSpec {
    input: Var,
    from_logits: bool,
    targets: Array2<f64>,
    mask: Array2<bool>,
    alpha: f64,
    gamma: f64,
    count: usize,
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients are never propagated into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (n×m) + col (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let value = self.value(a) + self.value(col);
        self.push(value, Op::AddCol(a, col))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(e));
        self.push(value, Op::Powf(a, e))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(value, Op::LayerNormRows(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        self.push(value, Op::Reshape(a))
    }

    /// Mean focal loss over the unmasked cells of `input`.
    ///
    /// `input` holds logits when `from_logits` is set, probabilities otherwise.
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is
    /// zero where the clamp is active. An all-masked grid yields `0`.
    pub fn focal_loss(
        &mut self,
        input: Var,
        from_logits: bool,
        targets: Array2<f64>,
        mask: Array2<bool>,
        alpha: f64,
        gamma: f64,
    ) -> Var {
        let x = self.value(input);
        assert_eq!(x.dim(), targets.dim(), "focal_loss: target shape mismatch");
        assert_eq!(x.dim(), mask.dim(), "focal_loss: mask shape mismatch");
        let mut total = 0.0;
        let mut count = 0usize;
        for ((&xi, &yi), &keep) in x.iter().zip(targets.iter()).zip(mask.iter()) {
            if keep {
                let p = if from_logits { sigmoid(xi) } else { xi };
                total += focal_value(clamp_prob(p), yi, alpha, gamma);
                count += 1;
            }
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        let spec = FocalSpec {
            input,
            from_logits,
            targets,
            mask,
            alpha,
            gamma,
            count,
        };
        self.push(Array2::from_elem((1, 1), mean), Op::Focal(Box::new(spec)))
    }

    /// Batched `-‖h_p + r_m - t_p‖₂` for every pair row `p` and relation row `m`.
    pub fn translational_scores(&mut self, head: Var, tail: Var, rel: Var) -> Var {
        let h = self.value(head);
        let t = self.value(tail);
        let r = self.value(rel);
        let (pairs, relations) = (h.nrows(), r.nrows());
        let mut value = Array2::zeros((pairs, relations));
        for p in 0..pairs {
            for m in 0..relations {
                let mut sq = 0.0;
                for i in 0..h.ncols() {
                    let d = h[[p, i]] + r[[m, i]] - t[[p, i]];
                    sq += d * d;
                }
                value[[p, m]] = -sq.sqrt();
            }
        }
        self.push(value, Op::Translational { head, tail, rel })
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g * val(*b));
                }
                if needs(*b) {
                    accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(a, col) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*col) {
                    accumulate(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g * val(*row));
                }
                if needs(*row) {
                    let prod = g * val(*a);
                    accumulate(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if needs(*a) {
                    accumulate(grads, *a, g * val(*col));
                }
                if needs(*col) {
                    let prod = g * val(*a);
                    accumulate(grads, *col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Powf(a, e) => {
                let d = val(*a).mapv(|x| e * x.powf(e - 1.0));
                accumulate(grads, *a, g * &d);
            }
            Op::Tanh(a) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                accumulate(grads, *a, g * &d);
            }
            Op::Sigmoid(a) => {
                let d = node.value.mapv(|y| y * (1.0 - y));
                accumulate(grads, *a, g * &d);
            }
            Op::Gelu(a) => {
                let d = val(*a).mapv(gelu_grad);
                accumulate(grads, *a, g * &d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                accumulate(grads, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g * y;
                for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&yrow, |d, &yi| *d -= yi * dot);
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut dx = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.sum() / n;
                    let var = xr.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.ncols() {
                        dx[[r, c]] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = val(*p).ncols();
                    if needs(*p) {
                        accumulate(grads, *p, g.slice(s![.., offset..offset + width]).to_owned());
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let height = val(*p).nrows();
                    if needs(*p) {
                        accumulate(grads, *p, g.slice(s![offset..offset + height, ..]).to_owned());
                    }
                    offset += height;
                }
            }
            Op::SliceCols(a, start, len) => {
                let mut dx = Array2::zeros(val(*a).dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(g);
                accumulate(grads, *a, dx);
            }
            Op::GatherRows(a, rows) => {
                let mut dx = Array2::zeros(val(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g.row(i);
                }
                accumulate(grads, *a, dx);
            }
            Op::SumRows(a) => {
                let dx = Array2::from_shape_fn(val(*a).dim(), |(r, _)| g[[r, 0]]);
                accumulate(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let dx = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                accumulate(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let dim = val(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Array2::from_shape_vec(dim, flat).expect("reshape grad"));
            }
            Op::Focal(spec) => {
                let x = val(spec.input);
                let mut dx = Array2::zeros(x.dim());
                if spec.count > 0 {
                    let scale = g[[0, 0]] / spec.count as f64;
                    for (((d, &xi), &yi), &keep) in dx
                        .iter_mut()
                        .zip(x.iter())
                        .zip(spec.targets.iter())
                        .zip(spec.mask.iter())
                    {
                        if !keep {
                            continue;
                        }
                        let p = if spec.from_logits { sigmoid(xi) } else { xi };
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            continue;
                        }
                        let dp = focal_grad_prob(p, yi, spec.alpha, spec.gamma);
                        let dx_dp = if spec.from_logits { p * (1.0 - p) } else { 1.0 };
                        *d = scale * dp * dx_dp;
                    }
                }
                accumulate(grads, spec.input, dx);
            }
            Op::Translational { head, tail, rel } => {
                let (h, t, r) = (val(*head), val(*tail), val(*rel));
                let mut dh: Array2<f64> = Array2::zeros(h.dim());
                let mut dr: Array2<f64> = Array2::zeros(r.dim());
                for p in 0..h.nrows() {
                    for m in 0..r.nrows() {
                        let dist = -node.value[[p, m]];
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = -g[[p, m]] / dist;
                        for i in 0..h.ncols() {
                            let d = coef * (h[[p, i]] + r[[m, i]] - t[[p, i]]);
                            dh[[p, i]] += d;
                            dr[[m, i]] += d;
                        }
                    }
                }
                if needs(*tail) {
                    accumulate(grads, *tail, dh.mapv(|x| -x));
                }
                if needs(*head) {
                    accumulate(grads, *head, dh);
                }
                if needs(*rel) {
                    accumulate(grads, *rel, dr);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::AddCol(a, b)
        | Op::MulRow(a, b)
        | Op::MulCol(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Powf(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Gelu(a)
        | Op::LeakyRelu(a, _)
        | Op::SoftmaxRows(a)
        | Op::LayerNormRows(a, _)
        | Op::SliceCols(a, _, _)
        | Op::GatherRows(a, _)
        | Op::SumRows(a)
        | Op::SumAll(a)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::Focal(spec) => vec![spec.input],
        Op::Translational { head, tail, rel } => vec![*head, *tail, *rel],
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-a (1 - p_t)^γ ln p_t` with `a = α` for positives and `1 - α` for negatives.
pub(crate) fn focal_value(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pt, weight) = if y >= 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    let modulator = if gamma == 0.0 { 1.0 } else { (1.0 - pt).powf(gamma) };
    -weight * modulator * pt.ln()
}

/// d focal / dp (not d/dp_t).
pub(crate) fn focal_grad_prob(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pt, weight, dpt_dp) = if y >= 0.5 {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    // d/dpt [-(1-pt)^γ ln pt] = γ (1-pt)^(γ-1) ln pt - (1-pt)^γ / pt
    let d_dpt = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln() - (1.0 - pt).powf(gamma) / pt
    };
    weight * d_dpt * dpt_dp
}
