//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in exact reverse order and accumulates vector-Jacobian
//! products into per-node gradient slots. Parameters are loaded as borrowed
//! leaves so a forward pass never copies weights.

use std::borrow::Cow;

use log::warn;

use super::matrix::Matrix;
use super::params::{ParamGrads, ParamSet, ParamVars};
use crate::error::{Error, Result};

/// Probability floor used by the logistic loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatVec { x: Var, w: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Dot(Var, Var),
    Cosine(Var, Var),
    WeightedMean { inputs: Vec<Var>, weights: Vec<f64>, total: f64 },
    SoftmaxCrossEntropy { logits: Var, target: usize },
    LogisticLoss { z: Var, accept: bool },
    /// `acts` caches `[i; f; o; g; tanh(c)]`.
    LstmCell { z: Var, c_prev: Var, acts: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn borrowed(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Loads every parameter of `params` as a borrowed leaf.
    pub fn load_params(&mut self, params: &'a ParamSet) -> ParamVars {
        ParamVars::new(params.values().map(|m| self.borrowed(m)).collect())
    }

    fn require_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let m = self.value(v);
        if m.cols() != 1 {
            return Err(Error::dim(op, format!("expected a column vector, got {}x{}", m.rows(), m.cols())));
        }
        Ok(m.rows())
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `w * x + b` for column vector `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.require_vector("affine", x)?;
        let (m, wn) = self.value(w).shape();
        if wn != n || self.value(b).shape() != (m, 1) {
            return Err(Error::dim(
                "affine",
                format!("x: {n}, W: {m}x{wn}, b: {:?}", self.value(b).shape()),
            ));
        }
        let mut out = self.value(w).matvec(self.value(x).data())?;
        for (o, bi) in out.iter_mut().zip(self.value(b).data()) {
            *o += bi;
        }
        Ok(self.push_owned(Matrix::column(out), Op::Affine { x, w, b }))
    }

    /// `w * x` for column vector `x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.require_vector("matvec", x)?;
        let out = self.value(w).matvec(self.value(x).data())?;
        Ok(self.push_owned(Matrix::column(out), Op::MatVec { x, w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_owned(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push_owned(out, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push_owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push_owned(out, Op::Scale(x, factor))
    }

    /// Stacks column vectors vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            self.require_vector("concat", p)?;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_owned(Matrix::column(data), Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start + len` of a column vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.require_vector("slice", x)?;
        if start + len > n {
            return Err(Error::dim("slice", format!("{start}+{len} exceeds length {n}")));
        }
        let out = Matrix::column(self.value(x).data()[start..start + len].to_vec());
        Ok(self.push_owned(out, Op::Slice { x, start }))
    }

    /// Column vector of `x`'s flat entries at `indices` (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather", format!("index {bad} out of {}", src.len())));
        }
        let out = Matrix::column(indices.iter().map(|&i| src[i]).collect());
        Ok(self.push_owned(out, Op::Gather { x, indices }))
    }

    /// Matrix made of the listed rows of `x`, in order.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let m = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m.rows()) {
            return Err(Error::dim("select_rows", format!("row {bad} out of {}", m.rows())));
        }
        let mut data = Vec::with_capacity(rows.len() * m.cols());
        for &r in &rows {
            data.extend_from_slice(m.row(r));
        }
        let out = Matrix::from_vec(rows.len(), m.cols(), data)?;
        Ok(self.push_owned(out, Op::SelectRows { x, rows }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_owned(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("dot", a, b)?;
        let s = self.value(a).dot(self.value(b));
        Ok(self.push_owned(Matrix::scalar(s), Op::Dot(a, b)))
    }

    /// Cosine similarity of two vectors, as a `1 x 1` node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.norm(), vb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
        }
        let s = va.dot(vb) / (na * nb);
        Ok(self.push_owned(Matrix::scalar(s), Op::Cosine(a, b)))
    }

    /// `sum_i w_i x_i / sum_i w_i`. Entries with weight 0 are skipped in the
    /// forward sum and receive no gradient.
    pub fn weighted_mean(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        if inputs.len() != weights.len() || inputs.is_empty() {
            return Err(Error::dim(
                "weighted_mean",
                format!("{} inputs, {} weights", inputs.len(), weights.len()),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract("weighted_mean weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().filter(|&&w| w != 0.0).sum();
        if total == 0.0 {
            return Err(Error::Degenerate("all weights are zero".into()));
        }
        let shape = self.value(inputs[0]).shape();
        let mut acc = Matrix::zeros(shape.0, shape.1);
        for (&x, &w) in inputs.iter().zip(weights) {
            if self.value(x).shape() != shape {
                return Err(Error::dim("weighted_mean", format!("{:?} vs {shape:?}", self.value(x).shape())));
            }
            if w != 0.0 {
                acc.scaled_add_assign(w, self.value(x));
            }
        }
        acc.scale(1.0 / total);
        let op = Op::WeightedMean { inputs: inputs.to_vec(), weights: weights.to_vec(), total };
        Ok(self.push_owned(acc, op))
    }

    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        self.weighted_mean(inputs, &vec![1.0; inputs.len()])
    }

    /// `-log softmax(logits)[target]`, computed with max-logit subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let k = self.require_vector("softmax_cross_entropy", logits)?;
        if target >= k {
            return Err(Error::Contract(format!("target index {target} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        Ok(self.push_owned(Matrix::scalar(loss), Op::SoftmaxCrossEntropy { logits, target }))
    }

    /// `-log p(target)` for `p(accept) = sigmoid(z)`.
    pub fn logistic_loss(&mut self, z: Var, accept: bool) -> Result<Var> {
        let zv = self
            .value(z)
            .item()
            .ok_or_else(|| Error::dim("logistic_loss", "expected a scalar logit"))?;
        let p_target = if accept { sigmoid(zv) } else { sigmoid(-zv) };
        let loss = -clamp_probability(p_target).ln();
        Ok(self.push_owned(Matrix::scalar(loss), Op::LogisticLoss { z, accept }))
    }

    /// Fused LSTM cell update. `z` holds the stacked gate pre-activations
    /// (input, forget, output, candidate; `4H` rows); returns the column
    /// `[h; c]` of `2H` rows with `c = f * c_prev + i * g`, `h = o * tanh(c)`.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Var) -> Result<Var> {
        let rows = self.require_vector("lstm_cell", z)?;
        let h = self.require_vector("lstm_cell", c_prev)?;
        if rows != 4 * h {
            return Err(Error::dim("lstm_cell", format!("{rows} gate rows for a cell of {h}")));
        }
        let (zv, cp) = (self.value(z).data(), self.value(c_prev).data());
        let mut out = vec![0.0; 2 * h];
        let mut acts = vec![0.0; 5 * h];
        for k in 0..h {
            let (i, f, o, g) = (sigmoid(zv[k]), sigmoid(zv[h + k]), sigmoid(zv[2 * h + k]), zv[3 * h + k].tanh());
            let c = f * cp[k] + i * g;
            let tc = c.tanh();
            out[k] = o * tc;
            out[h + k] = c;
            for (slot, v) in [i, f, o, g, tc].into_iter().enumerate() {
                acts[slot * h + k] = v;
            }
        }
        Ok(self.push_owned(Matrix::column(out), Op::LstmCell { z, c_prev, acts }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!("backward needs a scalar seed, got {r}x{c}")));
        }
        let mut grads = Grads { slots: vec![None; self.nodes.len()], shapes: self.shapes() };
        grads.slots[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads.slots[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        Ok(grads)
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().map(|n| n.value.shape()).collect()
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut Grads) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                self.matvec_backward(*x, *w, g, grads);
                grads.with(*b, |db| db.add_assign(g));
            }
            Op::MatVec { x, w } => self.matvec_backward(*x, *w, g, grads),
            Op::Relu(x) => {
                let xv = self.value(*x);
                grads.with(*x, |dx| {
                    for ((d, &xi), gi) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => grads.with(*x, |dx| {
                for ((d, s), gi) in dx.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                    *d += gi * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => grads.with(*x, |dx| {
                for ((d, t), gi) in dx.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                    *d += gi * (1.0 - t * t);
                }
            }),
            Op::Add(a, b) => {
                grads.with(*a, |da| da.add_assign(g));
                grads.with(*b, |db| db.add_assign(g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                grads.with(*a, |da| {
                    for ((d, y), gi) in da.data_mut().iter_mut().zip(vb.data()).zip(g.data()) {
                        *d += gi * y;
                    }
                });
                grads.with(*b, |db| {
                    for ((d, x), gi) in db.data_mut().iter_mut().zip(va.data()).zip(g.data()) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(x, f) => grads.with(*x, |dx| dx.scaled_add_assign(*f, g)),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    let seg = &g.data()[offset..offset + n];
                    grads.with(p, |dp| {
                        for (d, s) in dp.data_mut().iter_mut().zip(seg) {
                            *d += s;
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, start } => grads.with(*x, |dx| {
                for (d, gi) in dx.data_mut()[*start..*start + g.len()].iter_mut().zip(g.data()) {
                    *d += gi;
                }
            }),
            Op::Gather { x, indices } => grads.with(*x, |dx| {
                let dd = dx.data_mut();
                for (&idx, gi) in indices.iter().zip(g.data()) {
                    dd[idx] += gi;
                }
            }),
            Op::SelectRows { x, rows } => grads.with(*x, |dx| {
                let cols = dx.cols();
                let dd = dx.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for (d, gi) in dd[r * cols..(r + 1) * cols].iter_mut().zip(g.row(k)) {
                        *d += gi;
                    }
                }
            }),
            Op::Sum(x) => {
                let gs = g.data()[0];
                grads.with(*x, |dx| dx.data_mut().iter_mut().for_each(|d| *d += gs));
            }
            Op::Dot(a, b) => {
                let gs = g.data()[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                grads.with(*a, |da| da.scaled_add_assign(gs, vb));
                grads.with(*b, |db| db.scaled_add_assign(gs, va));
            }
            Op::Cosine(a, b) => {
                let gs = g.data()[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.norm(), vb.norm());
                let s = out.data()[0];
                // d s / d a = b / (|a||b|) - s a / |a|^2
                grads.with(*a, |da| {
                    for ((d, ai), bi) in da.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += gs * (bi / (na * nb) - s * ai / (na * na));
                    }
                });
                grads.with(*b, |db| {
                    for ((d, bi), ai) in db.data_mut().iter_mut().zip(vb.data()).zip(va.data()) {
                        *d += gs * (ai / (na * nb) - s * bi / (nb * nb));
                    }
                });
            }
            Op::WeightedMean { inputs, weights, total } => {
                for (&x, &w) in inputs.iter().zip(weights) {
                    if w != 0.0 {
                        grads.with(x, |dx| dx.scaled_add_assign(w / total, g));
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let gs = g.data()[0];
                let z = self.value(*logits).data();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                grads.with(*logits, |dz| {
                    for (k, (d, e)) in dz.data_mut().iter_mut().zip(&exps).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *d += gs * (e / denom - onehot);
                    }
                });
            }
            Op::LogisticLoss { z, accept } => {
                let gs = g.data()[0];
                let p = sigmoid(self.value(*z).data()[0]);
                let y = if *accept { 1.0 } else { 0.0 };
                grads.with(*z, |dz| dz.data_mut()[0] += gs * (p - y));
            }
            Op::LstmCell { z, c_prev, acts } => {
                let cp = self.value(*c_prev).data();
                let h = cp.len();
                let (gh, gc) = g.data().split_at(h);
                let mut dz = vec![0.0; 4 * h];
                let mut dcp = vec![0.0; h];
                for k in 0..h {
                    let [i, f, o, gg, tc] = [0, 1, 2, 3, 4].map(|slot| acts[slot * h + k]);
                    let dc = gc[k] + gh[k] * o * (1.0 - tc * tc);
                    dz[k] = dc * gg * i * (1.0 - i);
                    dz[h + k] = dc * cp[k] * f * (1.0 - f);
                    dz[2 * h + k] = gh[k] * tc * o * (1.0 - o);
                    dz[3 * h + k] = dc * i * (1.0 - gg * gg);
                    dcp[k] = dc * f;
                }
                grads.with(*z, |d| d.data_mut().iter_mut().zip(&dz).for_each(|(a, b)| *a += b));
                grads.with(*c_prev, |d| d.data_mut().iter_mut().zip(&dcp).for_each(|(a, b)| *a += b));
            }
        }
    }

    fn matvec_backward(&self, x: Var, w: Var, g: &Matrix, grads: &mut Grads) {
        let (xv, wv) = (self.value(x), self.value(w));
        let n = wv.cols();
        grads.with(x, |dx| {
            for (r, &gr) in g.data().iter().enumerate() {
                if gr != 0.0 {
                    for (d, wrc) in dx.data_mut().iter_mut().zip(wv.row(r)) {
                        *d += gr * wrc;
                    }
                }
            }
        });
        grads.with(w, |dw| {
            let dwd = dw.data_mut();
            for (r, &gr) in g.data().iter().enumerate() {
                if gr != 0.0 {
                    for (d, xc) in dwd[r * n..(r + 1) * n].iter_mut().zip(xv.data()) {
                        *d += gr * xc;
                    }
                }
            }
        });
    }
}

fn clamp_probability(p: f64) -> f64 {
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if clamped != p {
        warn!("probability {p:e} clamped to {clamped:e}; the logistic head is saturated");
    }
    clamped
}

/// Gradients produced by [`Tape::backward`], one slot per tape node.
pub struct Grads {
    slots: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut Matrix)) {
        let (r, c) = self.shapes[v.0];
        f(self.slots[v.0].get_or_insert_with(|| Matrix::zeros(r, c)));
    }

    /// Gradient with respect to `v`; zeros of the node's shape when `v` did
    /// not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Adds the gradient of every loaded parameter into `acc`, scaled.
    pub fn accumulate_params(&self, vars: &ParamVars, scale: f64, acc: &mut ParamGrads) {
        for (id, v) in vars.iter() {
            if let Some(g) = &self.slots[v.0] {
                acc.get_mut(id).scaled_add_assign(scale, g);
            }
        }
    }

    pub fn params(&self, vars: &ParamVars, params: &ParamSet) -> ParamGrads {
        let mut acc = ParamGrads::zeros_like(params);
        self.accumulate_params(vars, 1.0, &mut acc);
        acc
    }
}
