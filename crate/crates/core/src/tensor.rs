//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every model in the crate builds its forward pass on a [`Tape`]. Inference
//! reads the output value and drops the tape; training calls
//! [`Tape::backward`] to collect parameter gradients. Values are computed
//! eagerly, so the forward result is identical whether or not a backward pass
//! follows.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Rescales so the global norm does not exceed `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn zero_out(&mut self, id: ParamId) {
        self.0[id.0].fill(0.0);
    }
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    ShiftRows(Var, isize),
    Transpose(Var),
    MaxRows(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PickSum(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Selects rows of `a` (embedding lookup when `a` is a parameter).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts must agree");
        self.push(v, Op::ConcatCols(a, b))
    }

    /// `out[i] = a[i - offset]`, zero where the source row is out of range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let src = self.value(a);
        let n = src.nrows() as isize;
        let mut out = Array2::zeros(src.raw_dim());
        for i in 0..n {
            let j = i - offset;
            if (0..n).contains(&j) {
                out.row_mut(i as usize).assign(&src.row(j as usize));
            }
        }
        self.push(out, Op::ShiftRows(a, offset))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Column-wise max over rows, giving a `1×m` row. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut arg = vec![0usize; src.ncols()];
        let mut out = Array2::zeros((1, src.ncols()));
        for (j, col) in src.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &x) in col.iter().enumerate() {
                if x > col[best] {
                    best = i;
                }
            }
            arg[j] = best;
            out[[0, j]] = col[best];
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a)).mapv(f64::exp);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Sum of the selected `(row, col)` entries as a `1×1` scalar.
    pub fn pick_sum(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let total: f64 = coords.iter().map(|&(r, c)| src[[r, c]]).sum();
        self.push(Array2::from_elem((1, 1), total), Op::PickSum(a, coords.to_vec()))
    }

    /// Multiplies by a fixed mask (inverted dropout when the mask holds `0` or `1/(1-p)`).
    pub fn mask(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a `1×1` root. Returns gradients for every parameter in the store.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = self.params.zero_grads();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => out.0[id.0] += &g,
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g * *factor),
                Op::OneMinus(a) => accumulate(&mut grads, *a, -g),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= yv * (1.0 - yv));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|gv, &yv| *gv *= 1.0 - yv * yv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|gv, &xv| *gv *= sigmoid(-xv));
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let shape = self.value(*a).raw_dim();
                    let target = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = target.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let shape = self.value(*a).raw_dim();
                    let target = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    let mut view = target.slice_mut(s![.., *start..*end]);
                    view += &g;
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::ShiftRows(a, offset) => {
                    let n = g.nrows() as isize;
                    let mut ga = Array2::zeros(g.raw_dim());
                    for i in 0..n {
                        let j = i - offset;
                        if (0..n).contains(&j) {
                            ga.row_mut(j as usize).assign(&g.row(i as usize));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::MaxRows(a, arg) => {
                    let shape = self.value(*a).raw_dim();
                    let target = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    for (j, &i) in arg.iter().enumerate() {
                        target[[i, j]] += g[[0, j]];
                    }
                }
                Op::SumRows(a) => {
                    let n = self.value(*a).nrows();
                    let ga = g.broadcast((n, g.ncols())).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv -= yv.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PickSum(a, coords) => {
                    let shape = self.value(*a).raw_dim();
                    let target = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    for &(r, c) in coords {
                        target[[r, c]] += g[[0, 0]];
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0]]);
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let s = tape.sum_all(a);
        let t = tape.sum_all(b);
        let total = tape.add(s, t);
        let grads = tape.backward(total);
        assert_eq!(grads.get(w), &array![[2.0, 2.0]]);
    }

    #[test]
    fn max_rows_routes_to_first_argmax() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 5.0], [1.0, 2.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.param(w);
        let m = tape.max_rows(x);
        assert_eq!(tape.value(m), &array![[1.0, 5.0]]);
        let s = tape.sum_all(m);
        let g = tape.backward(s);
        assert_eq!(g.get(w), &array![[1.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn shift_rows_pads_with_zeros() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[1.0], [2.0], [3.0]]);
        let down = tape.shift_rows(x, 1);
        let up = tape.shift_rows(x, -1);
        assert_eq!(tape.value(down), &array![[0.0], [1.0], [2.0]]);
        assert_eq!(tape.value(up), &array![[2.0], [3.0], [0.0]]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!(log_sigmoid(800.0) <= 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn clip_norm_bounds_global_norm() {
        let mut g = Grads(vec![array![[3.0, 4.0]], array![[0.0]]]);
        let before = g.clip_norm(0.25);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g.global_norm() - 0.25).abs() < 1e-12);
    }
}
