//! Append-only reverse-mode tape.
//!
//! Every forward primitive records one node with the indices of its
//! parents; `backward` walks the nodes once in reverse creation order, so
//! a single pass propagates the root gradient to every named leaf. Node
//! order fixes the floating-point accumulation order, which makes repeated
//! backward passes bit-identical.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf(String),
    Constant,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Relu(ValueId),
    LogSoftmax(ValueId),
    EmbedRow { table: ValueId, row: usize },
    Concat(ValueId, ValueId),
    Slice { src: ValueId, start: usize, len: usize },
    Index { src: ValueId, at: usize },
    Sum(ValueId),
    Mean(ValueId),
    LogAddExp(ValueId, ValueId),
    Scale(ValueId, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by leaf name, in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `delta` into the entry for `name`, inserting it if absent.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor) {
        match self.0.get_mut(name) {
            Some(g) => {
                for (gi, di) in g.values_mut().iter_mut().zip(delta.values()) {
                    *gi += di;
                }
            }
            None => {
                self.0.insert(name.to_string(), delta.clone());
            }
        }
    }

    /// Adds another map in place; shapes of shared names must match.
    pub fn add_map(&mut self, other: &GradientMap) {
        for (name, g) in other.iter() {
            self.accumulate(name, g);
        }
    }

    /// Global L2 norm over every value in the map.
    pub fn l2_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            for v in t.values_mut() {
                *v *= factor;
            }
        }
    }

    /// First (name, flat index) holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(&str, usize)> {
        for (name, t) in self.0.iter() {
            if let Some(i) = t.values().iter().position(|v| !v.is_finite()) {
                return Some((name, i));
            }
        }
        None
    }
}

/// Append-only record of forward computations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a named differentiable input. Gradients accumulate per name.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> ValueId {
        self.push(Op::Leaf(name.to_string()), value)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape("add", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, values)?))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, values)?))
    }

    /// Matrix product. Accepts [m,k]x[k,n], [m,k]x[k], [k]x[k,n], and the
    /// rank-1 dot product [k]x[k] (scalar result).
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (m, k_a, a_vec) = Self::as_2d("matmul", self.value(a), false)?;
        let (k_b, n, b_vec) = Self::as_2d("matmul", self.value(b), true)?;
        if k_a != k_b {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k_a {
                let aik = av[i * k_a + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..kk * n + n];
                let orow = &mut out[i * n..i * n + n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => vec![],
        };
        Ok(self.push(Op::MatMul(a, b), Tensor::new(shape, out)?))
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let v = self.map_unary(x, f64::tanh);
        Ok(self.push(Op::Tanh(x), v))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let v = self.map_unary(x, |x| 1.0 / (1.0 + (-x).exp()));
        Ok(self.push(Op::Sigmoid(x), v))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let v = self.map_unary(x, |x| x.max(0.0));
        Ok(self.push(Op::Relu(x), v))
    }

    /// Log-softmax over the last axis; each output row sums to one in
    /// probability space.
    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let t = self.value(x);
        if t.rank() == 0 || *t.shape().last().unwrap() == 0 {
            return Err(NumericsError::BadShape {
                op: "log_softmax",
                expected: "rank >= 1 with non-empty last axis",
                got: t.shape().to_vec(),
            });
        }
        let cols = *t.shape().last().unwrap();
        let mut values = t.values().to_vec();
        for row in values.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let logsum = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= logsum;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::LogSoftmax(x), Tensor::new(shape, values)?))
    }

    /// Row lookup into a rank-2 table; the gradient scatters into that row.
    pub fn embed_row(&mut self, table: ValueId, row: usize) -> Result<ValueId, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NumericsError::BadShape {
                op: "embed_row",
                expected: "rank-2 table",
                got: t.shape().to_vec(),
            });
        }
        if row >= t.shape()[0] {
            return Err(NumericsError::IndexOutOfBounds {
                op: "embed_row",
                index: row,
                shape: t.shape().to_vec(),
            });
        }
        let v = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(Op::EmbedRow { table, row }, v))
    }

    /// Concatenation of two rank-1 vectors.
    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        for id in [a, b] {
            if self.value(id).rank() != 1 {
                return Err(NumericsError::BadShape {
                    op: "concat",
                    expected: "rank-1 operands",
                    got: self.value(id).shape().to_vec(),
                });
            }
        }
        let mut values = self.value(a).values().to_vec();
        values.extend_from_slice(self.value(b).values());
        Ok(self.push(Op::Concat(a, b), Tensor::vector(values)))
    }

    /// Contiguous sub-vector [start, start+len) of a rank-1 vector.
    pub fn slice(&mut self, src: ValueId, start: usize, len: usize) -> Result<ValueId, NumericsError> {
        let t = self.value(src);
        if t.rank() != 1 {
            return Err(NumericsError::BadShape {
                op: "slice",
                expected: "rank-1 source",
                got: t.shape().to_vec(),
            });
        }
        if start + len > t.len() {
            return Err(NumericsError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                shape: t.shape().to_vec(),
            });
        }
        let v = Tensor::vector(t.values()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { src, start, len }, v))
    }

    /// Scalar at a flat (row-major) position of any tensor.
    pub fn index(&mut self, src: ValueId, at: usize) -> Result<ValueId, NumericsError> {
        let t = self.value(src);
        if at >= t.len() {
            return Err(NumericsError::IndexOutOfBounds {
                op: "index",
                index: at,
                shape: t.shape().to_vec(),
            });
        }
        let v = Tensor::scalar(t.values()[at]);
        Ok(self.push(Op::Index { src, at }, v))
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let v = Tensor::scalar(self.value(x).values().iter().sum());
        Ok(self.push(Op::Sum(x), v))
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumericsError::BadShape {
                op: "mean",
                expected: "non-empty tensor",
                got: t.shape().to_vec(),
            });
        }
        let v = Tensor::scalar(t.values().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(Op::Mean(x), v))
    }

    /// Elementwise log(exp(a) + exp(b)); when both inputs are -inf the
    /// output is -inf and no gradient flows to either side.
    pub fn logaddexp(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.same_shape("logaddexp", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| super::logaddexp(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::LogAddExp(a, b), Tensor::new(shape, values)?))
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId, NumericsError> {
        let v = self.map_unary(x, |x| x * factor);
        Ok(self.push(Op::Scale(x, factor), v))
    }

    pub fn neg(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.scale(x, -1.0)
    }

    fn map_unary(&self, x: ValueId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
            .expect("unary op preserves shape")
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Interprets a tensor as a 2-d view for matmul: (rows, cols, was_vector).
    /// Vectors on the left act as a row when `as_col` is false; vectors on
    /// the right act as a column.
    fn as_2d(
        op: &'static str,
        t: &Tensor,
        as_col: bool,
    ) -> Result<(usize, usize, bool), NumericsError> {
        match t.rank() {
            2 => Ok((t.shape()[0], t.shape()[1], false)),
            1 => {
                if as_col {
                    Ok((t.shape()[0], 1, true))
                } else {
                    Ok((1, t.shape()[0], true))
                }
            }
            _ => Err(NumericsError::BadShape {
                op,
                expected: "rank 1 or 2",
                got: t.shape().to_vec(),
            }),
        }
    }

    /// Reverse pass from a scalar root. Returns a gradient for every named
    /// leaf on the tape; leaves the root does not depend on get zeros.
    pub fn backward(&self, root: ValueId) -> Result<GradientMap, NumericsError> {
        if root.0 >= self.nodes.len() {
            return Err(NumericsError::UnknownValue(root.0));
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(NumericsError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        let mut out = GradientMap::default();
        for node in &self.nodes {
            if let Op::Leaf(name) = &node.op {
                out.0
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf(name) => out.accumulate(name, &g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.values().iter().copied());
                    self.accum(&mut grads, *b, g.values().iter().copied());
                }
                Op::Mul(a, b) => {
                    let bv: Vec<f64> = self.nodes[b.0].value.values().to_vec();
                    let av: Vec<f64> = self.nodes[a.0].value.values().to_vec();
                    self.accum(&mut grads, *a, g.values().iter().zip(&bv).map(|(g, b)| g * b));
                    self.accum(&mut grads, *b, g.values().iter().zip(&av).map(|(g, a)| g * a));
                }
                Op::MatMul(a, b) => {
                    let (m, k, _) = Self::as_2d("matmul", &self.nodes[a.0].value, false)?;
                    let (_, n, _) = Self::as_2d("matmul", &self.nodes[b.0].value, true)?;
                    let av = self.nodes[a.0].value.values();
                    let bv = self.nodes[b.0].value.values();
                    let gv = g.values();
                    // dA[i,kk] = sum_j G[i,j] B[kk,j]; dB[kk,j] = sum_i A[i,kk] G[i,j]
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gv[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + kk] * gv[i * n + j];
                            }
                            db[kk * n + j] = acc;
                        }
                    }
                    self.accum(&mut grads, *a, da.into_iter());
                    self.accum(&mut grads, *b, db.into_iter());
                }
                Op::Tanh(x) => {
                    let y: Vec<f64> = self.nodes[i].value.values().to_vec();
                    self.accum(
                        &mut grads,
                        *x,
                        g.values().iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)),
                    );
                }
                Op::Sigmoid(x) => {
                    let y: Vec<f64> = self.nodes[i].value.values().to_vec();
                    self.accum(
                        &mut grads,
                        *x,
                        g.values().iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)),
                    );
                }
                Op::Relu(x) => {
                    let xv: Vec<f64> = self.nodes[x.0].value.values().to_vec();
                    self.accum(
                        &mut grads,
                        *x,
                        g.values()
                            .iter()
                            .zip(&xv)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                    );
                }
                Op::LogSoftmax(x) => {
                    let y = self.nodes[i].value.values();
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let gv = g.values();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let lo = r * cols;
                        let gsum: f64 = gv[lo..lo + cols].iter().sum();
                        for c in 0..cols {
                            dx[lo + c] = gv[lo + c] - y[lo + c].exp() * gsum;
                        }
                    }
                    self.accum(&mut grads, *x, dx.into_iter());
                }
                Op::EmbedRow { table, row } => {
                    let t = &self.nodes[table.0].value;
                    let cols = t.shape()[1];
                    let mut dt = vec![0.0; t.len()];
                    dt[row * cols..row * cols + cols].copy_from_slice(g.values());
                    self.accum(&mut grads, *table, dt.into_iter());
                }
                Op::Concat(a, b) => {
                    let la = self.nodes[a.0].value.len();
                    self.accum(&mut grads, *a, g.values()[..la].iter().copied());
                    self.accum(&mut grads, *b, g.values()[la..].iter().copied());
                }
                Op::Slice { src, start, len } => {
                    let n = self.nodes[src.0].value.len();
                    let mut ds = vec![0.0; n];
                    ds[*start..start + len].copy_from_slice(g.values());
                    self.accum(&mut grads, *src, ds.into_iter());
                }
                Op::Index { src, at } => {
                    let n = self.nodes[src.0].value.len();
                    let mut ds = vec![0.0; n];
                    ds[*at] = g.item();
                    self.accum(&mut grads, *src, ds.into_iter());
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gi = g.item();
                    self.accum(&mut grads, *x, std::iter::repeat_n(gi, n));
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gi = g.item() / n as f64;
                    self.accum(&mut grads, *x, std::iter::repeat_n(gi, n));
                }
                Op::LogAddExp(a, b) => {
                    let y = self.nodes[i].value.values();
                    let weight = |src: &[f64], j: usize| -> f64 {
                        // exp(x - y) is the softmax weight; a -inf input (or
                        // a -inf output) contributes nothing.
                        if src[j] == f64::NEG_INFINITY || y[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (src[j] - y[j]).exp()
                        }
                    };
                    let av: Vec<f64> = self.nodes[a.0].value.values().to_vec();
                    let bv: Vec<f64> = self.nodes[b.0].value.values().to_vec();
                    let gv = g.values();
                    self.accum(
                        &mut grads,
                        *a,
                        (0..gv.len()).map(|j| gv[j] * weight(&av, j)),
                    );
                    self.accum(
                        &mut grads,
                        *b,
                        (0..gv.len()).map(|j| gv[j] * weight(&bv, j)),
                    );
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    self.accum(&mut grads, *x, g.values().iter().map(|g| g * f));
                }
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: impl Iterator<Item = f64>) {
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (g, d) in t.values_mut().iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                let mut t = Tensor::zeros(shape);
                for (g, d) in t.values_mut().iter_mut().zip(delta) {
                    *g = d;
                }
                *slot = Some(t);
            }
        }
    }
}
