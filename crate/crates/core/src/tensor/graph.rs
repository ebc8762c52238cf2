use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub const fn len(self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(self) -> bool {
        self.len() == 0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    GatherRows { src: Var, index: Vec<usize> },
    BagMean { table: Var, bags: Vec<Vec<usize>> },
    MaxPool { src: Var, argmax: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    Rope { src: Var, positions: Vec<usize>, base: f64 },
}

struct Node {
    op: Op,
    dims: Dims,
    /// `None` for parameter leaves, whose value is read from the store.
    value: Option<Vec<f64>>,
    requires_grad: bool,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Recording of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// valid reverse topological order; backward walks it exactly once.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    param_grads: Gradients,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store attached.
    pub fn new() -> Self {
        Graph::with_params(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), leaf_grads: BTreeMap::new(), param_grads: Gradients::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.value(*id).data(),
            _ => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let d = self.dims(v);
        Tensor::matrix(d.rows, d.cols, self.value(v).to_vec()).expect("node dims are consistent")
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.dims(v), Dims::new(1, 1));
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, dims: Dims, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.len(), value.len());
        self.nodes.push(Node { op, dims, value: Some(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let d = t.dims();
        self.push(Op::Leaf, d, t.data().to_vec(), requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            bail!(Dimension, "{}×{} constant from {} values", rows, cols, data.len());
        }
        Ok(self.push(Op::Leaf, Dims::new(rows, cols), data, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Op::Leaf, Dims::new(rows, cols), vec![0.0; rows * cols], false)
    }

    /// Reference a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let dims = p.value.dims();
        self.nodes.push(Node { op: Op::Param(id), dims, value: None, requires_grad: p.trainable });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.cols != db.rows {
            bail!(Dimension, "matmul {}×{} · {}×{}", da.rows, da.cols, db.rows, db.cols);
        }
        let mut out = vec![0.0; da.rows * db.cols];
        matmul_into(self.value(a), self.value(b), &mut out, da.rows, da.cols, db.cols);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, transpose_b: false }, Dims::new(da.rows, db.cols), out, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.cols != db.cols {
            bail!(Dimension, "matmul_t {}×{} · ({}×{})ᵀ", da.rows, da.cols, db.rows, db.cols);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let k = da.cols;
        let mut out = vec![0.0; da.rows * db.rows];
        for i in 0..da.rows {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..db.rows {
                out[i * db.rows + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, transpose_b: true }, Dims::new(da.rows, db.rows), out, rg))
    }

    /// `x · w + bias` with `bias` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, bias)
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (d, rg) = (self.dims(a), self.rg(&[a, b]));
        Ok(self.push(Op::Add(a, b), d, out, rg))
    }

    /// Adds the single row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (da, dr) = (self.dims(a), self.dims(row));
        if dr.rows != 1 || dr.cols != da.cols {
            bail!(Dimension, "add_row {}×{} + {}×{}", da.rows, da.cols, dr.rows, dr.cols);
        }
        let rv = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, x)| x + rv[i % da.cols]).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), da, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (d, rg) = (self.dims(a), self.rg(&[a, b]));
        Ok(self.push(Op::Mul(a, b), d, out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let (d, rg) = (self.dims(a), self.rg(&[a]));
        self.push(Op::Scale(a, factor), d, out, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let (d, rg) = (self.dims(a), self.rg(&[a]));
        self.push(Op::Silu(a), d, out, rg)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Dimension, "concat_rows of nothing") };
        let cols = self.dims(first).cols;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.cols != cols {
                bail!(Dimension, "concat_rows width {} vs {}", d.cols, cols);
            }
            rows += d.rows;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Dims::new(rows, cols), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Dimension, "concat_cols of nothing") };
        let rows = self.dims(first).rows;
        let mut cols = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.rows != rows {
                bail!(Dimension, "concat_cols height {} vs {}", d.rows, rows);
            }
            cols += d.cols;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let w = self.dims(p).cols;
            let v = self.value(p);
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Dims::new(rows, cols), out, rg))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(src);
        if len == 0 || start + len > d.rows {
            bail!(Dimension, "rows {}..{} of {}", start, start + len, d.rows);
        }
        let out = self.value(src)[start * d.cols..(start + len) * d.cols].to_vec();
        let rg = self.rg(&[src]);
        Ok(self.push(Op::SliceRows { src, start }, Dims::new(len, d.cols), out, rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(src);
        if len == 0 || start + len > d.cols {
            bail!(Dimension, "cols {}..{} of {}", start, start + len, d.cols);
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(d.rows * len);
        for r in 0..d.rows {
            out.extend_from_slice(&v[r * d.cols + start..r * d.cols + start + len]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Op::SliceCols { src, start }, Dims::new(d.rows, len), out, rg))
    }

    /// Row gather; also the embedding lookup when `src` is a table.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let d = self.dims(src);
        if index.is_empty() {
            bail!(Dimension, "empty gather");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= d.rows) {
            bail!(Dimension, "gather row {} of {}", bad, d.rows);
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(index.len() * d.cols);
        for &i in index {
            out.extend_from_slice(&v[i * d.cols..(i + 1) * d.cols]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Op::GatherRows { src, index: index.to_vec() }, Dims::new(index.len(), d.cols), out, rg))
    }

    /// Embedding lookup followed by a mean over each bag: row `r` of the
    /// output is the mean of `table[bags[r][..]]`.
    pub fn embedding_bag_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let d = self.dims(table);
        if bags.is_empty() || bags.iter().any(Vec::is_empty) {
            bail!(Dimension, "embedding bags must be non-empty");
        }
        if let Some(&bad) = bags.iter().flatten().find(|&&i| i >= d.rows) {
            bail!(Dimension, "embedding row {} of {}", bad, d.rows);
        }
        let v = self.value(table);
        let mut out = vec![0.0; bags.len() * d.cols];
        for (r, bag) in bags.iter().enumerate() {
            let dst = &mut out[r * d.cols..(r + 1) * d.cols];
            for &i in bag {
                for (o, x) in dst.iter_mut().zip(&v[i * d.cols..(i + 1) * d.cols]) {
                    *o += x;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[table]);
        let rows = bags.len();
        Ok(self.push(Op::BagMean { table, bags }, Dims::new(rows, d.cols), out, rg))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn max_pool_rows(&mut self, src: Var, group: usize) -> Result<Var> {
        let d = self.dims(src);
        if group == 0 || !d.rows.is_multiple_of(group) {
            bail!(Dimension, "{} rows do not split into groups of {}", d.rows, group);
        }
        let v = self.value(src);
        let groups = d.rows / group;
        let mut out = vec![0.0; groups * d.cols];
        let mut argmax = vec![0; groups * d.cols];
        for g in 0..groups {
            for c in 0..d.cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if v[r * d.cols + c] > v[best * d.cols + c] {
                        best = r;
                    }
                }
                out[g * d.cols + c] = v[best * d.cols + c];
                argmax[g * d.cols + c] = best;
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Op::MaxPool { src, argmax }, Dims::new(groups, d.cols), out, rg))
    }

    // ---- normalization & attention pieces -------------------------------

    /// Row-wise `gain ⊙ x / sqrt(mean(x²) + eps)` with `gain: 1×n`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (dx, dg) = (self.dims(x), self.dims(gain));
        if dg.rows != 1 || dg.cols != dx.cols {
            bail!(Dimension, "rms_norm gain {}×{} for width {}", dg.rows, dg.cols, dx.cols);
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let n = dx.cols;
        let mut out = vec![0.0; dx.len()];
        let mut inv_rms = vec![0.0; dx.rows];
        for r in 0..dx.rows {
            let row = &xv[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            inv_rms[r] = inv;
            for c in 0..n {
                out[r * n + c] = gv[c] * row[c] * inv;
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, dx, out, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let d = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d.cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), d, out, rg)
    }

    /// Rotary position rotation of each row. Row `r` is rotated by angle
    /// `positions[r] · base^(-2i/n)` on the pair `(i, i + n/2)`.
    pub fn rope(&mut self, src: Var, positions: &[usize], base: f64) -> Result<Var> {
        let d = self.dims(src);
        if !d.cols.is_multiple_of(2) {
            bail!(Config, "rotary width {} is odd", d.cols);
        }
        if positions.len() != d.rows {
            bail!(Dimension, "{} positions for {} rows", positions.len(), d.rows);
        }
        let mut out = self.value(src).to_vec();
        for (row, &p) in out.chunks_mut(d.cols).zip(positions) {
            rotate(row, p, base, false);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Op::Rope { src, positions: positions.to_vec(), base }, d, out, rg))
    }

    // ---- reductions & losses --------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Dims::new(1, 1), vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Dims::new(1, 1), vec![m], rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Op::Mse { pred, target }, Dims::new(1, 1), vec![s], rg))
    }

    /// Mean over rows of `logsumexp(z) − z[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let d = self.dims(logits);
        if targets.len() != d.rows {
            bail!(Dimension, "{} targets for {} rows", targets.len(), d.rows);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d.cols) {
            bail!(Dimension, "target class {} of {}", bad, d.cols);
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(d.cols).zip(targets) {
            let z_t = row[t];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|z| libm::exp(z - max)).sum::<f64>());
            total += lse - z_t;
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        let loss = total / d.rows as f64;
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, Dims::new(1, 1), vec![loss], rg))
    }

    /// Mean binary cross-entropy on logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let d = self.dims(logits);
        if targets.len() != d.len() {
            bail!(Dimension, "{} targets for {} logits", targets.len(), d.len());
        }
        let z = self.value(logits);
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-z.abs())))
            .sum();
        let rg = self.rg(&[logits]);
        let loss = total / d.len() as f64;
        Ok(self.push(Op::BceLogits { logits, targets: targets.to_vec() }, Dims::new(1, 1), vec![loss], rg))
    }

    fn same_dims(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            bail!(Dimension, "{} {}×{} vs {}×{}", what, da.rows, da.cols, db.rows, db.cols);
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of parameters and of
    /// gradient-requiring leaves are accumulated across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dims(loss) != Dims::new(1, 1) {
            let d = self.dims(loss);
            return Err(Error::Contract(alloc::format!("backward from a {}×{} value, expected a scalar", d.rows, d.cols)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    /// Gradient accumulated on a non-parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn param_grads(&self) -> &Gradients {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Gradients {
        self.param_grads
    }

    fn backward_node(&mut self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let params = self.params;
        let value = |v: Var| -> &[f64] {
            let n = &nodes[v.0];
            match (&n.value, &n.op) {
                (Some(d), _) => d,
                (None, Op::Param(id)) => params.value(*id).data(),
                _ => unreachable!(),
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {
                let buf = self.leaf_grads.entry(i).or_insert_with(|| vec![0.0; gout.len()]);
                axpy(buf, gout, 1.0);
            }
            Op::Param(id) => {
                let buf = self.param_grads.buffer(*id, gout.len());
                axpy(buf, gout, 1.0);
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (da, db) = (nodes[a.0].dims, nodes[b.0].dims);
                let (av, bv) = (value(a), value(b));
                let m = da.rows;
                let k = da.cols;
                let n = node.dims.cols;
                if let Some(ga) = acc(grads, nodes, a) {
                    // dA = dC · B  (transposed)  or  dC · Bᵀ
                    for r in 0..m {
                        let gr = &gout[r * n..(r + 1) * n];
                        let dst = &mut ga[r * k..(r + 1) * k];
                        if transpose_b {
                            for (j, &g) in gr.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(dst, &bv[j * k..(j + 1) * k], g);
                                }
                            }
                        } else {
                            for (kk, d) in dst.iter_mut().enumerate() {
                                *d += dot(gr, &bv[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for r in 0..m {
                        let gr = &gout[r * n..(r + 1) * n];
                        let ar = &av[r * k..(r + 1) * k];
                        if transpose_b {
                            // dB[j,:] += dC[r,j] · A[r,:]
                            for (j, &g) in gr.iter().enumerate() {
                                if g != 0.0 {
                                    axpy(&mut gb[j * k..(j + 1) * k], ar, g);
                                }
                            }
                        } else {
                            // dB[kk,:] += A[r,kk] · dC[r,:]
                            for (kk, &x) in ar.iter().enumerate() {
                                if x != 0.0 {
                                    axpy(&mut gb[kk * n..(kk + 1) * n], gr, x);
                                }
                            }
                        }
                    }
                    debug_assert_eq!(gb.len(), db.len());
                }
            }
            &Op::Add(a, b) => {
                if let Some(g) = acc(grads, nodes, a) {
                    axpy(g, gout, 1.0);
                }
                if let Some(g) = acc(grads, nodes, b) {
                    axpy(g, gout, 1.0);
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(g) = acc(grads, nodes, a) {
                    axpy(g, gout, 1.0);
                }
                let cols = node.dims.cols;
                if let Some(g) = acc(grads, nodes, row) {
                    for chunk in gout.chunks(cols) {
                        axpy(g, chunk, 1.0);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(g) = acc(grads, nodes, a) {
                    for ((d, go), y) in g.iter_mut().zip(gout).zip(value(b)) {
                        *d += go * y;
                    }
                }
                if let Some(g) = acc(grads, nodes, b) {
                    for ((d, go), x) in g.iter_mut().zip(gout).zip(value(a)) {
                        *d += go * x;
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(g) = acc(grads, nodes, a) {
                    axpy(g, gout, f);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].dims.len();
                    if let Some(g) = acc(grads, nodes, p) {
                        axpy(g, &gout[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (node.dims.rows, node.dims.cols);
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].dims.cols;
                    if let Some(g) = acc(grads, nodes, p) {
                        for r in 0..rows {
                            axpy(&mut g[r * w..(r + 1) * w], &gout[r * cols + offset..r * cols + offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { src, start } => {
                let cols = node.dims.cols;
                if let Some(g) = acc(grads, nodes, src) {
                    axpy(&mut g[start * cols..start * cols + gout.len()], gout, 1.0);
                }
            }
            &Op::SliceCols { src, start } => {
                let w = node.dims.cols;
                let cols = nodes[src.0].dims.cols;
                if let Some(g) = acc(grads, nodes, src) {
                    for r in 0..node.dims.rows {
                        axpy(&mut g[r * cols + start..r * cols + start + w], &gout[r * w..(r + 1) * w], 1.0);
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let cols = node.dims.cols;
                if let Some(g) = acc(grads, nodes, *src) {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut g[i * cols..(i + 1) * cols], &gout[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::BagMean { table, bags } => {
                let cols = node.dims.cols;
                if let Some(g) = acc(grads, nodes, *table) {
                    for (r, bag) in bags.iter().enumerate() {
                        let w = 1.0 / bag.len() as f64;
                        for &i in bag {
                            axpy(&mut g[i * cols..(i + 1) * cols], &gout[r * cols..(r + 1) * cols], w);
                        }
                    }
                }
            }
            Op::MaxPool { src, argmax } => {
                let cols = node.dims.cols;
                if let Some(g) = acc(grads, nodes, *src) {
                    for (o, &row) in argmax.iter().enumerate() {
                        g[row * cols + o % cols] += gout[o];
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = node.dims.cols;
                let (xv, gv) = (value(*x), value(*gain));
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * n..(r + 1) * n];
                        let go = &gout[r * n..(r + 1) * n];
                        let s: f64 = (0..n).map(|c| go[c] * gv[c] * row[c]).sum();
                        let k = s * inv * inv * inv / n as f64;
                        for c in 0..n {
                            gx[r * n + c] += go[c] * gv[c] * inv - row[c] * k;
                        }
                    }
                }
                if let Some(gg) = acc(grads, nodes, *gain) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..n {
                            gg[c] += gout[r * n + c] * xv[r * n + c] * inv;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = node.dims.cols;
                let y = node.value.as_deref().unwrap_or_default();
                if let Some(g) = acc(grads, nodes, x) {
                    for r in 0..node.dims.rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for c in 0..n {
                            g[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            &Op::Silu(x) => {
                let xv = value(x);
                if let Some(g) = acc(grads, nodes, x) {
                    for ((d, go), &z) in g.iter_mut().zip(gout).zip(xv) {
                        let s = sigmoid(z);
                        *d += go * s * (1.0 + z * (1.0 - s));
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(g) = acc(grads, nodes, a) {
                    g.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(g) = acc(grads, nodes, a) {
                    let w = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|d| *d += w);
                }
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (value(pred), value(target));
                let w = 2.0 * gout[0] / p.len() as f64;
                if let Some(g) = acc(grads, nodes, pred) {
                    for ((d, a), b) in g.iter_mut().zip(p).zip(t) {
                        *d += w * (a - b);
                    }
                }
                if let Some(g) = acc(grads, nodes, target) {
                    for ((d, a), b) in g.iter_mut().zip(p).zip(t) {
                        *d -= w * (a - b);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = nodes[logits.0].dims.cols;
                let w = gout[0] / targets.len() as f64;
                if let Some(g) = acc(grads, nodes, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * cols + c] += w * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let z = value(*logits);
                let w = gout[0] / targets.len() as f64;
                if let Some(g) = acc(grads, nodes, *logits) {
                    for ((d, &z), &t) in g.iter_mut().zip(z).zip(targets) {
                        *d += w * (sigmoid(z) - t);
                    }
                }
            }
            Op::Rope { src, positions, base } => {
                let n = node.dims.cols;
                if let Some(g) = acc(grads, nodes, *src) {
                    for (r, &p) in positions.iter().enumerate() {
                        let mut row = gout[r * n..(r + 1) * n].to_vec();
                        rotate(&mut row, p, *base, true);
                        axpy(&mut g[r * n..(r + 1) * n], &row, 1.0);
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` needs
/// no gradient.
fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.dims.len()]))
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let x = a[i * k + kk];
            // zero-padded numeric parts make most tokenizer inputs sparse
            if x != 0.0 {
                axpy(dst, &b[kk * n..(kk + 1) * n], x);
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Rotate `row` in place by the rotary angles for `position`; `inverse`
/// applies the transpose rotation.
pub(crate) fn rotate(row: &mut [f64], position: usize, base: f64, inverse: bool) {
    let half = row.len() / 2;
    let n = row.len() as f64;
    for i in 0..half {
        let theta = position as f64 * libm::pow(base, -2.0 * i as f64 / n);
        let (s, c) = libm::sincos(theta);
        let s = if inverse { -s } else { s };
        let (x0, x1) = (row[i], row[i + half]);
        row[i] = x0 * c - x1 * s;
        row[i + half] = x0 * s + x1 * c;
    }
}
