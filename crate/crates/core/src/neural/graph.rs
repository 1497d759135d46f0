//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is created and the tape is replayed backwards by [`Graph::backward`].
//! Parameters are read from a borrowed [`ParamStore`]; their gradients land in
//! a [`Grads`] buffer so several tapes can be reduced in a fixed order.

use crate::error::{Error, Result};
use crate::neural::tensor::{Grads, ParamId, ParamStore, Tensor};

/// Floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Embed(ParamId, Vec<usize>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    ScaleRows(Var, Var),
    CumSum(Var, bool),
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape {
        op,
        left: a,
        right: b,
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = self.node(v);
        [n.rows, n.cols]
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    fn tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    // ------------------------------------------------------------------
    // Leaves

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Const, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant_raw shape");
        self.push(rows, cols, data, Op::Const, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Const, false)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let tracked = !self.store.is_frozen(id);
        let v = self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Param(id),
            tracked,
        );
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gathers rows of an embedding table without materialising the table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.store.get(table);
        let cols = t.cols();
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::invalid(format!(
                    "embedding index {i} out of range for table of {} rows",
                    t.rows()
                )));
            }
            value.extend_from_slice(t.row(i));
        }
        let tracked = !self.store.is_frozen(table);
        Ok(self.push(
            ids.len(),
            cols,
            value,
            Op::Embed(table, ids.to_vec()),
            tracked,
        ))
    }

    // ------------------------------------------------------------------
    // Arithmetic

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), tracked))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let tracked = self.tracked(a) || self.tracked(b);
        if sa == sb {
            let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x + y);
            Ok(self.push(sa[0], sa[1], out, Op::Add(a, b), tracked))
        } else if sb[0] == 1 && sb[1] == sa[1] {
            let bv = &self.node(b).value;
            let out = self
                .node(a)
                .value
                .chunks(sa[1])
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
                .collect();
            Ok(self.push(sa[0], sa[1], out, Op::AddRow(a, b), tracked))
        } else {
            Err(shape_err("add", sa, sb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", sa, sb));
        }
        let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa[0], sa[1], out, Op::Sub(a, b), tracked))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out = zip_map(&self.node(a).value, &self.node(b).value, |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa[0], sa[1], out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let [r, k] = self.shape(a);
        let out = self.node(a).value.iter().map(|x| x * c).collect();
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::Scale(a, c), tracked)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let out = self.node(a).value.iter().map(|x| 1.0 - x).collect();
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::OneMinus(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| sigmoid(x)).collect();
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let out = self.node(a).value.iter().map(|x| x.tanh()).collect();
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::Tanh(a), tracked)
    }

    /// Natural log with inputs clamped to [`LOG_FLOOR`]; clamped entries pass no gradient.
    pub fn log(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let out = self
            .node(a)
            .value
            .iter()
            .map(|&x| x.max(LOG_FLOOR).ln())
            .collect();
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::Log(a), tracked)
    }

    // ------------------------------------------------------------------
    // Normalisers

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [r, k] = self.shape(a);
        let src = &self.node(a).value;
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = Vec::with_capacity(r * k);
        for row in src.chunks(k.max(1)).take(r) {
            out.extend(softmax(row));
        }
        let tracked = self.tracked(a);
        Ok(self.push(r, k, out, Op::SoftmaxRows(a), tracked))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [r, k] = self.shape(a);
        let src = &self.node(a).value;
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("log_softmax_rows"));
        }
        let mut out = Vec::with_capacity(r * k);
        for row in src.chunks(k.max(1)).take(r) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let tracked = self.tracked(a);
        Ok(self.push(r, k, out, Op::LogSoftmaxRows(a), tracked))
    }

    // ------------------------------------------------------------------
    // Structure

    pub fn transpose(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let src = &self.node(a).value;
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            for j in 0..k {
                out[j * r + i] = src[i * k + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(k, r, out, Op::Transpose(a), tracked)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&av[i * sa[1]..(i + 1) * sa[1]]);
            out.extend_from_slice(&bv[i * sb[1]..(i + 1) * sb[1]]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(sa[0], sa[1] + sb[1], out, Op::ConcatCols(a, b), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut tracked = false;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.rows(p);
            out.extend_from_slice(&self.node(p).value);
            tracked |= self.tracked(p);
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Rows `[lo, hi)`.
    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let [r, k] = self.shape(a);
        if lo >= hi || hi > r {
            return Err(Error::invalid(format!(
                "row slice [{lo}, {hi}) of {r} rows"
            )));
        }
        let out = self.node(a).value[lo * k..hi * k].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(hi - lo, k, out, Op::SliceRows(a, lo), tracked))
    }

    /// Columns `[lo, hi)`.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let [r, k] = self.shape(a);
        if lo >= hi || hi > k {
            return Err(Error::invalid(format!(
                "column slice [{lo}, {hi}) of {k} columns"
            )));
        }
        let src = &self.node(a).value;
        let out = (0..r)
            .flat_map(|i| src[i * k + lo..i * k + hi].iter().copied())
            .collect();
        let tracked = self.tracked(a);
        Ok(self.push(r, hi - lo, out, Op::SliceCols(a, lo), tracked))
    }

    /// Column-wise maximum over rows `[lo, hi)`, as a `1 × c` row. Ties pick the first row.
    pub fn max_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let [r, k] = self.shape(a);
        if lo >= hi || hi > r {
            return Err(Error::invalid(format!(
                "max-pool window [{lo}, {hi}) over {r} rows"
            )));
        }
        let src = &self.node(a).value;
        let mut best = src[lo * k..(lo + 1) * k].to_vec();
        let mut arg = vec![lo; k];
        for i in lo + 1..hi {
            for j in 0..k {
                let x = src[i * k + j];
                if x > best[j] {
                    best[j] = x;
                    arg[j] = i;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(1, k, best, Op::MaxRows(a, arg), tracked))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let [r, k] = self.shape(a);
        let src = &self.node(a).value;
        let mut out = vec![0.0; k];
        for row in src.chunks(k.max(1)).take(r) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let tracked = self.tracked(a);
        self.push(1, k, out, Op::MeanRows(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let tracked = self.tracked(a);
        self.push(1, 1, vec![s], Op::Sum(a), tracked)
    }

    /// Scales row `i` of `a` by `s[i]`; `s` holds one entry per row of `a`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss[0] * ss[1] != sa[0] || (ss[0] != 1 && ss[1] != 1) {
            return Err(shape_err("scale_rows", sa, ss));
        }
        let sv = &self.node(s).value;
        let out = self
            .node(a)
            .value
            .chunks(sa[1].max(1))
            .take(sa[0])
            .zip(sv)
            .flat_map(|(row, &w)| row.iter().map(move |x| x * w))
            .collect();
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(sa[0], sa[1], out, Op::ScaleRows(a, s), tracked))
    }

    /// Prefix sums over a flat vector; `reverse` gives suffix sums.
    pub fn cumsum(&mut self, a: Var, reverse: bool) -> Var {
        let [r, k] = self.shape(a);
        let src = &self.node(a).value;
        let mut out = vec![0.0; src.len()];
        let mut acc = 0.0;
        if reverse {
            for i in (0..src.len()).rev() {
                acc += src[i];
                out[i] = acc;
            }
        } else {
            for i in 0..src.len() {
                acc += src[i];
                out[i] = acc;
            }
        }
        let tracked = self.tracked(a);
        self.push(r, k, out, Op::CumSum(a, reverse), tracked)
    }

    /// Single element at flat index `idx`, as a `1 × 1` node.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.node(a).value.len();
        if idx >= n {
            return Err(Error::invalid(format!("pick index {idx} of {n}")));
        }
        let v = self.node(a).value[idx];
        let tracked = self.tracked(a);
        Ok(self.push(1, 1, vec![v], Op::Pick(a, idx), tracked))
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Accumulates d`loss`/dθ into `grads` for every reachable unfrozen parameter.
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let slot = grads.slot_mut(*id, g.len());
                    for (s, x) in slot.iter_mut().zip(&g) {
                        *s += x;
                    }
                }
                Op::Embed(id, ids) => {
                    let table = self.store.get(*id);
                    let slot = grads.slot_mut(*id, table.len());
                    let k = node.cols;
                    for (row, &tok) in ids.iter().enumerate() {
                        let dst = &mut slot[tok * k..(tok + 1) * k];
                        for (d, x) in dst.iter_mut().zip(&g[row * k..(row + 1) * k]) {
                            *d += x;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let [m, k] = self.shape(*a);
                    let n = self.cols(*b);
                    if self.tracked(*a) {
                        let bv = self.value(*b);
                        let da = acc(&mut adj, a.0, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a);
                        let db = acc(&mut adj, b.0, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut adj, *a, self.tracked(*a), &g);
                    add_into(&mut adj, *b, self.tracked(*b), &g);
                }
                Op::AddRow(a, b) => {
                    add_into(&mut adj, *a, self.tracked(*a), &g);
                    if self.tracked(*b) {
                        let k = node.cols;
                        let db = acc(&mut adj, b.0, k);
                        for row in g.chunks(k) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    add_into(&mut adj, *a, self.tracked(*a), &g);
                    if self.tracked(*b) {
                        let db = acc(&mut adj, b.0, g.len());
                        for (d, x) in db.iter_mut().zip(&g) {
                            *d -= x;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        let bv = self.value(*b);
                        let da = acc(&mut adj, a.0, g.len());
                        for ((d, x), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += x * y;
                        }
                    }
                    if self.tracked(*b) {
                        let av = self.value(*a);
                        let db = acc(&mut adj, b.0, g.len());
                        for ((d, x), y) in db.iter_mut().zip(&g).zip(av) {
                            *d += x * y;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let da = acc(&mut adj, a.0, g.len());
                    for (d, x) in da.iter_mut().zip(&g) {
                        *d += x * c;
                    }
                }
                Op::OneMinus(a) => {
                    let da = acc(&mut adj, a.0, g.len());
                    for (d, x) in da.iter_mut().zip(&g) {
                        *d -= x;
                    }
                }
                Op::Sigmoid(a) => {
                    let da = acc(&mut adj, a.0, g.len());
                    for ((d, x), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += x * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let da = acc(&mut adj, a.0, g.len());
                    for ((d, x), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += x * (1.0 - y * y);
                    }
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let da = acc(&mut adj, a.0, g.len());
                    for ((d, x), &v) in da.iter_mut().zip(&g).zip(av) {
                        if v > LOG_FLOOR {
                            *d += x / v;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let k = node.cols;
                    let da = acc(&mut adj, a.0, g.len());
                    for ((drow, grow), yrow) in
                        da.chunks_mut(k).zip(g.chunks(k)).zip(node.value.chunks(k))
                    {
                        let s = dot(grow, yrow);
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - s);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let k = node.cols;
                    let da = acc(&mut adj, a.0, g.len());
                    for ((drow, grow), yrow) in
                        da.chunks_mut(k).zip(g.chunks(k)).zip(node.value.chunks(k))
                    {
                        let s: f64 = grow.iter().sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += x - y.exp() * s;
                        }
                    }
                }
                Op::Transpose(a) => {
                    // node is k × r, source r × k
                    let (r, k) = (node.cols, node.rows);
                    let da = acc(&mut adj, a.0, g.len());
                    for i in 0..r {
                        for j in 0..k {
                            da[i * k + j] += g[j * r + i];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ka = self.cols(*a);
                    let kb = self.cols(*b);
                    let k = node.cols;
                    if self.tracked(*a) {
                        let da = acc(&mut adj, a.0, node.rows * ka);
                        for i in 0..node.rows {
                            for j in 0..ka {
                                da[i * ka + j] += g[i * k + j];
                            }
                        }
                    }
                    if self.tracked(*b) {
                        let db = acc(&mut adj, b.0, node.rows * kb);
                        for i in 0..node.rows {
                            for j in 0..kb {
                                db[i * kb + j] += g[i * k + ka + j];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.node(*p).value.len();
                        if self.tracked(*p) {
                            let dp = acc(&mut adj, p.0, len);
                            for (d, x) in dp.iter_mut().zip(&g[off..off + len]) {
                                *d += x;
                            }
                        }
                        off += len;
                    }
                }
                Op::SliceRows(a, lo) => {
                    let k = node.cols;
                    let len = self.node(*a).value.len();
                    let da = acc(&mut adj, a.0, len);
                    for (d, x) in da[lo * k..lo * k + g.len()].iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::SliceCols(a, lo) => {
                    let ka = self.cols(*a);
                    let k = node.cols;
                    let len = self.node(*a).value.len();
                    let da = acc(&mut adj, a.0, len);
                    for i in 0..node.rows {
                        for j in 0..k {
                            da[i * ka + lo + j] += g[i * k + j];
                        }
                    }
                }
                Op::MaxRows(a, arg) => {
                    let ka = self.cols(*a);
                    let len = self.node(*a).value.len();
                    let da = acc(&mut adj, a.0, len);
                    for (j, &i) in arg.iter().enumerate() {
                        da[i * ka + j] += g[j];
                    }
                }
                Op::MeanRows(a) => {
                    let [r, k] = self.shape(*a);
                    let inv = 1.0 / r.max(1) as f64;
                    let da = acc(&mut adj, a.0, r * k);
                    for row in da.chunks_mut(k) {
                        for (d, x) in row.iter_mut().zip(&g) {
                            *d += x * inv;
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.node(*a).value.len();
                    let da = acc(&mut adj, a.0, len);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::ScaleRows(a, s) => {
                    let k = node.cols;
                    if self.tracked(*a) {
                        let sv = self.value(*s);
                        let da = acc(&mut adj, a.0, g.len());
                        for ((drow, grow), w) in da.chunks_mut(k).zip(g.chunks(k)).zip(sv) {
                            for (d, x) in drow.iter_mut().zip(grow) {
                                *d += x * w;
                            }
                        }
                    }
                    if self.tracked(*s) {
                        let av = self.value(*a);
                        let ds = acc(&mut adj, s.0, node.rows);
                        for (i, d) in ds.iter_mut().enumerate() {
                            *d += dot(&g[i * k..(i + 1) * k], &av[i * k..(i + 1) * k]);
                        }
                    }
                }
                Op::CumSum(a, reverse) => {
                    let n = g.len();
                    let da = acc(&mut adj, a.0, n);
                    let mut run = 0.0;
                    if *reverse {
                        // out[i] = sum_{k>=i} a[k]  =>  da[k] = sum_{i<=k} g[i]
                        for k in 0..n {
                            run += g[k];
                            da[k] += run;
                        }
                    } else {
                        for k in (0..n).rev() {
                            run += g[k];
                            da[k] += run;
                        }
                    }
                }
                Op::Pick(a, i) => {
                    let len = self.node(*a).value.len();
                    let da = acc(&mut adj, a.0, len);
                    da[*i] += g[0];
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    adj[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, tracked: bool, g: &[f64]) {
    if tracked {
        let d = acc(adj, v.0, g.len());
        for (d, x) in d.iter_mut().zip(g) {
            *d += x;
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
