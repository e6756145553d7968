//! Define-by-run computation graph with reverse-mode backward.

use crate::mat::Mat;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which entries of a row-softmax are allowed to carry probability mass.
#[derive(Clone, Debug)]
pub enum RowMask {
    None,
    /// Row `i` may attend to columns `0..=i` only.
    Causal,
    /// Same column allow-list for every row.
    Cols(Vec<bool>),
}

impl RowMask {
    #[inline]
    fn allowed(&self, r: usize, c: usize) -> bool {
        match self {
            RowMask::None => true,
            RowMask::Causal => c <= r,
            RowMask::Cols(cols) => cols[c],
        }
    }
}

enum Op<T> {
    Leaf,
    Detach,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat<T>, inv: Vec<T> },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    RowDot(Var, Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// A tape of matrix-valued nodes. Build it forward, then call
/// [`Graph::backward`] on a `1×1` output.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow on either tail.
#[inline]
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        -(T::one() + (-x).exp()).ln()
    } else {
        x - (T::one() + x.exp()).ln()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_f64(&mut self, value: &Mat<f64>) -> Var {
        self.leaf(value.lift())
    }

    /// Same values, no derivative information flows through (neither the
    /// backward adjoint nor any dual tangent).
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.detach());
        self.push(v, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols), vb.shape(), "add_row shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let v = self.value(a).map(|x| x * cc);
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x.re() > 0.0 { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Row-wise softmax. Masked-out entries get exactly zero probability.
    pub fn softmax_rows(&mut self, a: Var, mask: RowMask) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..x.cols {
                if mask.allowed(r, c) {
                    mx = mx.max(x.get(r, c).re());
                }
            }
            let mxv = T::from_f64(mx);
            let mut total = T::zero();
            for c in 0..x.cols {
                if mask.allowed(r, c) {
                    let e = (x.get(r, c) - mxv).exp();
                    out.set(r, c, e);
                    total += e;
                }
            }
            for c in 0..x.cols {
                if mask.allowed(r, c) {
                    let e = out.get(r, c);
                    out.set(r, c, e / total);
                }
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`, restricted to
    /// the columns allowed by `allowed` (all columns when `None`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], allowed: Option<&[bool]>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len(), "one target per logit row");
        let ok = |c: usize| allowed.map_or(true, |m| m[c]);
        let mut probs = Mat::zeros(x.rows, x.cols);
        let mut loss = T::zero();
        for r in 0..x.rows {
            assert!(ok(targets[r]), "target column {} is masked out", targets[r]);
            let mut mx = f64::NEG_INFINITY;
            for c in 0..x.cols {
                if ok(c) {
                    mx = mx.max(x.get(r, c).re());
                }
            }
            let mxv = T::from_f64(mx);
            let mut total = T::zero();
            for c in 0..x.cols {
                if ok(c) {
                    let e = (x.get(r, c) - mxv).exp();
                    probs.set(r, c, e);
                    total += e;
                }
            }
            for c in 0..x.cols {
                if ok(c) {
                    let e = probs.get(r, c);
                    probs.set(r, c, e / total);
                }
            }
            loss += total.ln() + mxv - x.get(r, targets[r]);
        }
        self.push(Mat::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Row-wise layer normalisation with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-8;
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols;
        let nn = T::from_f64(n as f64);
        let mut xhat = Mat::zeros(xv.rows, n);
        let mut out = Mat::zeros(xv.rows, n);
        let mut inv = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / nn;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / nn;
            let iv = T::one() / (var + T::from_f64(EPS)).sqrt();
            inv.push(iv);
            for c in 0..n {
                let h = (row[c] - mean) * iv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv })
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows);
        let out = Mat::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols);
            data.extend_from_slice(&x.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Column means, `1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, &v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = T::from_f64(1.0 / x.rows as f64);
        for o in out.data.iter_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in &self.value(a).data {
            s += v;
        }
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// Row-wise dot product, `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let mut out = Mat::zeros(x.rows, 1);
        for r in 0..x.rows {
            let mut s = T::zero();
            for (&p, &q) in x.row(r).iter().zip(y.row(r)) {
                s += p * q;
            }
            out.data[r] = s;
        }
        self.push(out, Op::RowDot(a, b))
    }

    /// Reverse sweep from the `1×1` node `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Detach => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, dy.matmul_t(vb));
                    acc(&mut grads, *b, va.t_matmul(&dy));
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, dy.matmul(vb));
                    acc(&mut grads, *b, dy.t_matmul(va));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, b) => {
                    let mut db = Mat::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (o, &g) in db.data.iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|g| -g));
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, dy.zip_map(vb, |g, y| g * y));
                    acc(&mut grads, *b, dy.zip_map(va, |g, x| g * x));
                }
                Op::Scale(a, c) => {
                    let cc = T::from_f64(*c);
                    acc(&mut grads, *a, dy.map(|g| g * cc));
                }
                Op::ScaleBy(a, s) => {
                    let va = self.value(*a);
                    let sv = self.scalar_value(*s);
                    let mut ds = T::zero();
                    for (&g, &x) in dy.data.iter().zip(&va.data) {
                        ds += g * x;
                    }
                    acc(&mut grads, *s, Mat::scalar(ds));
                    acc(&mut grads, *a, dy.map(|g| g * sv));
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    acc(&mut grads, *a, dy.zip_map(va, |g, x| if x.re() > 0.0 { g } else { T::zero() }));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, dy.zip_map(&node.value, |g, y| g * (T::one() - y * y)));
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, dy.zip_map(&node.value, |g, y| g * y * (T::one() - y)));
                }
                Op::LogSigmoid(a) => {
                    let va = self.value(*a);
                    acc(&mut grads, *a, dy.zip_map(va, |g, x| g * sigmoid(-x)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let mut dot = T::zero();
                        for c in 0..y.cols {
                            dot += dy.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols {
                            dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let g = dy.data[0];
                    let mut dx = probs.map(|p| p * g);
                    for (r, &t) in targets.iter().enumerate() {
                        let cur = dx.get(r, t);
                        dx.set(r, t, cur - g);
                    }
                    acc(&mut grads, *logits, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv } => {
                    let gv = self.value(*gain);
                    let (rows, n) = xhat.shape();
                    let nn = T::from_f64(n as f64);
                    let mut dg = Mat::zeros(1, n);
                    let mut db = Mat::zeros(1, n);
                    let mut dx = Mat::zeros(rows, n);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let g = dy.get(r, c);
                            let h = xhat.get(r, c);
                            dg.data[c] += g * h;
                            db.data[c] += g;
                            dxhat[c] = g * gv.data[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * h;
                        }
                        let k = inv[r] / nn;
                        for c in 0..n {
                            dx.set(r, c, k * (nn * dxhat[c] - s1 - xhat.get(r, c) * s2));
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.shape(*table);
                    let mut dt = Mat::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut dx = Mat::zeros(rows, cols);
                    dx.data[start * cols..(start + dy.rows) * cols].copy_from_slice(&dy.data);
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let dp = Mat::from_vec(rows, cols, dy.data[off..off + rows * cols].to_vec());
                        off += rows * cols;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let inv = T::from_f64(1.0 / rows as f64);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, &g) in dx.row_mut(r).iter_mut().zip(&dy.data) {
                            *o = g * inv;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Mat::filled(rows, cols, dy.data[0]));
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(va.rows, va.cols);
                    let mut dbm = Mat::zeros(vb.rows, vb.cols);
                    for r in 0..va.rows {
                        let g = dy.data[r];
                        for c in 0..va.cols {
                            da.set(r, c, g * vb.get(r, c));
                            dbm.set(r, c, g * va.get(r, c));
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, dbm);
                }
            }
        }
        Grads { grads }
    }
}
