//! A minimal reverse-mode autodiff tape over dense row-major `f64` matrices.
//!
//! Only the operations the models need are provided. Row vectors are `1 x n`
//! matrices and linear layers compute `x W + b`.

use std::cell::RefCell;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Mat {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt shape {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn shape {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    SumSq(Var),
    StraightThrough(Var),
    KlStd {
        mu: Var,
        log_sigma: Var,
    },
    KlGauss {
        mu_q: Mat,
        sigma_q: Mat,
        mu_p: Var,
        log_sigma_p: Var,
    },
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records operations for a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Leaf node. Parameters and constants are both leaves; constants simply
    /// have their gradients ignored.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Stop-gradient: a fresh leaf holding the same value.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    fn unary(&self, a: Var, f: impl Fn(&Mat) -> Mat, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, matmul, Op::MatMul(a, b))
    }

    /// `a b^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, matmul_nt, Op::MatMulNt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "add shape");
                let mut out = x.clone();
                out.add_assign(y);
                out
            },
            Op::Add(a, b),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "sub shape");
                let mut out = x.clone();
                for (o, v) in out.data.iter_mut().zip(&y.data) {
                    *o -= v;
                }
                out
            },
            Op::Sub(a, b),
        )
    }

    /// `a + 1 b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(y.rows, 1, "add_row bias must be a row");
                assert_eq!(x.cols, y.cols, "add_row width");
                let mut out = x.clone();
                for r in 0..out.rows {
                    for (o, v) in out.row_mut(r).iter_mut().zip(&y.data) {
                        *o += v;
                    }
                }
                out
            },
            Op::AddRow(a, b),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| {
                assert_eq!(x.shape(), y.shape(), "mul shape");
                let mut out = x.clone();
                for (o, v) in out.data.iter_mut().zip(&y.data) {
                    *o *= v;
                }
                out
            },
            Op::Mul(a, b),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.map(|v| v * s), Op::Scale(a, s))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(sigmoid), Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::exp), Op::Exp(a))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(softplus), Op::Softplus(a))
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.map(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows {
                    let row = out.row_mut(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                out
            },
            Op::SoftmaxRows(a),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Mat> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let rows = mats[0].rows;
            let cols: usize = mats.iter().map(|m| m.cols).sum();
            let mut out = Mat::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for m in &mats {
                    assert_eq!(m.rows, rows, "concat_cols rows");
                    out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                    off += m.cols;
                }
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.cols, cols, "concat_rows cols");
                data.extend_from_slice(&m.data);
                rows += m.rows;
            }
            Mat::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start + len`.
    pub fn rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| Mat::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec()),
            Op::Rows(a, start),
        )
    }

    /// Columns `start..start + len`.
    pub fn cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = Mat::zeros(x.rows, len);
                for r in 0..x.rows {
                    out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
                }
                out
            },
            Op::Cols(a, start),
        )
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(
            a,
            |x| {
                let mut data = Vec::with_capacity(idx.len() * x.cols);
                for &i in idx {
                    data.extend_from_slice(x.row(i));
                }
                Mat::from_vec(idx.len(), x.cols, data)
            },
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    /// Column sums as a single row.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = Mat::zeros(1, x.cols);
                for r in 0..x.rows {
                    for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                out
            },
            Op::SumRows(a),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::row_vector(vec![x.data.iter().sum()]), Op::Sum(a))
    }

    pub fn sum_sq(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::row_vector(vec![x.sum_sq()]), Op::SumSq(a))
    }

    /// Forward value is `forward`, backward copies the incoming gradient to `input`.
    pub fn straight_through(&self, input: Var, forward: Mat) -> Var {
        assert_eq!(self.shape(input), forward.shape(), "straight-through shape");
        self.push(forward, Op::StraightThrough(input))
    }

    /// Per-row `KL(N(mu, exp(log_sigma)^2) || N(0, I))` as a column.
    pub fn kl_standard(&self, mu: Var, log_sigma: Var) -> Var {
        self.binary(
            mu,
            log_sigma,
            |m, s| {
                assert_eq!(m.shape(), s.shape(), "kl_standard shape");
                let mut out = Mat::zeros(m.rows, 1);
                for r in 0..m.rows {
                    out.data[r] = m
                        .row(r)
                        .iter()
                        .zip(s.row(r))
                        .map(|(mu, ls)| 0.5 * (mu * mu + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
                        .sum();
                }
                out
            },
            Op::KlStd { mu, log_sigma },
        )
    }

    /// Per-row `KL(N(mu_q, sigma_q^2) || N(mu_p, exp(log_sigma_p)^2))` as a column.
    /// Gradients flow only to the `p` side.
    pub fn kl_gaussian(&self, mu_q: Mat, sigma_q: Mat, mu_p: Var, log_sigma_p: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mp = &nodes[mu_p.0].value;
            let lp = &nodes[log_sigma_p.0].value;
            assert_eq!(mp.shape(), mu_q.shape(), "kl_gaussian shape");
            assert_eq!(lp.shape(), sigma_q.shape(), "kl_gaussian shape");
            let mut out = Mat::zeros(mp.rows, 1);
            for r in 0..mp.rows {
                let mut acc = 0.0;
                for c in 0..mp.cols {
                    let sq = sigma_q.at(r, c);
                    let d = mu_q.at(r, c) - mp.at(r, c);
                    let ls = lp.at(r, c);
                    acc += ls - sq.ln() + (sq * sq + d * d) * (-2.0 * ls).exp() / 2.0 - 0.5;
                }
                out.data[r] = acc;
            }
            out
        };
        self.push(
            value,
            Op::KlGauss {
                mu_q,
                sigma_q,
                mu_p,
                log_sigma_p,
            },
        )
    }

    /// Per-row `-log softmax(logits)[target]` as a column.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        self.unary(
            logits,
            |x| {
                assert_eq!(x.rows, targets.len(), "cross_entropy targets");
                let mut out = Mat::zeros(x.rows, 1);
                for r in 0..x.rows {
                    let lp = crate::numerics::log_softmax(x.row(r));
                    out.data[r] = -lp[targets[r]];
                }
                out
            },
            Op::CrossEntropy(logits, targets.to_vec()),
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, matmul_nt(&g, val(*b)));
                    acc(&mut grads, *b, matmul_tn(val(*a), &g));
                }
                Op::MatMulNt(a, b) => {
                    acc(&mut grads, *a, matmul(&g, val(*b)));
                    acc(&mut grads, *b, matmul_tn(&g, val(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    for (o, v) in ga.data.iter_mut().zip(&bv.data) {
                        *o *= v;
                    }
                    let mut gb = g.clone();
                    for (o, v) in gb.data.iter_mut().zip(&av.data) {
                        *o *= v;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    for (o, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *o *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    for (o, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *o *= y * (1.0 - y);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g.clone();
                    for (o, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *o *= y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    for (o, x) in ga.data.iter_mut().zip(&val(*a).data) {
                        *o *= sigmoid(*x);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    for (o, x) in ga.data.iter_mut().zip(&val(*a).data) {
                        if *x < *lo || *x > *hi {
                            *o = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols;
                        let mut gp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).rows;
                        let gp = Mat::from_vec(h, g.cols, g.data[off * g.cols..(off + h) * g.cols].to_vec());
                        off += h;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Rows(a, start) => {
                    let src = val(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    ga.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::Cols(a, start) => {
                    let src = val(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let src = val(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        ga.row_mut(r).copy_from_slice(&g.data);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Mat::filled(r, c, g.data[0]));
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g.data[0];
                    acc(&mut grads, *a, val(*a).map(|x| x * s));
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, g.clone()),
                Op::KlStd { mu, log_sigma } => {
                    let (m, s) = (val(*mu), val(*log_sigma));
                    let mut gm = Mat::zeros(m.rows, m.cols);
                    let mut gs = Mat::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        let gr = g.data[r];
                        for c in 0..m.cols {
                            gm.set(r, c, gr * m.at(r, c));
                            gs.set(r, c, gr * ((2.0 * s.at(r, c)).exp() - 1.0));
                        }
                    }
                    acc(&mut grads, *mu, gm);
                    acc(&mut grads, *log_sigma, gs);
                }
                Op::KlGauss {
                    mu_q,
                    sigma_q,
                    mu_p,
                    log_sigma_p,
                } => {
                    let (mp, lp) = (val(*mu_p), val(*log_sigma_p));
                    let mut gm = Mat::zeros(mp.rows, mp.cols);
                    let mut gs = Mat::zeros(mp.rows, mp.cols);
                    for r in 0..mp.rows {
                        let gr = g.data[r];
                        for c in 0..mp.cols {
                            let inv_var = (-2.0 * lp.at(r, c)).exp();
                            let d = mu_q.at(r, c) - mp.at(r, c);
                            let sq = sigma_q.at(r, c);
                            gm.set(r, c, -gr * d * inv_var);
                            gs.set(r, c, gr * (1.0 - (sq * sq + d * d) * inv_var));
                        }
                    }
                    acc(&mut grads, *mu_p, gm);
                    acc(&mut grads, *log_sigma_p, gs);
                }
                Op::CrossEntropy(a, targets) => {
                    let x = val(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (r, &t) in targets.iter().enumerate() {
                        let p = crate::numerics::softmax(x.row(r));
                        let gr = g.data[r];
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = gr * (p[c] - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    /// Builds a scalar loss touching every op and checks its gradient
    /// against central differences.
    fn composite(p: &[f64]) -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let a = tape.leaf(Mat::from_vec(2, 3, p[0..6].to_vec()));
        let b = tape.leaf(Mat::from_vec(3, 2, p[6..12].to_vec()));
        let bias = tape.leaf(Mat::from_vec(1, 2, p[12..14].to_vec()));
        let ab = tape.add_row(tape.matmul(a, b), bias);
        let t = tape.tanh(ab);
        let s = tape.sigmoid(tape.matmul_nt(t, t));
        let sm = tape.softmax_rows(tape.scale(s, 3.0));
        let cat = tape.concat_cols(&[sm, t]);
        let stacked = tape.concat_rows(&[cat, tape.rows(cat, 1, 1)]);
        let g = tape.gather_rows(stacked, &[2, 0, 2]);
        let c = tape.cols(g, 1, 3);
        let e = tape.exp(tape.clamp(c, -0.7, 0.9));
        let m = tape.mul(e, tape.softplus(tape.scale(e, -1.5)));
        let kl = tape.kl_standard(tape.cols(m, 0, 2), tape.cols(c, 1, 2));
        let klg = tape.kl_gaussian(
            Mat::from_vec(3, 1, vec![0.1, -0.3, 0.5]),
            Mat::from_vec(3, 1, vec![0.8, 1.2, 0.5]),
            tape.cols(c, 0, 1),
            tape.cols(m, 2, 1),
        );
        let ce = tape.cross_entropy(c, &[0, 2, 1]);
        let total = tape.add(
            tape.add(tape.sum(kl), tape.sum_sq(tape.sum_rows(klg))),
            tape.add(tape.sum(ce), tape.sum(tape.straight_through(ce, tape.value(ce)))),
        );
        let grads = tape.backward(total);
        let mut out = grads.wrt_or_zeros(a, 2, 3).data;
        out.extend(grads.wrt_or_zeros(b, 3, 2).data);
        out.extend(grads.wrt_or_zeros(bias, 1, 2).data);
        (tape.scalar(total), out)
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let p: Vec<f64> = (0..14).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
        let report = grad_check("composite", composite, &p, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn straight_through_copies_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::row_vector(vec![1.0, -2.0]));
        let y = tape.straight_through(x, Mat::row_vector(vec![5.0, 5.0]));
        assert_eq!(tape.value(y).data, vec![5.0, 5.0]);
        let g = tape.backward(tape.sum(tape.scale(y, 3.0)));
        assert_eq!(g.get(x).unwrap().data, vec![3.0, 3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::row_vector(vec![1.0, 2.0]));
        let y = tape.sum_sq(tape.detach(x));
        let g = tape.backward(y);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(2, 3, vec![0.5, -1., 2., 1., 0., -3.]);
        assert_eq!(matmul_nt(&a, &b), matmul(&a, &b.transpose()));
        assert_eq!(matmul_tn(&a, &b), matmul(&a.transpose(), &b));
    }
}
