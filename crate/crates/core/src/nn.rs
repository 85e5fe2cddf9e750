//! Named parameter storage, the few layer types the models use, and Adam.

use std::ops::Index;

use crate::numerics::RngStream;
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Mat>,
}

/// Tape handles for every parameter of a [`ParamSet`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.mats.push(value);
        ParamId(self.mats.len() - 1)
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut RngStream) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.mats[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.mats[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.mats)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(|m| m.data.len()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.mats.iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }

    /// Gradient for every parameter, zero where nothing flowed.
    pub fn collect_grads(&self, grads: &Grads, bound: &Bound) -> Vec<Mat> {
        self.mats
            .iter()
            .zip(&bound.vars)
            .map(|(m, v)| grads.wrt_or_zeros(*v, m.rows, m.cols))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.mats.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat parameter length");
        let mut off = 0;
        for m in &mut self.mats {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Offset of each block within [`ParamSet::flatten`].
    pub fn offsets(&self) -> Vec<(String, usize, usize)> {
        let mut off = 0;
        self.names
            .iter()
            .zip(&self.mats)
            .map(|(n, m)| {
                let start = off;
                off += m.data.len();
                (n.clone(), start, m.data.len())
            })
            .collect()
    }
}

pub fn flatten_grads(grads: &[Mat]) -> Vec<f64> {
    grads.iter().flat_map(|m| m.data.iter().copied()).collect()
}

pub fn add_grads(into: &mut [Mat], other: &[Mat]) {
    for (a, b) in into.iter_mut().zip(other) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

pub fn scale_grads(grads: &mut [Mat], s: f64) {
    for g in grads {
        for x in &mut g.data {
            *x *= s;
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// `x W + b`
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut RngStream) -> Self {
        Linear {
            w: ps.add_weight(&format!("{name}.w"), input, output, rng),
            b: ps.add_zeros(&format!("{name}.b"), 1, output),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        tape.add_row(tape.matmul(x, p[self.w]), p[self.b])
    }
}

/// Elman cell: `h' = tanh(x W + h U + b)`.
#[derive(Clone, Copy, Debug)]
pub struct RnnCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl RnnCell {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        RnnCell {
            w: ps.add_weight(&format!("{name}.w"), input, hidden, rng),
            u: ps.add_weight(&format!("{name}.u"), hidden, hidden, rng),
            b: ps.add_zeros(&format!("{name}.b"), 1, hidden),
            hidden,
        }
    }

    pub fn step(&self, tape: &Tape, p: &Bound, x: Var, h: Var) -> Var {
        let pre = tape.add(tape.matmul(x, p[self.w]), tape.matmul(h, p[self.u]));
        tape.tanh(tape.add_row(pre, p[self.b]))
    }
}

/// Single LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let w = ps.add_weight(&format!("{name}.w"), input, 4 * hidden, rng);
        let u = ps.add_weight(&format!("{name}.u"), hidden, 4 * hidden, rng);
        let mut bias = Mat::zeros(1, 4 * hidden);
        for v in &mut bias.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = ps.add(format!("{name}.b"), bias);
        LstmCell { w, u, b, hidden }
    }

    pub fn step(&self, tape: &Tape, p: &Bound, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hs = self.hidden;
        let pre = tape.add(tape.matmul(x, p[self.w]), tape.matmul(h, p[self.u]));
        let gates = tape.add_row(pre, p[self.b]);
        let i = tape.sigmoid(tape.cols(gates, 0, hs));
        let f = tape.sigmoid(tape.cols(gates, hs, hs));
        let g = tape.tanh(tape.cols(gates, 2 * hs, hs));
        let o = tape.sigmoid(tape.cols(gates, 3 * hs, hs));
        let c_next = tape.add(tape.mul(f, c), tape.mul(i, g));
        let h_next = tape.mul(o, tape.tanh(c_next));
        (h_next, c_next)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.mats().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let p = &mut params.mats[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Step size after halving every `every` steps.
pub fn decayed_lr(base: f64, factor: f64, every: usize, step: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((step / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn lstm_step_gradient() {
        let mut rng = RngStream::new(11);
        let mut ps = ParamSet::new();
        let cell = LstmCell::new(&mut ps, "lstm", 3, 4, &mut rng);
        let x0 = Mat::row_vector(vec![0.3, -0.2, 0.9]);
        let x1 = Mat::row_vector(vec![-0.5, 0.1, 0.4]);
        let flat = ps.flatten();
        let report = grad_check(
            "lstm",
            |theta| {
                let mut ps = ps.clone();
                ps.assign_flat(theta);
                let tape = Tape::new();
                let p = ps.bind(&tape);
                let zero = tape.leaf(Mat::zeros(1, 4));
                let (h, c) = cell.step(&tape, &p, tape.leaf(x0.clone()), zero, zero);
                let (h, _) = cell.step(&tape, &p, tape.leaf(x1.clone()), h, c);
                let loss = tape.sum_sq(h);
                let g = tape.backward(loss);
                (tape.scalar(loss), flatten_grads(&ps.collect_grads(&g, &p)))
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Mat::row_vector(vec![3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Mat::row_vector(vec![2.0]));
        let mut adam = Adam::new(&ps);
        for _ in 0..2000 {
            let x = ps.get(id).data[0];
            adam.step(&mut ps, &[Mat::row_vector(vec![2.0 * x])], 0.01);
        }
        assert!(ps.get(id).data[0].abs() < 1e-2);
    }

    #[test]
    fn lr_decay_schedule() {
        assert_eq!(decayed_lr(1e-3, 0.5, 2000, 1999), 1e-3);
        assert_eq!(decayed_lr(1e-3, 0.5, 2000, 2000), 5e-4);
        assert_eq!(decayed_lr(1e-3, 0.5, 2000, 4100), 2.5e-4);
    }
}
