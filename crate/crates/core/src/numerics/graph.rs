use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::{gemm, shape_err, Mat, NumError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    MulConst(Var, Vec<f64>),
    MaskedLogSoftmax(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    GroupSumRows(Var, usize),
    RepeatRows(Var, usize),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Attention(Box<AttnRecord>),
}

#[derive(Debug, Clone)]
struct AttnRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    nq: usize,
    nk: usize,
    qmask: Vec<f64>,
    /// softmax weights laid out [group][head][query][key]
    probs: Vec<f64>,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// One forward pass; values are computed eagerly and `backward` replays
/// the recorded operations in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Mat>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `v`'s value cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.input(m)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&a| f(a)).collect();
        let m = Mat::from_vec(xv.rows, xv.cols, data);
        let ng = self.needs(x);
        self.push(m, op, ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let m = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(m, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return shape_err(format!("matmul {ra}×{ca} · {rb}×{cb}"));
        }
        let mut out = Mat::zeros(ra, cb);
        gemm(1.0, self.value(a), false, self.value(b), false, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (1, c) {
            return shape_err(format!("bias {:?} for {r}×{c}", self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bv = &self.value(b).data;
        for row in out.data.chunks_mut(c.max(1)) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "minimum")?;
        Ok(self.binary(a, b, f64::min, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |a| a.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all entries as a `1×1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.needs(x);
        self.push(Mat::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().sum()).collect();
        let m = Mat::from_vec(xv.rows, 1, data);
        let ng = self.needs(x);
        self.push(m, Op::SumCols(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return shape_err(format!("slice_cols {start}+{len} of {c}"));
        }
        let xv = self.value(x);
        let mut out = Mat::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return shape_err(format!("reshape {:?} to {rows}×{cols}", xv.shape()));
        }
        let m = Mat::from_vec(rows, cols, xv.data.clone());
        let ng = self.needs(x);
        Ok(self.push(m, Op::Reshape(x), ng))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Mat) -> Result<Var, NumError> {
        if self.shape(x) != c.shape() {
            return shape_err("mul_const shape");
        }
        let xv = self.value(x);
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a * b).collect();
        let m = Mat::from_vec(xv.rows, xv.cols, data);
        let ng = self.needs(x);
        Ok(self.push(m, Op::MulConst(x, c.data.clone()), ng))
    }

    /// Scales every row `i` by `w[i]`.
    pub fn row_scale(&mut self, x: Var, w: &[f64]) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if w.len() != r {
            return shape_err("row_scale length");
        }
        let mut data = Vec::with_capacity(r * c);
        for &wi in w {
            data.extend(std::iter::repeat_n(wi, c));
        }
        self.mul_const(x, &Mat::from_vec(r, c, data))
    }

    /// Row-wise log-softmax restricted to entries where `mask` is 1.
    /// Masked entries are reported as 0 (their probability is exactly 0).
    pub fn masked_log_softmax(&mut self, x: Var, mask: &Mat) -> Result<Var, NumError> {
        if self.shape(x) != mask.shape() {
            return shape_err("masked_log_softmax mask shape");
        }
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let (row, mrow) = (xv.row(r), mask.row(r));
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m > 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return shape_err("masked_log_softmax: row with no available entry");
            }
            let lse = max
                + row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(&v, _)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                if mrow[c] > 0.0 {
                    *o = row[c] - lse;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskedLogSoftmax(x, mask.data.clone()), ng))
    }

    /// Picks `x[i, idx[i]]` into an `r×1` column.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return shape_err("gather indices");
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        let m = Mat::from_vec(r, 1, data);
        let ng = self.needs(x);
        Ok(self.push(m, Op::Gather(x, idx.to_vec()), ng))
    }

    /// Sums consecutive blocks of `group` rows.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return shape_err(format!("group_sum_rows {r} by {group}"));
        }
        let xv = self.value(x);
        let mut out = Mat::zeros(r / group, c);
        for i in 0..r {
            let dst = out.row_mut(i / group);
            for (d, s) in dst.iter_mut().zip(xv.row(i)) {
                *d += s;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::GroupSumRows(x, group), ng))
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows * k, xv.cols);
        for i in 0..xv.rows * k {
            out.row_mut(i).copy_from_slice(xv.row(i / k));
        }
        let ng = self.needs(x);
        self.push(out, Op::RepeatRows(x, k), ng)
    }

    /// Grouped multi-head scaled dot-product attention. Queries come in
    /// groups of `nq` rows and attend to the `nk` key/value rows of the same
    /// group. Columns split into `heads` equal slices of width `dh`; scores
    /// are scaled by `1/sqrt(dh)`. Rows with `qmask = 0` output zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        qmask: &[f64],
    ) -> Result<Var, NumError> {
        let (rq, cq) = self.shape(q);
        let (rk, ck) = self.shape(k);
        if self.shape(v) != (rk, ck) || cq != ck || heads == 0 || cq % heads != 0 {
            return shape_err("attention: q/k/v widths");
        }
        if nq == 0 || nk == 0 || rq % nq != 0 || rk % nk != 0 || rq / nq != rk / nk {
            return shape_err("attention: group sizes");
        }
        if qmask.len() != rq {
            return shape_err("attention: query mask length");
        }
        let groups = rq / nq;
        let dh = cq / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros(rq, cq);
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut scores = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..nq {
                    let qi = g * nq + i;
                    if qmask[qi] == 0.0 {
                        continue;
                    }
                    let qrow = &qv.row(qi)[cs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv.row(g * nk + j)[cs.clone()];
                        *s = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(*s);
                    }
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let base = ((g * heads + h) * nq + i) * nk;
                    for j in 0..nk {
                        let p = (scores[j] - max).exp() / z;
                        probs[base + j] = p;
                        let vrow = &vv.row(g * nk + j)[cs.clone()];
                        for (o, x) in out.row_mut(qi)[cs.clone()].iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let rec = AttnRecord {
            q,
            k,
            v,
            heads,
            nq,
            nk,
            qmask: qmask.to_vec(),
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(rec)), ng))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<(), NumError> {
        if self.shape(out) != (1, 1) {
            return shape_err("backward needs a scalar output");
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Mat::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Mat) -> Mat) {
        if self.nodes[v.0].needs_grad {
            let g = f(&self.nodes[v.0].value);
            self.acc(v, g);
        }
    }

    fn map_grad(g: &Mat, x: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        let data = g.data.iter().zip(&x.data).map(|(&gi, &xi)| f(gi, xi)).collect();
        Mat::from_vec(g.rows, g.cols, data)
    }

    fn propagate(&mut self, i: usize, g: &Mat) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let (bv, av) = (&self.nodes[b.0].value, &self.nodes[a.0].value);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    gemm(1.0, g, false, bv, true, &mut ga);
                    self.acc(a, ga);
                }
                if self.needs(b) {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut gb = Mat::zeros(bv.rows, bv.cols);
                    gemm(1.0, av, true, g, false, &mut gb);
                    self.acc(b, gb);
                }
            }
            Op::AddBias(x, b) => {
                self.acc(x, g.clone());
                if self.needs(b) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, s) in gb.data.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    self.acc(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc_with(b, |_| Self::map_grad(g, g, |gi, _| -gi));
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                self.acc_with(a, |_| Self::map_grad(g, &bv, |gi, y| gi * y));
                let av = self.nodes[a.0].value.clone();
                self.acc_with(b, |_| Self::map_grad(g, &av, |gi, x| gi * x));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                // ties route the gradient to the first argument
                let pick_a: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| f64::from(x <= y)).collect();
                let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&pick_a).map(|(gi, p)| gi * p).collect());
                let gb = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&pick_a).map(|(gi, p)| gi * (1.0 - p)).collect());
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Scale(x, c) => self.acc_with(x, |_| Self::map_grad(g, g, |gi, _| gi * c)),
            Op::AddScalar(x) => self.acc(x, g.clone()),
            Op::Tanh(x) => {
                let y = self.nodes[i].value.clone();
                self.acc_with(x, |_| Self::map_grad(g, &y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.clone();
                self.acc_with(x, |_| Self::map_grad(g, &y, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.clone();
                self.acc_with(x, |_| Self::map_grad(g, &y, |gi, yi| gi * yi));
            }
            Op::Ln(x) => self.acc_with(x, |xv| Self::map_grad(g, xv, |gi, xi| gi / xi)),
            Op::Square(x) => self.acc_with(x, |xv| Self::map_grad(g, xv, |gi, xi| 2.0 * gi * xi)),
            Op::Clamp(x, lo, hi) => self.acc_with(x, |xv| {
                Self::map_grad(g, xv, |gi, xi| if xi < lo || xi > hi { 0.0 } else { gi })
            }),
            Op::Sum(x) => self.acc_with(x, |xv| Mat::from_vec(xv.rows, xv.cols, vec![g.data[0]; xv.len()])),
            Op::SumCols(x) => self.acc_with(x, |xv| {
                let mut m = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    m.row_mut(r).fill(g.data[r]);
                }
                m
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    if self.needs(p) {
                        let mut gp = Mat::zeros(r, c);
                        for row in 0..r {
                            gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                        }
                        self.acc(p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols(x, start) => self.acc_with(x, |xv| {
                let mut m = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    m.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                }
                m
            }),
            Op::Reshape(x) => self.acc_with(x, |xv| Mat::from_vec(xv.rows, xv.cols, g.data.clone())),
            Op::MulConst(x, c) => self.acc_with(x, |xv| {
                Mat::from_vec(xv.rows, xv.cols, g.data.iter().zip(&c).map(|(a, b)| a * b).collect())
            }),
            Op::MaskedLogSoftmax(x, mask) => {
                let y = self.nodes[i].value.clone();
                self.acc_with(x, |_| {
                    let mut m = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let off = r * y.cols;
                        let gsum: f64 = (0..y.cols).filter(|&c| mask[off + c] > 0.0).map(|c| g.data[off + c]).sum();
                        for c in 0..y.cols {
                            if mask[off + c] > 0.0 {
                                m.data[off + c] = g.data[off + c] - y.data[off + c].exp() * gsum;
                            }
                        }
                    }
                    m
                });
            }
            Op::Gather(x, idx) => self.acc_with(x, |xv| {
                let mut m = Mat::zeros(xv.rows, xv.cols);
                for (r, &j) in idx.iter().enumerate() {
                    m.data[r * xv.cols + j] = g.data[r];
                }
                m
            }),
            Op::GroupSumRows(x, group) => self.acc_with(x, |xv| {
                let mut m = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    m.row_mut(r).copy_from_slice(g.row(r / group));
                }
                m
            }),
            Op::RepeatRows(x, k) => self.acc_with(x, |xv| {
                let mut m = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    for (d, s) in m.row_mut(r / k).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                m
            }),
            Op::Attention(rec) => self.attention_backward(&rec, g),
        }
    }

    fn attention_backward(&mut self, rec: &AttnRecord, g: &Mat) {
        let (qv, kv, vv) = (
            &self.nodes[rec.q.0].value,
            &self.nodes[rec.k.0].value,
            &self.nodes[rec.v.0].value,
        );
        let (rq, c) = qv.shape();
        let groups = rq / rec.nq;
        let dh = c / rec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qv.rows, c);
        let mut gk = Mat::zeros(kv.rows, c);
        let mut gv = Mat::zeros(vv.rows, c);
        let mut dp = vec![0.0; rec.nk];
        for grp in 0..groups {
            for h in 0..rec.heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..rec.nq {
                    let qi = grp * rec.nq + i;
                    if rec.qmask[qi] == 0.0 {
                        continue;
                    }
                    let base = ((grp * rec.heads + h) * rec.nq + i) * rec.nk;
                    let p = &rec.probs[base..base + rec.nk];
                    let go = &g.row(qi)[cs.clone()];
                    for j in 0..rec.nk {
                        let kj = grp * rec.nk + j;
                        dp[j] = go.iter().zip(&vv.row(kj)[cs.clone()]).map(|(a, b)| a * b).sum();
                        for (d, x) in gv.row_mut(kj)[cs.clone()].iter_mut().zip(go) {
                            *d += p[j] * x;
                        }
                    }
                    let mix: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..rec.nk {
                        let ds = p[j] * (dp[j] - mix) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = grp * rec.nk + j;
                        let krow: Vec<f64> = kv.row(kj)[cs.clone()].to_vec();
                        for (d, x) in gq.row_mut(qi)[cs.clone()].iter_mut().zip(&krow) {
                            *d += ds * x;
                        }
                        let qrow: Vec<f64> = qv.row(qi)[cs.clone()].to_vec();
                        for (d, x) in gk.row_mut(kj)[cs.clone()].iter_mut().zip(&qrow) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        self.acc(rec.q, gq);
        self.acc(rec.k, gk);
        self.acc(rec.v, gv);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
