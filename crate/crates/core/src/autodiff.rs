//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks it in
//! reverse. Parameter leaves borrow their values, so building a tape never
//! copies model weights.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, Matrix, RMS_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Val<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Silu(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
    Softmax(Var),
    MaskedSoftmax { x: Var, g: Var, e: Matrix, z: Vec<f64> },
    BuildG(Var),
    Ste(Var),
    Col(Var, usize),
    Mean(Var),
    Abs(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node<'p> {
    val: Val<'p>,
    op: Op,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<&'p Matrix>,
    param_vars: Vec<Option<Var>>,
    ste_adjoint_scale: f64,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient of parameter `i`, `None` if it did not influence the output.
    pub fn param(&self, i: usize) -> Option<&Matrix> {
        self.params[i].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: Vec<&'p Matrix>) -> Self {
        let n = params.len();
        Self {
            nodes: Vec::new(),
            params,
            param_vars: vec![None; n],
            ste_adjoint_scale: 1.0,
        }
    }

    /// Multiplies every STE adjoint by `scale`. Anything other than 1 breaks
    /// the pass-through; used to check that gradient suites catch it.
    pub fn with_ste_adjoint_scale(mut self, scale: f64) -> Self {
        self.ste_adjoint_scale = scale;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, val: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            val: Val::Owned(val),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].val {
            Val::Owned(m) => m,
            Val::Borrowed(m) => m,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf holding the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.leaf(m)
    }

    /// Parameter leaf `i`; repeated calls return the same node.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node {
            val: Val::Borrowed(self.params[i]),
            op: Op::Param(i),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(m, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = kernels::matmul_transb(self.value(a), self.value(b))?;
        Ok(self.push(m, Op::MatMulTransB(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        Ok(self.push(m, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut m = self.value(b).clone();
        m.scale(-1.0);
        m.add_assign(self.value(a));
        Ok(self.push(m, Op::Sub(a, b)))
    }

    /// Adds the `1 × c` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xm, bm) = (self.value(x), self.value(bias));
        if bm.rows() != 1 || bm.cols() != xm.cols() {
            return Err(shape_err("add_bias", xm, bm));
        }
        let mut m = xm.clone();
        kernels::add_row_bias(&mut m, bm.data());
        Ok(self.push(m, Op::AddBias(x, bias)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let m = Matrix::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(m, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut m = self.value(a).clone();
        m.scale(s);
        self.push(m, Op::Scale(a, s))
    }

    /// `a + c` for a constant matrix `c` with no gradient.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(shape_err("add_const", x, c));
        }
        let mut m = x.clone();
        m.add_assign(c);
        Ok(self.push(m, Op::AddConst(a)))
    }

    /// Row-wise RMS normalization with a learned `1 × c` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xm, gm) = (self.value(x), self.value(gain));
        if gm.rows() != 1 || gm.cols() != xm.cols() {
            return Err(shape_err("rms_norm", xm, gm));
        }
        let out = kernels::rms_norm(xm, gm.data());
        let c = xm.cols() as f64;
        let inv = (0..xm.rows())
            .map(|r| {
                let ms = xm.row(r).iter().map(|v| v * v).sum::<f64>() / c;
                1.0 / libm::sqrt(ms + RMS_EPS)
            })
            .collect();
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        kernels::silu_inplace(&mut m);
        self.push(m, Op::Silu(a))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x).slice_rows(start, len);
        self.push(m, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x).slice_cols(start, len);
        self.push(m, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let m = Matrix::vstack(&refs)?;
        Ok(self.push(m, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut m = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            if pm.rows() != rows {
                return Err(shape_err("concat_cols", &m, pm));
            }
            m.set_cols(off, pm);
            off += pm.cols();
        }
        Ok(self.push(m, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `idx` of `x` (repeats allowed); the adjoint scatters back.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xm = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xm.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: xm.shape(),
                rhs: (bad, 1),
            });
        }
        let m = xm.select_rows(idx);
        Ok(self.push(m, Op::Gather { x, idx: idx.to_vec() }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let m = kernels::softmax_rows(self.value(x));
        self.push(m, Op::Softmax(x))
    }

    /// `P_ij = G_ij·exp(x_ij) / Σ_k G_ik·exp(x_ik)`, differentiable in both
    /// the scores and the real-valued mask `G`.
    pub fn masked_softmax(&mut self, x: Var, g: Var) -> Result<Var> {
        self.same_shape("masked_softmax", x, g)?;
        let (xm, gm) = (self.value(x), self.value(g));
        let (n, m) = xm.shape();
        let mut e = Matrix::zeros(n, m);
        let mut p = Matrix::zeros(n, m);
        let mut z = vec![0.0; n];
        for i in 0..n {
            let (xr, gr) = (xm.row(i), gm.row(i));
            let mut max = f64::NEG_INFINITY;
            for (&xv, &gv) in xr.iter().zip(gr) {
                if gv != 0.0 && xv > max {
                    max = xv;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyMaskRow { row: i });
            }
            let er = e.row_mut(i);
            for (ev, &xv) in er.iter_mut().zip(xr) {
                *ev = libm::exp((xv - max).min(700.0));
            }
            let pr = p.row_mut(i);
            let mut sum = 0.0;
            for ((pv, &ev), &gv) in pr.iter_mut().zip(e.row(i)).zip(gr) {
                *pv = gv * ev;
                sum += *pv;
            }
            let inv = 1.0 / sum;
            for pv in p.row_mut(i) {
                *pv *= inv;
            }
            z[i] = sum;
        }
        Ok(self.push(p, Op::MaskedSoftmax { x, g, e, z }))
    }

    /// `N × N` attention mask from an `N × 1` keep column:
    /// `G_ij = m_j` for `j < i`, `G_ii = 1`, `G_ij = 0` for `j > i`.
    pub fn build_g(&mut self, keep: Var) -> Result<Var> {
        let k = self.value(keep);
        if k.cols() != 1 {
            return Err(shape_err("build_g", k, k));
        }
        let n = k.rows();
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                g.set(i, j, k.get(j, 0));
            }
            g.set(i, i, 1.0);
        }
        Ok(self.push(g, Op::BuildG(keep)))
    }

    /// Straight-through hard one-hot of each row (argmax, lower index on
    /// ties); the adjoint passes through unchanged.
    pub fn ste(&mut self, relaxed: Var) -> Var {
        let r = self.value(relaxed);
        let mut h = Matrix::zeros(r.rows(), r.cols());
        for i in 0..r.rows() {
            h.set(i, kernels::argmax(r.row(i)), 1.0);
        }
        self.push(h, Op::Ste(relaxed))
    }

    /// Column `j` as an `N × 1` matrix.
    pub fn col(&mut self, x: Var, j: usize) -> Var {
        let m = self.value(x).slice_cols(j, 1);
        self.push(m, Op::Col(x, j))
    }

    /// Mean of all entries as a `1 × 1` value; 0 for an empty matrix.
    pub fn mean(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let n = xm.data().len();
        let v = if n == 0 {
            0.0
        } else {
            xm.data().iter().sum::<f64>() / n as f64
        };
        self.push(Matrix::filled(1, 1, v), Op::Mean(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let data = xm.data().iter().map(|v| libm::fabs(*v)).collect();
        let m = Matrix::from_vec(xm.rows(), xm.cols(), data).expect("same shape");
        self.push(m, Op::Abs(x))
    }

    /// Mean next-token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        if lm.rows() != targets.len() || lm.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lm.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lm.cols()) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: lm.cols(),
            });
        }
        let probs = kernels::softmax_rows(lm);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lm.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Adjoints of every node with respect to the `1 × 1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut g: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let o = self.value(out);
        g[out.0] = Some(Matrix::filled(o.rows(), o.cols(), 1.0));
        let mut params: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        for idx in (0..=out.0).rev() {
            let Some(gy) = g[idx].take() else { continue };
            self.backprop(idx, &gy, &mut g, &mut params);
            g[idx] = Some(gy);
        }
        Gradients { nodes: g, params }
    }

    fn backprop(&self, idx: usize, gy: &Matrix, g: &mut [Option<Matrix>], params: &mut [Option<Matrix>]) {
        let val = |v: Var| self.value(v);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(i) => accumulate(&mut params[*i], gy.clone()),
            Op::MatMul(a, b) => {
                let ga = kernels::matmul_transb(gy, val(*b)).expect("shape");
                let gb = kernels::matmul_transa(val(*a), gy).expect("shape");
                accumulate(&mut g[a.0], ga);
                accumulate(&mut g[b.0], gb);
            }
            Op::MatMulTransB(a, b) => {
                let ga = kernels::matmul(gy, val(*b)).expect("shape");
                let gb = kernels::matmul_transa(gy, val(*a)).expect("shape");
                accumulate(&mut g[a.0], ga);
                accumulate(&mut g[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut g[a.0], gy.clone());
                accumulate(&mut g[b.0], gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut g[a.0], gy.clone());
                let mut n = gy.clone();
                n.scale(-1.0);
                accumulate(&mut g[b.0], n);
            }
            Op::AddBias(x, b) => {
                let mut gb = Matrix::zeros(1, gy.cols());
                for r in 0..gy.rows() {
                    for (acc, v) in gb.row_mut(0).iter_mut().zip(gy.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(&mut g[x.0], gy.clone());
                accumulate(&mut g[b.0], gb);
            }
            Op::Mul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let ga = zip_map(gy, bm, |p, q| p * q);
                let gb = zip_map(gy, am, |p, q| p * q);
                accumulate(&mut g[a.0], ga);
                accumulate(&mut g[b.0], gb);
            }
            Op::Scale(a, s) => {
                let mut m = gy.clone();
                m.scale(*s);
                accumulate(&mut g[a.0], m);
            }
            Op::AddConst(a) => accumulate(&mut g[a.0], gy.clone()),
            Op::RmsNorm { x, gain, inv } => {
                let (xm, gm) = (val(*x), val(*gain));
                let c = xm.cols();
                let mut gx = Matrix::zeros(xm.rows(), c);
                let mut gg = Matrix::zeros(1, c);
                for r in 0..xm.rows() {
                    let (xr, dy, s) = (xm.row(r), gy.row(r), inv[r]);
                    let mut dot = 0.0;
                    for j in 0..c {
                        gg.row_mut(0)[j] += dy[j] * xr[j] * s;
                        dot += dy[j] * gm.get(0, j) * xr[j];
                    }
                    let k = dot * s * s * s / c as f64;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = gm.get(0, j) * dy[j] * s - xr[j] * k;
                    }
                }
                accumulate(&mut g[x.0], gx);
                accumulate(&mut g[gain.0], gg);
            }
            Op::Silu(a) => {
                let gx = zip_map(gy, val(*a), |d, x| {
                    let s = kernels::sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                });
                accumulate(&mut g[a.0], gx);
            }
            Op::SliceRows { x, start } => {
                let xm = val(*x);
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..gy.rows() {
                    gx.row_mut(start + r).copy_from_slice(gy.row(r));
                }
                accumulate(&mut g[x.0], gx);
            }
            Op::SliceCols { x, start } => {
                let xm = val(*x);
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                gx.set_cols(*start, gy);
                accumulate(&mut g[x.0], gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).rows();
                    accumulate(&mut g[p.0], gy.slice_rows(off, n));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).cols();
                    accumulate(&mut g[p.0], gy.slice_cols(off, n));
                    off += n;
                }
            }
            Op::Gather { x, idx } => {
                let xm = val(*x);
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(gy.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut g[x.0], gx);
            }
            Op::Softmax(x) => {
                let p = self.value(Var(idx));
                let mut gx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, dr) = (p.row(r), gy.row(r));
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &pv), &dv) in gx.row_mut(r).iter_mut().zip(pr).zip(dr) {
                        *o = pv * (dv - dot);
                    }
                }
                accumulate(&mut g[x.0], gx);
            }
            Op::MaskedSoftmax { x, g: gv, e, z } => {
                let p = self.value(Var(idx));
                let gm = val(*gv);
                let (n, m) = p.shape();
                let mut gx = Matrix::zeros(n, m);
                let mut gg = Matrix::zeros(n, m);
                for i in 0..n {
                    let (pr, dr) = (p.row(i), gy.row(i));
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        let du = (dr[j] - dot) / z[i];
                        gg.set(i, j, du * e.get(i, j));
                        gx.set(i, j, du * e.get(i, j) * gm.get(i, j));
                    }
                }
                accumulate(&mut g[x.0], gx);
                accumulate(&mut g[gv.0], gg);
            }
            Op::BuildG(keep) => {
                let n = gy.rows();
                let mut gk = Matrix::zeros(n, 1);
                for i in 0..n {
                    for j in 0..i {
                        gk.data_mut()[j] += gy.get(i, j);
                    }
                }
                accumulate(&mut g[keep.0], gk);
            }
            Op::Ste(r) => {
                let mut gr = gy.clone();
                if self.ste_adjoint_scale != 1.0 {
                    gr.scale(self.ste_adjoint_scale);
                }
                accumulate(&mut g[r.0], gr)
            }
            Op::Col(x, j) => {
                let xm = val(*x);
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                gx.set_cols(*j, gy);
                accumulate(&mut g[x.0], gx);
            }
            Op::Mean(x) => {
                let xm = val(*x);
                let n = xm.data().len();
                if n > 0 {
                    let v = gy.get(0, 0) / n as f64;
                    accumulate(&mut g[x.0], Matrix::filled(xm.rows(), xm.cols(), v));
                }
            }
            Op::Abs(x) => {
                let gx = zip_map(gy, val(*x), |d, v| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                });
                accumulate(&mut g[x.0], gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = gy.get(0, 0) / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - 1.0);
                }
                gl.scale(s);
                accumulate(&mut g[logits.0], gl);
            }
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// Central finite-difference gradient of a scalar function of one matrix.
pub fn numeric_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Largest relative error `|a − n| / max(1, |a|, |n|)` over all entries.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| libm::fabs(a - n) / 1f64.max(libm::fabs(a)).max(libm::fabs(n)))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MaskMatrix;
    use crate::rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand(r: &mut rng::DetRng, rows: usize, cols: usize) -> Matrix {
        rng::normal_matrix(r, rows, cols, 1.0)
    }

    /// Checks d(sum(W ⊙ f(x)))/dx for a unary graph builder.
    fn check_unary(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut r = rng::seeded(99);
        let run = |xm: &Matrix, w: Option<&Matrix>| -> (f64, Option<Matrix>, Matrix) {
            let mut t = Tape::new(Vec::new());
            let xv = t.leaf(xm.clone());
            let y = build(&mut t, xv);
            let ym = t.value(y).clone();
            let w = w.cloned().unwrap_or_else(|| Matrix::filled(ym.rows(), ym.cols(), 1.0));
            let wv = t.leaf(w);
            let p = t.mul(y, wv).unwrap();
            let s = t.mean(p);
            let loss = t.scalar(s);
            let g = t.backward(s).of(xv).cloned();
            (loss, g, ym)
        };
        let (_, _, y) = run(&x, None);
        let w = rand(&mut r, y.rows(), y.cols());
        let (_, analytic, _) = run(&x, Some(&w));
        let analytic = analytic.unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_gradient(&x, STEP, |p| run(p, Some(&w)).0);
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn basic_ops_gradients() {
        let mut r = rng::seeded(1);
        let a = rand(&mut r, 3, 4);
        let b = rand(&mut r, 4, 5);
        let c = rand(&mut r, 5, 4);
        check_unary(a.clone(), |t, x| {
            let bv = t.leaf(b.clone());
            t.matmul(x, bv).unwrap()
        });
        check_unary(b.clone(), |t, x| {
            let av = t.leaf(a.clone());
            t.matmul(av, x).unwrap()
        });
        check_unary(a.clone(), |t, x| {
            let cv = t.leaf(c.clone());
            t.matmul_transb(x, cv).unwrap()
        });
        check_unary(c.clone(), |t, x| {
            let av = t.leaf(a.clone());
            t.matmul_transb(av, x).unwrap()
        });
        check_unary(a.clone(), |t, x| t.silu(x));
        check_unary(a.clone(), |t, x| t.softmax_rows(x));
        check_unary(a.clone(), |t, x| {
            let y = t.scale(x, 0.7);
            let z = t.mul(y, x).unwrap();
            t.sub(z, x).unwrap()
        });
        check_unary(a.clone(), |t, x| {
            let s = t.slice_cols(x, 1, 2);
            let r0 = t.slice_rows(x, 0, 2);
            let q = t.slice_cols(r0, 0, 2);
            let cat = t.concat_rows(&[s, q]).unwrap();
            t.concat_cols(&[cat, cat]).unwrap()
        });
        check_unary(a.clone(), |t, x| t.gather_rows(x, &[2, 0, 2, 1]).unwrap());
        check_unary(a.clone(), |t, x| {
            let c1 = t.col(x, 3);
            let m = t.mean(c1);
            t.abs(m)
        });
    }

    #[test]
    fn rms_norm_gradients() {
        let mut r = rng::seeded(2);
        let x = rand(&mut r, 3, 6);
        let gain = rand(&mut r, 1, 6);
        check_unary(x.clone(), |t, xv| {
            let g = t.leaf(gain.clone());
            t.rms_norm(xv, g).unwrap()
        });
        check_unary(gain, |t, gv| {
            let xv = t.leaf(x.clone());
            t.rms_norm(xv, gv).unwrap()
        });
    }

    #[test]
    fn bias_gradient() {
        let mut r = rng::seeded(3);
        let x = rand(&mut r, 4, 3);
        let b = rand(&mut r, 1, 3);
        check_unary(b, |t, bv| {
            let xv = t.leaf(x.clone());
            t.add_bias(xv, bv).unwrap()
        });
    }

    #[test]
    fn masked_softmax_matches_kernel_and_gradients() {
        let mut r = rng::seeded(4);
        let x = rand(&mut r, 5, 5);
        let mask = MaskMatrix::causal(5);
        let mut t = Tape::new(Vec::new());
        let xv = t.leaf(x.clone());
        let gv = t.leaf(mask.to_matrix());
        let p = t.masked_softmax(xv, gv).unwrap();
        let k = kernels::masked_softmax(&x, &mask).unwrap();
        assert!(t.value(p).max_abs_diff(&k) == 0.0);

        let g = mask.to_matrix();
        check_unary(x.clone(), |t, xv| {
            let gv = t.leaf(g.clone());
            t.masked_softmax(xv, gv).unwrap()
        });
        // Real-valued G, strictly positive so the admitted set is fixed.
        let gr = Matrix::from_vec(5, 5, (0..25).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect()).unwrap();
        check_unary(gr, |t, gv| {
            let xv = t.leaf(x.clone());
            t.masked_softmax(xv, gv).unwrap()
        });
    }

    #[test]
    fn masked_softmax_empty_row_errors() {
        let mut t = Tape::new(Vec::new());
        let x = t.leaf(Matrix::zeros(2, 2));
        let g = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert!(matches!(t.masked_softmax(x, g), Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn build_g_layout_and_gradient() {
        let mut t = Tape::new(Vec::new());
        let k = t.leaf(Matrix::from_rows(&[vec![1.0], vec![0.0], vec![1.0]]));
        let g = t.build_g(k).unwrap();
        let gm = t.value(g);
        assert_eq!(gm.row(1), &[1.0, 1.0, 0.0]);
        assert_eq!(gm.row(2), &[1.0, 0.0, 1.0]);
        assert_eq!(gm.get(0, 1), 0.0);
        let mut r = rng::seeded(5);
        check_unary(rand(&mut r, 4, 1), |t, kv| t.build_g(kv).unwrap());
    }

    #[test]
    fn ste_forward_and_exact_pass_through() {
        let mut t = Tape::new(Vec::new());
        let d = t.leaf(Matrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7], vec![0.5, 0.5]]));
        let h = t.ste(d);
        assert_eq!(t.value(h).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let inj = Matrix::from_rows(&[vec![0.125, -3.5], vec![1e-7, 2.0], vec![-0.0, 7.25]]);
        let w = t.leaf(inj.clone());
        let p = t.mul(h, w).unwrap();
        let s = t.mean(p);
        let grads = t.backward(s);
        let mut expect = inj;
        expect.scale(1.0 / 6.0);
        assert_eq!(grads.of(h).unwrap(), &expect);
        assert_eq!(grads.of(d).unwrap(), grads.of(h).unwrap());
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let mut t = Tape::new(Vec::new());
        let l = t.leaf(Matrix::zeros(3, 8));
        let ce = t.cross_entropy(l, &[1, 2, 7]).unwrap();
        assert!((t.scalar(ce) - libm::log(8.0)).abs() < 1e-12);
        assert!(t.cross_entropy(l, &[8, 0, 0]).is_err());
        let mut r = rng::seeded(6);
        let x = rand(&mut r, 3, 5);
        let loss = |m: &Matrix| {
            let mut t = Tape::new(Vec::new());
            let v = t.leaf(m.clone());
            let c = t.cross_entropy(v, &[0, 4, 2]).unwrap();
            t.scalar(c)
        };
        let mut t = Tape::new(Vec::new());
        let v = t.leaf(x.clone());
        let c = t.cross_entropy(v, &[0, 4, 2]).unwrap();
        let a = t.backward(c).of(v).unwrap().clone();
        assert!(relative_error(&a, &numeric_gradient(&x, STEP, loss)) < TOL);
    }

    #[test]
    fn params_are_borrowed_and_accumulated() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut t = Tape::new(vec![&w]);
        let a = t.param(0);
        assert_eq!(t.param(0), a);
        let b = t.add(a, a).unwrap();
        let s = t.mean(b);
        let g = t.backward(s);
        assert_eq!(g.param(0).unwrap().data(), &[0.5; 4]);
    }
}
