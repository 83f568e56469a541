use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn dangling() -> Self {
        Var(usize::MAX)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    MulColumn(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        allowed: Vec<bool>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    InterleaveRows(Vec<Var>),
    NormalizeRows(Var, Vec<f64>),
    CrossRows(Var, Var),
    DotRows(Var, Var),
    Mat3Mul(Var, Var),
    Mat3Vec(Var, Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients with respect to every parameter id (None when untouched).
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(count: usize) -> Self {
        Self {
            grads: vec![None; count],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Element-wise sum, in the order of `other`'s entries.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// Records a forward computation and replays it backwards.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params[*id],
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        assert!(id < self.params.len(), "unknown parameter {id}");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x · W + b` with `W: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()), "bias shape");
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a 1 × 1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `n × c → n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data);
        self.push(v, Op::SumCols(a), &[a])
    }

    /// Scale each row of `a` (`n × c`) by the matching entry of `s` (`n × 1`).
    pub fn mul_column(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.shape(), (ta.rows(), 1), "column scale shape");
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let k = ts.get(r, 0);
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        self.push(out, Op::MulColumn(a, s), &[a, s])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, c) = t.shape();
        assert_eq!(self.shape(gamma), (1, c), "layer norm gain shape");
        assert_eq!(self.shape(beta), (1, c), "layer norm bias shape");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for k in 0..c {
                let h = (row[k] - mu) * rs;
                xhat[r * c + k] = h;
                o[k] = h * g[k] + b[k];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention over blocks of `tokens`
    /// consecutive rows. `allowed[row]` says whether that row may be attended
    /// to as a key; disallowed keys are skipped entirely.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        allowed: Vec<bool>,
    ) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = tq.shape();
        assert_eq!(tk.shape(), (n, d));
        assert_eq!(tv.shape(), (n, d));
        assert_eq!(n % tokens, 0, "rows must be a multiple of the token count");
        assert_eq!(d % heads, 0, "model width must divide into heads");
        assert_eq!(allowed.len(), n);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = n / tokens;
        let mut probs = vec![0.0; blocks * heads * tokens * tokens];
        let mut out = Tensor::zeros(n, d);
        let mut scores = vec![0.0; tokens];
        for b in 0..blocks {
            let base = b * tokens;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..tokens {
                    let qi = &tq.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        if allowed[base + j] {
                            let s = dot(qi, &tk.row(base + j)[cols.clone()]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..tokens {
                        if allowed[base + j] {
                            scores[j] = (scores[j] - max).exp();
                            z += scores[j];
                        }
                    }
                    let p = &mut probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                    let o = &mut out.row_mut(base + i)[cols.clone()];
                    for j in 0..tokens {
                        if allowed[base + j] {
                            let pj = scores[j] / z;
                            p[j] = pj;
                            for (ov, vv) in o.iter_mut().zip(&tv.row(base + j)[cols.clone()]) {
                                *ov += pj * vv;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                allowed,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "column slice out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(index.len(), t.cols());
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(src));
        }
        self.push(out, Op::GatherRows(a, index), &[a])
    }

    /// Output row `b·k + t` is row `b` of `parts[t]`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Var {
        let (rows, cols) = self.shape(parts[0]);
        let k = parts.len();
        let mut out = Tensor::zeros(rows * k, cols);
        for (t, p) in parts.iter().enumerate() {
            let src = self.value(*p);
            assert_eq!(src.shape(), (rows, cols), "interleave shape mismatch");
            for b in 0..rows {
                out.row_mut(b * k + t).copy_from_slice(src.row(b));
            }
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()), parts)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = dot(t.row(r), t.row(r)).sqrt();
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a, norms), &[a])
    }

    pub fn cross_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), 3);
        assert_eq!(ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows(), 3);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&cross(ta.row(r), tb.row(r)));
        }
        self.push(out, Op::CrossRows(a, b), &[a, b])
    }

    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = (0..ta.rows()).map(|r| dot(ta.row(r), tb.row(r))).collect();
        let out = Tensor::from_vec(ta.rows(), 1, data);
        self.push(out, Op::DotRows(a, b), &[a, b])
    }

    /// Row-wise product of 3×3 matrices stored column-major in 9 columns.
    pub fn mat3_mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), 9);
        assert_eq!(ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows(), 9);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&m3_mul(ta.row(r), tb.row(r)));
        }
        self.push(out, Op::Mat3Mul(a, b), &[a, b])
    }

    /// Row-wise matrix-vector product: `n × 9` (column-major 3×3) by `n × 3`.
    pub fn mat3_vec(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (self.value(a), self.value(v));
        assert_eq!(ta.cols(), 9);
        assert_eq!(tv.shape(), (ta.rows(), 3));
        let mut out = Tensor::zeros(ta.rows(), 3);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&m3_vec(ta.row(r), tv.row(r)));
        }
        self.push(out, Op::Mat3Vec(a, v), &[a, v])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoRecordedGraph("loss is not on this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::NoRecordedGraph(format!(
                "loss must be a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut out = Gradients::empty(self.params.len());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out.grads[*id] {
                Some(existing) => existing.add_assign(g),
                slot => *slot = Some(g.clone()),
            },
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if wants(b) {
                    let mut n = g.clone();
                    n.scale_in_place(-1.0);
                    acc(*b, n);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    acc(*a, hadamard(g, tb));
                }
                if wants(b) {
                    acc(*b, hadamard(g, ta));
                }
            }
            Op::Scale(a, s) => {
                let mut n = g.clone();
                n.scale_in_place(*s);
                acc(*a, n);
            }
            Op::Linear { x, w, b } => {
                if wants(x) {
                    acc(*x, g.matmul_bt(self.value(*w)));
                }
                if wants(w) {
                    acc(*w, self.value(*x).matmul_at(g));
                }
                if let Some(b) = b {
                    if wants(b) {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                acc(*a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().unwrap();
                acc(*a, hadamard(g, y));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| 2.0 * gv * xv)
                    .collect();
                acc(*a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.scalar()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    let gv = g.get(i, 0);
                    t.row_mut(i).fill(gv);
                }
                acc(*a, t);
            }
            Op::MulColumn(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                if wants(a) {
                    let mut t = g.clone();
                    for r in 0..t.rows() {
                        let k = ts.get(r, 0);
                        for v in t.row_mut(r) {
                            *v *= k;
                        }
                    }
                    acc(*a, t);
                }
                if wants(s) {
                    let data = (0..ta.rows()).map(|r| dot(g.row(r), ta.row(r))).collect();
                    acc(*s, Tensor::from_vec(ta.rows(), 1, data));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = g.shape();
                let gam = self.value(*gamma).data();
                if wants(gamma) || wants(beta) {
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..n {
                        for k in 0..c {
                            dg.data_mut()[k] += g.get(r, k) * xhat[r * c + k];
                            db.data_mut()[k] += g.get(r, k);
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if wants(x) {
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for k in 0..c {
                            let d = g.get(r, k) * gam[k];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + k];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let o = dx.row_mut(r);
                        for k in 0..c {
                            let d = g.get(r, k) * gam[k];
                            o[k] = rstd[r] * (d - mean_d - xhat[r * c + k] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                allowed,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = tq.shape();
                let (tokens, heads) = (*tokens, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(n, d);
                let mut dv = Tensor::zeros(n, d);
                let mut dp = vec![0.0; tokens];
                for b in 0..n / tokens {
                    let base = b * tokens;
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..tokens {
                            let p = &probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                            let gi = &g.row(base + i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..tokens {
                                if !allowed[base + j] {
                                    continue;
                                }
                                dp[j] = dot(gi, &tv.row(base + j)[cols.clone()]);
                                weighted += dp[j] * p[j];
                                for (dvv, gv) in
                                    dv.row_mut(base + j)[cols.clone()].iter_mut().zip(gi)
                                {
                                    *dvv += p[j] * gv;
                                }
                            }
                            for j in 0..tokens {
                                if !allowed[base + j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row(base + j)[cols.clone()];
                                for (a, kv) in dq.row_mut(base + i)[cols.clone()].iter_mut().zip(kj)
                                {
                                    *a += ds * kv;
                                }
                                let qi = &tq.row(base + i)[cols.clone()];
                                for (a, qv) in dk.row_mut(base + j)[cols.clone()].iter_mut().zip(qi)
                                {
                                    *a += ds * qv;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if wants(p) {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            t.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(*p, t);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, t);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for (row, &src) in index.iter().enumerate() {
                    for (d, v) in t.row_mut(src).iter_mut().zip(g.row(row)) {
                        *d += v;
                    }
                }
                acc(*a, t);
            }
            Op::InterleaveRows(parts) => {
                let k = parts.len();
                for (t, p) in parts.iter().enumerate() {
                    if !wants(p) {
                        continue;
                    }
                    let (rows, cols) = self.shape(*p);
                    let mut d = Tensor::zeros(rows, cols);
                    for b in 0..rows {
                        d.row_mut(b).copy_from_slice(g.row(b * k + t));
                    }
                    acc(*p, d);
                }
            }
            Op::NormalizeRows(a, norms) => {
                let y = node.value.as_ref().unwrap();
                let mut t = g.clone();
                for (r, norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let proj = dot(yr, g.row(r));
                    for (d, yv) in t.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yv * proj) / norm;
                    }
                }
                acc(*a, t);
            }
            Op::CrossRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rows = g.rows();
                if wants(a) {
                    let mut t = Tensor::zeros(rows, 3);
                    for r in 0..rows {
                        t.row_mut(r).copy_from_slice(&cross(tb.row(r), g.row(r)));
                    }
                    acc(*a, t);
                }
                if wants(b) {
                    let mut t = Tensor::zeros(rows, 3);
                    for r in 0..rows {
                        t.row_mut(r).copy_from_slice(&cross(g.row(r), ta.row(r)));
                    }
                    acc(*b, t);
                }
            }
            Op::DotRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let mut t = tb.clone();
                    for r in 0..t.rows() {
                        let k = g.get(r, 0);
                        t.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    acc(*a, t);
                }
                if wants(b) {
                    let mut t = ta.clone();
                    for r in 0..t.rows() {
                        let k = g.get(r, 0);
                        t.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    acc(*b, t);
                }
            }
            Op::Mat3Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rows = g.rows();
                if wants(a) {
                    let mut t = Tensor::zeros(rows, 9);
                    for r in 0..rows {
                        t.row_mut(r)
                            .copy_from_slice(&m3_mul(g.row(r), &m3_transpose(tb.row(r))));
                    }
                    acc(*a, t);
                }
                if wants(b) {
                    let mut t = Tensor::zeros(rows, 9);
                    for r in 0..rows {
                        t.row_mut(r)
                            .copy_from_slice(&m3_mul(&m3_transpose(ta.row(r)), g.row(r)));
                    }
                    acc(*b, t);
                }
            }
            Op::Mat3Vec(a, v) => {
                let (ta, tv) = (self.value(*a), self.value(*v));
                let rows = g.rows();
                if wants(a) {
                    let mut t = Tensor::zeros(rows, 9);
                    for r in 0..rows {
                        let (gr, vr) = (g.row(r), tv.row(r));
                        let o = t.row_mut(r);
                        // Column-major: entry (i, j) lives at j·3 + i.
                        for j in 0..3 {
                            for i in 0..3 {
                                o[j * 3 + i] = gr[i] * vr[j];
                            }
                        }
                    }
                    acc(*a, t);
                }
                if wants(v) {
                    let mut t = Tensor::zeros(rows, 3);
                    for r in 0..rows {
                        t.row_mut(r)
                            .copy_from_slice(&m3_vec(&m3_transpose(ta.row(r)), g.row(r)));
                    }
                    acc(*v, t);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn m3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for j in 0..3 {
        for i in 0..3 {
            c[j * 3 + i] = (0..3).map(|k| a[k * 3 + i] * b[j * 3 + k]).sum();
        }
    }
    c
}

fn m3_transpose(a: &[f64]) -> [f64; 9] {
    let mut t = [0.0; 9];
    for j in 0..3 {
        for i in 0..3 {
            t[i * 3 + j] = a[j * 3 + i];
        }
    }
    t
}

fn m3_vec(a: &[f64], v: &[f64]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for (i, oi) in o.iter_mut().enumerate() {
        *oi = (0..3).map(|k| a[k * 3 + i] * v[k]).sum();
    }
    o
}
