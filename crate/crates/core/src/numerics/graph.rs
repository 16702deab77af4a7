//! Dynamic reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because nodes can only reference earlier nodes.

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Mask(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    MinOf(Vec<Var>),
    GaussianKl([Var; 4]),
    CrossEntropy(Var, Vec<Option<usize>>),
    /// Hidden state, input projection, hidden projection, saved `[r | u | n]`.
    GruCell(Var, Var, Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf node holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.values().to_vec(), Op::Leaf)
    }

    pub fn leaf_values(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("leaf", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.push(1, values.len(), values.to_vec(), Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, value, Op::MatMul(a, b)))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(r, c, value, Op::Add(a, b)))
    }

    /// Adds the `1 x c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", &[r, c], &[br, bc]));
        }
        let bv = self.value(b);
        let value = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(r, c, value, Op::AddRow(x, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("sub", a, b)?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(r, c, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(r, c, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of every element, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise sum: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        self.push(r, 1, value, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], &[r, c]));
            }
            cols += c;
        }
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("stack_rows"))?;
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("stack_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, value, Op::StackRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let value = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Ok(self.push(r, w, value, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let value = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, value, Op::SliceRows(a, start)))
    }

    /// Selects (possibly repeated) rows of `a`; used for embedding lookups and
    /// broadcasting a single row.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, c], &[bad]));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, value, Op::GatherRows(a, idx.to_vec())))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(Error::shape("mask", &[r, c], &[mask.len()]));
        }
        let value = zip_with(self.value(a), &mask, |x, m| x * m);
        Ok(self.push(r, c, value, Op::Mask(a, mask)))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let n = self.value(a).len();
        let mask = dropout_mask(n, rate, rng)?;
        match mask {
            None => Ok(a),
            Some(m) => self.mask(a, m),
        }
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise minimum over equally shaped nodes.
    pub fn min_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("min_of"))?;
        let (r, c) = self.dims(first);
        for &p in &parts[1..] {
            self.same_dims("min_of", first, p)?;
        }
        let mut value = self.value(first).to_vec();
        for &p in &parts[1..] {
            for (v, &x) in value.iter_mut().zip(self.value(p)) {
                if x < *v {
                    *v = x;
                }
            }
        }
        Ok(self.push(r, c, value, Op::MinOf(parts.to_vec())))
    }

    /// Closed-form `KL(N(mu_q, e^logvar_q) || N(mu_p, e^logvar_p))` summed over
    /// every element, as a `1 x 1` node.
    pub fn gaussian_kl(&mut self, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
        self.same_dims("gaussian_kl", mu_q, logvar_q)?;
        self.same_dims("gaussian_kl", mu_q, mu_p)?;
        self.same_dims("gaussian_kl", mu_q, logvar_p)?;
        let (mq, lq, mp, lp) = (
            self.value(mu_q),
            self.value(logvar_q),
            self.value(mu_p),
            self.value(logvar_p),
        );
        let mut total = 0.0;
        for i in 0..mq.len() {
            let x = lq[i] - lp[i];
            let d = mq[i] - mp[i];
            total += 0.5 * ((x.exp_m1() - x) + d * d * (-lp[i]).exp());
        }
        Ok(self.push(1, 1, vec![total], Op::GaussianKl([mu_q, logvar_q, mu_p, logvar_p])))
    }

    /// Fused GRU update. `h` is `B x H`; `xp` and `hp` are the `B x 3H` input
    /// and hidden projections with gates packed as `[reset | update | candidate]`.
    pub fn gru_cell(&mut self, h: Var, xp: Var, hp: Var) -> Result<Var> {
        let (b, hs) = self.dims(h);
        for v in [xp, hp] {
            let d = self.dims(v);
            if d != (b, 3 * hs) {
                return Err(Error::shape("gru_cell", &[b, 3 * hs], &[d.0, d.1]));
            }
        }
        let (hv, xv, pv) = (self.value(h), self.value(xp), self.value(hp));
        let mut out = vec![0.0; b * hs];
        let mut gates = vec![0.0; 3 * b * hs];
        for i in 0..b {
            let (x, p) = (&xv[i * 3 * hs..(i + 1) * 3 * hs], &pv[i * 3 * hs..(i + 1) * 3 * hs]);
            let sv = &mut gates[i * 3 * hs..(i + 1) * 3 * hs];
            for j in 0..hs {
                let r = sigmoid(x[j] + p[j]);
                let u = sigmoid(x[hs + j] + p[hs + j]);
                let n = (x[2 * hs + j] + r * p[2 * hs + j]).tanh();
                sv[j] = r;
                sv[hs + j] = u;
                sv[2 * hs + j] = n;
                out[i * hs + j] = n + u * (hv[i * hs + j] - n);
            }
        }
        Ok(self.push(b, hs, out, Op::GruCell(h, xp, hp, gates)))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with a `None` target are ignored (padding).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::shape("cross_entropy", &[r, c], &[t]));
                }
                let row = &lv[i * c..(i + 1) * c];
                total += log_sum_exp(row) - row[t];
            }
        }
        Ok(self.push(1, 1, vec![total], Op::CrossEntropy(logits, targets.to_vec())))
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r != 1 || c != 1 {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let ga = kernels::matmul_bt(gout, val(*b), m, n, k);
                acc(grads, *a, &ga);
                let gb = kernels::matmul_at(val(*a), gout, m, k, n);
                acc(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, gout);
                acc(grads, *b, gout);
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, gout);
                let mut gb = vec![0.0; node.cols];
                for row in gout.chunks(node.cols) {
                    gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
                acc(grads, *b, &gb);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_with(gout, val(*b), |g, y| g * y);
                let gb = zip_with(gout, val(*a), |g, x| g * x);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = gout.iter().map(|g| g * s).collect();
                acc(grads, *a, &ga);
            }
            Op::AddScalar(a) => acc(grads, *a, gout),
            Op::Tanh(a) => {
                let ga = zip_with(gout, &node.value, |g, y| g * (1.0 - y * y));
                acc(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_with(gout, &node.value, |g, y| g * y * (1.0 - y));
                acc(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga = zip_with(gout, &node.value, |g, y| g * y);
                acc(grads, *a, &ga);
            }
            Op::Square(a) => {
                let ga = zip_with(gout, val(*a), |g, x| 2.0 * g * x);
                acc(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![gout[0]; val(*a).len()];
                acc(grads, *a, &ga);
            }
            Op::SumCols(a) => {
                let c = self.dims(*a).1;
                let ga: Vec<f64> = gout.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                acc(grads, *a, &ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let gp: Vec<f64> = gout
                        .chunks(node.cols)
                        .flat_map(|row| row[offset..offset + c].iter().copied())
                        .collect();
                    acc(grads, p, &gp);
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(grads, p, &gout[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a).1;
                let ga = buffer(grads, *a, val(*a).len());
                for (dst, src) in ga.chunks_mut(c).zip(gout.chunks(node.cols)) {
                    add_into(&mut dst[*start..*start + node.cols], src);
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                let ga = buffer(grads, *a, val(*a).len());
                add_into(&mut ga[start * c..start * c + gout.len()], gout);
            }
            Op::GatherRows(a, idx) => {
                let c = node.cols;
                let ga = buffer(grads, *a, val(*a).len());
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &gout[k * c..(k + 1) * c]);
                }
            }
            Op::Mask(a, m) => {
                let ga = zip_with(gout, m, |g, m| g * m);
                acc(grads, *a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = zip_with(gout, val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 });
                acc(grads, *a, &ga);
            }
            Op::MinOf(parts) => {
                let n = node.value.len();
                let mut per: Vec<Vec<f64>> = vec![vec![0.0; n]; parts.len()];
                for e in 0..n {
                    // ties go to the first minimal part
                    let k = parts
                        .iter()
                        .position(|&p| val(p)[e] == node.value[e])
                        .expect("min is attained");
                    per[k][e] = gout[e];
                }
                for (&p, g) in parts.iter().zip(per) {
                    acc(grads, p, &g);
                }
            }
            Op::GaussianKl([mq, lq, mp, lp]) => {
                let g = gout[0];
                let (vmq, vlq, vmp, vlp) = (val(*mq), val(*lq), val(*mp), val(*lp));
                let n = vmq.len();
                let (mut gmq, mut glq, mut gmp, mut glp) =
                    (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let inv_p = (-vlp[i]).exp();
                    let d = vmq[i] - vmp[i];
                    let ratio_m1 = (vlq[i] - vlp[i]).exp_m1();
                    gmq[i] = g * d * inv_p;
                    gmp[i] = -g * d * inv_p;
                    glq[i] = g * 0.5 * ratio_m1;
                    glp[i] = g * 0.5 * (-ratio_m1 - d * d * inv_p);
                }
                acc(grads, *mq, &gmq);
                acc(grads, *lq, &glq);
                acc(grads, *mp, &gmp);
                acc(grads, *lp, &glp);
            }
            Op::CrossEntropy(logits, targets) => {
                let g = gout[0];
                let c = self.dims(*logits).1;
                let lv = val(*logits);
                let mut gl = vec![0.0; lv.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &lv[i * c..(i + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            gl[i * c + j] = g * (row[j] - lse).exp();
                        }
                        gl[i * c + t] -= g;
                    }
                }
                acc(grads, *logits, &gl);
            }
            Op::GruCell(h, xp, hp, gates) => {
                let hs = node.cols;
                let hv = val(*h);
                let pv = val(*hp);
                let mut gh = vec![0.0; hv.len()];
                let mut gx = vec![0.0; gates.len()];
                let mut gp = vec![0.0; gates.len()];
                for i in 0..node.rows {
                    let base = i * 3 * hs;
                    for j in 0..hs {
                        let (r, u, n) = (gates[base + j], gates[base + hs + j], gates[base + 2 * hs + j]);
                        let g = gout[i * hs + j];
                        gh[i * hs + j] = g * u;
                        let dn = g * (1.0 - u) * (1.0 - n * n);
                        let du = g * (hv[i * hs + j] - n) * u * (1.0 - u);
                        let dr = dn * pv[base + 2 * hs + j] * r * (1.0 - r);
                        gx[base + j] = dr;
                        gp[base + j] = dr;
                        gx[base + hs + j] = du;
                        gp[base + hs + j] = du;
                        gx[base + 2 * hs + j] = dn;
                        gp[base + 2 * hs + j] = dn * r;
                    }
                }
                acc(grads, *h, &gh);
                acc(grads, *xp, &gx);
                acc(grads, *hp, &gp);
            }
        }
    }
}

/// Gradient buffer of `v`, created as zeros on first use.
fn buffer(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draws an inverted-dropout mask, or `None` when `rate == 0`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    ))
}

pub(crate) mod kernels {
    // below this many multiply-adds the packing overhead of dgemm dominates
    const SMALL: usize = 1 << 14;

    /// `c = a * b` for row-major operands described by their row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        if m == 0 || k == 0 || n == 0 {
            return out;
        }
        if m * k * n < SMALL {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a[i * rsa as usize + p * csa as usize];
                    if x == 0.0 {
                        continue;
                    }
                    let bo = p * rsb as usize;
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += x * b[bo + j * csb as usize];
                    }
                }
            }
            return out;
        }
        // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
        // and the freshly allocated row-major `out` (m x n).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        assert!(a.len() == m * k && b.len() == k * n);
        gemm(m, k, n, a, k as isize, 1, b, n as isize, 1)
    }

    /// `g (m x n) * b^T` where `b` is `k x n`.
    pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        assert!(g.len() == m * n && b.len() == k * n);
        gemm(m, n, k, g, n as isize, 1, b, 1, n as isize)
    }

    /// `a^T (k x m) * g (m x n)` where `a` is `m x k`.
    pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        assert!(a.len() == m * k && g.len() == m * n);
        gemm(k, m, n, a, 1, k as isize, g, n as isize, 1)
    }
}
