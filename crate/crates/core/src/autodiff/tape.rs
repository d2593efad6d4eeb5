//! Define-by-run computation tape over 2-D `f64` values.
//!
//! Every value on the tape is a `rows x cols` matrix (vectors are single rows).
//! Parameters are referenced from a borrowed [`ParamStore`] rather than copied,
//! so a tape is cheap to build per BPTT window and is dropped afterwards.

use super::special::{log_ndtr, log_normal_pdf_std};
use super::tensor::{Gradients, ParamId, ParamStore, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LogNdtr(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<(Var, usize)>),
    RowCombine(Var, Vec<(usize, usize, f64)>),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of `Input` leaves produced by one backward pass.
#[derive(Debug, Default)]
pub struct InputGrads {
    grads: Vec<(Var, Vec<f64>)>,
}

impl InputGrads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id).data(),
            _ => &node.value,
        }
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let cols = self.nodes[v.0].cols;
        &self.value(v)[r * cols..(r + 1) * cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(Op::Constant, r, c, t.data().to_vec(), false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::DataLength {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(Op::Constant, rows, cols, data, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Op::Constant, rows, cols, vec![0.0; rows * cols], false)
    }

    /// Leaf that receives a gradient in [`InputGrads`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(Op::Input, r, c, t.data().to_vec(), true)
    }

    /// Leaf bound to a stored parameter; cached so each parameter appears once.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let (r, c) = self.params.value(id).dims2();
        let v = self.push(Op::Param(id), r, c, Vec::new(), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` that is cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let data = self.value(v).to_vec();
        self.push(Op::Constant, r, c, data, false)
    }

    // ---- binary ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(AutodiffError::shape("matmul", (n, k), (k2, m)));
        }
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), n, m, out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(AutodiffError::shape(op, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), r, c, out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), r, c, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), r, c, out, rg))
    }

    /// `a[n,m] + row[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (n, m) = self.shape(a);
        let (r1, m2) = self.shape(row);
        if r1 != 1 || m != m2 {
            return Err(AutodiffError::shape("add_row", (n, m), (r1, m2)));
        }
        let av = self.value(a);
        let rv = self.value(row);
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(m.max(1)) {
            chunk.iter_mut().zip(rv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), n, m, out, rg))
    }

    // ---- unary -----------------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, r, c, out, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var, AutodiffError> {
        let (r, cols) = self.shape(a);
        if c.len() != r * cols {
            return Err(AutodiffError::shape("mul_const", (r, cols), (1, c.len())));
        }
        let out = zip_map(self.value(a), c, |x, y| x * y);
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, c.to_vec()), r, cols, out, rg))
    }

    /// Masked indicator multiply: entries of `mask` must be 0 or 1.
    pub fn mask(&mut self, a: Var, mask: &[f64]) -> Result<Var, AutodiffError> {
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(AutodiffError::InvalidMask);
        }
        self.mul_const(a, mask)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::NonPositiveLog(bad));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `log Φ(x)` for the standard normal CDF.
    pub fn log_ndtr(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogNdtr(a), log_ndtr)
    }

    // ---- row-wise --------------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), r, c, out, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a), r, c, out, rg)
    }

    /// Row-wise log-sum-exp: `[n,m] -> [n,1]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c.max(1)).map(logsumexp).collect();
        let rg = self.rg(a);
        self.push(Op::LogSumExp(a), r, 1, out, rg)
    }

    /// Row-wise sum: `[n,m] -> [n,1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Op::RowSum(a), r, 1, out, rg)
    }

    /// Elementwise max over the rows of `a`: `[n,m] -> [1,m]`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(AutodiffError::EmptyReduction("max_rows"));
        }
        let v = self.value(a);
        let mut best = v[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let x = v[i * c + j];
                if x > best[j] {
                    best[j] = x;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MaxRows(a, arg), 1, c, best, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), 1, 1, vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::EmptyReduction("mean"));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), 1, 1, vec![s], rg))
    }

    // ---- structural ------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::EmptyReduction("concat_cols"));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(AutodiffError::shape("concat_cols", (rows, cols), (r, c)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.row(p, i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(AutodiffError::shape("slice_cols", (r, c), (start, len)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), r, len, out, rg))
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: r });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(a, i));
        }
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), idx.len(), c, out, rg))
    }

    /// Stack single rows drawn from possibly different nodes.
    pub fn stack_rows(&mut self, sources: &[(Var, usize)], cols: usize) -> Result<Var, AutodiffError> {
        let mut out = Vec::with_capacity(sources.len() * cols);
        let mut rg = false;
        for &(v, r) in sources {
            let (rows, c) = self.shape(v);
            if c != cols {
                return Err(AutodiffError::shape("stack_rows", (1, cols), (rows, c)));
            }
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: r, len: rows });
            }
            out.extend_from_slice(self.row(v, r));
            rg |= self.rg(v);
        }
        Ok(self.push(Op::StackRows(sources.to_vec()), sources.len(), cols, out, rg))
    }

    /// Constant sparse left-multiplication: `out[o] = Σ coef · a[i]` over `(o, i, coef)`.
    pub fn row_combine(
        &mut self,
        a: Var,
        entries: &[(usize, usize, f64)],
        out_rows: usize,
    ) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; out_rows * c];
        for &(o, i, w) in entries {
            if o >= out_rows || i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    index: o.max(i),
                    len: out_rows.min(r),
                });
            }
            let src = &self.value(a)[i * c..(i + 1) * c];
            out[o * c..(o + 1) * c]
                .iter_mut()
                .zip(src)
                .for_each(|(y, x)| *y += w * x);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RowCombine(a, entries.to_vec()), out_rows, c, out, rg))
    }

    /// Selected entries as a column: `[(row, col)] -> [k,1]`.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(AutodiffError::IndexOutOfRange {
                    index: i * c + j,
                    len: r * c,
                });
            }
            out.push(v[i * c + j]);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Pick(a, at.to_vec()), at.len(), 1, out, rg))
    }

    pub fn check_finite(&self, v: Var, what: &'static str) -> Result<(), AutodiffError> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(what))
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) -> Result<InputGrads, AutodiffError> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(AutodiffError::NonScalarBackward { rows: r, cols: c });
        }
        let mut buf: Vec<Option<Vec<f64>>> = Vec::new();
        buf.resize_with(loss.0 + 1, || None);
        buf[loss.0] = Some(vec![1.0]);
        let mut inputs = InputGrads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = buf[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let cols = node.cols;
            match &node.op {
                Op::Constant => {}
                Op::Input => inputs.grads.push((Var(idx), g)),
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = cols;
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let da = slot(&mut buf, self, *a);
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bv[p * m..(p + 1) * m];
                                da[i * k + p] += dot(gi, brow);
                            }
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let db = slot(&mut buf, self, *b);
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip != 0.0 {
                                    axpy(&mut db[p * m..(p + 1) * m], aip, gi);
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut buf, self, *a, &g, 1.0);
                    add_into(&mut buf, self, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut buf, self, *a, &g, 1.0);
                    add_into(&mut buf, self, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let da = slot(&mut buf, self, *a);
                        da.iter_mut().zip(&g).zip(bv).for_each(|((d, g), x)| *d += g * x);
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let db = slot(&mut buf, self, *b);
                        db.iter_mut().zip(&g).zip(av).for_each(|((d, g), x)| *d += g * x);
                    }
                }
                Op::AddRow(a, row) => {
                    add_into(&mut buf, self, *a, &g, 1.0);
                    if self.rg(*row) {
                        let dr = slot(&mut buf, self, *row);
                        for chunk in g.chunks(cols.max(1)) {
                            axpy(dr, 1.0, chunk);
                        }
                    }
                }
                Op::Scale(a, s) => add_into(&mut buf, self, *a, &g, *s),
                Op::Shift(a) => add_into(&mut buf, self, *a, &g, 1.0),
                Op::MulConst(a, cst) => {
                    let da = slot(&mut buf, self, *a);
                    da.iter_mut().zip(&g).zip(cst).for_each(|((d, g), c)| *d += g * c);
                }
                Op::Exp(a) => elementwise(&mut buf, self, *a, &g, |i, _| y[i]),
                Op::Log(a) => elementwise(&mut buf, self, *a, &g, |_, x| 1.0 / x),
                Op::Sigmoid(a) => elementwise(&mut buf, self, *a, &g, |i, _| y[i] * (1.0 - y[i])),
                Op::Tanh(a) => elementwise(&mut buf, self, *a, &g, |i, _| 1.0 - y[i] * y[i]),
                Op::Square(a) => elementwise(&mut buf, self, *a, &g, |_, x| 2.0 * x),
                Op::Clamp(a, lo, hi) => elementwise(&mut buf, self, *a, &g, |_, x| {
                    if x >= *lo && x <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                }),
                Op::LogNdtr(a) => {
                    elementwise(&mut buf, self, *a, &g, |i, x| (log_normal_pdf_std(x) - y[i]).exp())
                }
                Op::Softmax(a) => {
                    let da = slot(&mut buf, self, *a);
                    for ((drow, grow), yrow) in da
                        .chunks_mut(cols.max(1))
                        .zip(g.chunks(cols.max(1)))
                        .zip(y.chunks(cols.max(1)))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..drow.len() {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let da = slot(&mut buf, self, *a);
                    for ((drow, grow), yrow) in da
                        .chunks_mut(cols.max(1))
                        .zip(g.chunks(cols.max(1)))
                        .zip(y.chunks(cols.max(1)))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..drow.len() {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let (_, c) = self.shape(*a);
                    let av = self.value(*a);
                    let da = slot(&mut buf, self, *a);
                    for (i, drow) in da.chunks_mut(c.max(1)).enumerate() {
                        let arow = &av[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] += g[i] * (arow[j] - y[i]).exp();
                        }
                    }
                }
                Op::RowSum(a) => {
                    let (_, c) = self.shape(*a);
                    let da = slot(&mut buf, self, *a);
                    for (i, drow) in da.chunks_mut(c.max(1)).enumerate() {
                        drow.iter_mut().for_each(|d| *d += g[i]);
                    }
                }
                Op::MaxRows(a, arg) => {
                    let (_, c) = self.shape(*a);
                    let da = slot(&mut buf, self, *a);
                    for (j, &i) in arg.iter().enumerate() {
                        da[i * c + j] += g[j];
                    }
                }
                Op::SumAll(a) => {
                    let da = slot(&mut buf, self, *a);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(a) => {
                    let da = slot(&mut buf, self, *a);
                    let n = da.len() as f64;
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, c) = self.shape(p);
                        if self.rg(p) {
                            let dp = slot(&mut buf, self, p);
                            for i in 0..rows {
                                axpy(
                                    &mut dp[i * c..(i + 1) * c],
                                    1.0,
                                    &g[i * cols + offset..i * cols + offset + c],
                                );
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, c) = self.shape(*a);
                    let da = slot(&mut buf, self, *a);
                    for i in 0..rows {
                        axpy(
                            &mut da[i * c + start..i * c + start + cols],
                            1.0,
                            &g[i * cols..(i + 1) * cols],
                        );
                    }
                }
                Op::GatherRows(a, idx) => {
                    let da = slot(&mut buf, self, *a);
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut da[i * cols..(i + 1) * cols], 1.0, &g[o * cols..(o + 1) * cols]);
                    }
                }
                Op::StackRows(sources) => {
                    for (o, &(v, r)) in sources.iter().enumerate() {
                        if self.rg(v) {
                            let dv = slot(&mut buf, self, v);
                            axpy(&mut dv[r * cols..(r + 1) * cols], 1.0, &g[o * cols..(o + 1) * cols]);
                        }
                    }
                }
                Op::RowCombine(a, entries) => {
                    let da = slot(&mut buf, self, *a);
                    for &(o, i, w) in entries {
                        axpy(&mut da[i * cols..(i + 1) * cols], w, &g[o * cols..(o + 1) * cols]);
                    }
                }
                Op::Pick(a, at) => {
                    let (_, c) = self.shape(*a);
                    let da = slot(&mut buf, self, *a);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        da[i * c + j] += g[k];
                    }
                }
            }
        }
        Ok(inputs)
    }
}

fn slot<'b>(buf: &'b mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var) -> &'b mut Vec<f64> {
    let n = tape.nodes[v.0].rows * tape.nodes[v.0].cols;
    buf[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(buf: &mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var, g: &[f64], s: f64) {
    if tape.rg(v) {
        axpy(slot(buf, tape, v), s, g);
    }
}

/// `d[i] += g[i] * f(i, x[i])` for a unary op on `a`.
fn elementwise(
    buf: &mut [Option<Vec<f64>>],
    tape: &Tape<'_>,
    a: Var,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !tape.rg(a) {
        return;
    }
    let x = tape.value(a);
    let da = slot(buf, tape, a);
    for i in 0..da.len() {
        if g[i] != 0.0 {
            da[i] += g[i] * f(i, x[i]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(orow, aip, &b[p * m..(p + 1) * m]);
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
