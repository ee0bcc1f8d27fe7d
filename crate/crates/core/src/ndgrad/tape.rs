//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. [`Tape::backward`] walks the record in reverse, propagating
//! adjoints and adding the result into the gradient buffer of each leaf that
//! was registered with `requires_grad`. The tape is meant to be dropped once
//! the gradients have been harvested.

use crate::error::{Error, Result};

use super::tensor::{gemm_acc, gemm_into, Real, Tensor2};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, T),
    FrobeniusSq(Var),
    Sum(Var),
    RowSum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Log(Var),
    ClampMin { a: Var, floor: T },
    Abs(Var),
    SoftmaxRows(Var),
    NormalizeRows { a: Var, sums: Vec<T> },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::Scale(..) => "scale",
            Op::FrobeniusSq(_) => "frobenius_sq",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::MeanRows(_) => "mean_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Log(_) => "log",
            Op::ClampMin { .. } => "clamp_min",
            Op::Abs(_) => "abs",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node<T: Real> {
    value: Tensor2<T>,
    op: Op<T>,
    tracked: bool,
}

/// Elementwise binary operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it iff
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor2<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf (never receives a gradient).
    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    /// First recorded value containing NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = gemm_into(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Add => self.add(a, b),
            Elementwise::Sub => self.sub(a, b),
            Elementwise::Mul => self.mul(a, b),
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor2<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::from_vec(va.rows(), va.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::dim("add_row", sa, sr));
        }
        let mut out = self.value(a).detached();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            out.row_mut(i).iter_mut().zip(&r).for_each(|(o, &b)| *o += b);
        }
        Ok(self.push(out, Op::AddRow { a, row }, &[a, row]))
    }

    /// Scales row `i` of `a` by entry `i` of the `rows x 1` column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::dim("mul_col", sa, sc));
        }
        let mut out = self.value(a).detached();
        let c = self.value(col).data().to_vec();
        for (i, &s) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, Op::MulCol { a, col }, &[a, col]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Squared Frobenius norm as a 1x1 tensor.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor2::scalar(s), Op::FrobeniusSq(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor2::scalar(s), Op::Sum(a), &[a])
    }

    /// Per-row sums as a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect();
        let out = Tensor2::from_vec(v.rows(), 1, data).expect("shape");
        self.push(out, Op::RowSum(a), &[a])
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let inv = T::one() / T::of(v.rows() as f64);
        let mut data = vec![T::zero(); v.cols()];
        for i in 0..v.rows() {
            data.iter_mut().zip(v.row(i)).for_each(|(d, &x)| *d += x);
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor2::from_vec(1, v.cols(), data).expect("shape");
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of empty list".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + width > c {
            return Err(Error::dim("slice_cols", (r, c), (start, width)));
        }
        let v = self.value(a);
        let mut out = Tensor2::zeros(r, width);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }, &[a]))
    }

    /// Splits columns into `h` equal blocks.
    pub fn split_cols(&mut self, a: Var, h: usize) -> Result<Vec<Var>> {
        let (r, c) = self.shape(a);
        if h == 0 || c % h != 0 {
            return Err(Error::dim("split_cols", (r, c), (h, 0)));
        }
        let width = c / h;
        (0..h).map(|l| self.slice_cols(a, l * width, width)).collect()
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC));
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("nonpositive argument {bad}"),
            });
        }
        let out = self.value(a).map(|x| x.ln());
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    /// `max(a, floor)`; the gradient is passed only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push(out, Op::ClampMin { a, floor }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let mut out = v.detached();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.detached();
        let mut sums = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let s: T = v.row(i).iter().copied().sum();
            if !(s > T::zero()) {
                return Err(Error::Numeric {
                    op: "normalize_rows",
                    detail: format!("row {i} sums to {s}"),
                });
            }
            out.row_mut(i).iter_mut().for_each(|x| *x = *x / s);
            sums.push(s);
        }
        Ok(self.push(out, Op::NormalizeRows { a, sums }, &[a]))
    }

    /// Standardizes each row to zero mean and unit variance (population
    /// variance, `sqrt(var + eps)` denominator), then applies `gain` and
    /// `bias` (both `1 x cols`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sa = self.shape(a);
        for p in [gain, bias] {
            if self.shape(p) != (1, sa.1) {
                return Err(Error::dim("layer_norm", sa, self.shape(p)));
            }
        }
        let (rows, cols) = sa;
        let inv_c = T::one() / T::of(cols as f64);
        let v = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let x = v.row(i);
            let mean = x.iter().copied().sum::<T>() * inv_c;
            let var = x.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            let xh = &mut xhat[i * cols..(i + 1) * cols];
            let o = out.row_mut(i);
            for j in 0..cols {
                xh[j] = (x[j] - mean) * r;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[a, gain, bias],
        ))
    }

    /// Propagates from a 1x1 `loss` and accumulates into every leaf that
    /// requires a gradient. Calling it twice doubles those gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    let out_shape = node.value.shape();
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].tracked {
                        // C = op(A) op(B): dop(A) = G op(B)^T
                        let buf = slot(&mut adj, a, va.len());
                        if ta {
                            // dA = op(B) G^T
                            gemm_acc(vb.data(), vb.shape(), tb, &g, out_shape, true, buf);
                        } else {
                            gemm_acc(&g, out_shape, false, vb.data(), vb.shape(), !tb, buf);
                        }
                    }
                    if self.nodes[b.0].tracked {
                        let buf = slot(&mut adj, b, vb.len());
                        if tb {
                            // dB = G^T op(A)
                            gemm_acc(&g, out_shape, true, va.data(), va.shape(), ta, buf);
                        } else {
                            gemm_acc(va.data(), va.shape(), !ta, &g, out_shape, false, buf);
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_map(&mut adj, a, &g, |_, gv| gv);
                    self.acc_map(&mut adj, b, &g, |_, gv| gv);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_map(&mut adj, a, &g, |_, gv| gv);
                    self.acc_map(&mut adj, b, &g, |_, gv| -gv);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = self.nodes[a.0].value.data().to_vec();
                    let vb = self.nodes[b.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| gv * vb[k]);
                    self.acc_map(&mut adj, b, &g, |k, gv| gv * va[k]);
                }
                Op::AddRow { a, row } => {
                    let (a, row) = (*a, *row);
                    let cols = node.value.cols();
                    self.acc_map(&mut adj, a, &g, |_, gv| gv);
                    if self.nodes[row.0].tracked {
                        let buf = slot(&mut adj, row, cols);
                        for r in g.chunks(cols) {
                            buf.iter_mut().zip(r).for_each(|(b, &x)| *b += x);
                        }
                    }
                }
                Op::MulCol { a, col } => {
                    let (a, col) = (*a, *col);
                    let cols = node.value.cols();
                    let va = self.nodes[a.0].value.data().to_vec();
                    let vc = self.nodes[col.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| gv * vc[k / cols]);
                    if self.nodes[col.0].tracked {
                        let buf = slot(&mut adj, col, vc.len());
                        for (k, (&gv, &x)) in g.iter().zip(&va).enumerate() {
                            buf[k / cols] += gv * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.acc_map(&mut adj, a, &g, |_, gv| gv * c);
                }
                Op::FrobeniusSq(a) => {
                    let a = *a;
                    let va = self.nodes[a.0].value.data().to_vec();
                    let two = T::of(2.0) * g[0];
                    self.acc_map(&mut adj, a, &va, |_, x| two * x);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len();
                    let g0 = g[0];
                    self.acc_map(&mut adj, a, &vec![g0; n], |_, gv| gv);
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let cols = self.nodes[a.0].value.cols();
                    let n = self.nodes[a.0].value.len();
                    let spread: Vec<T> = (0..n).map(|k| g[k / cols]).collect();
                    self.acc_map(&mut adj, a, &spread, |_, gv| gv);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    let inv = T::one() / T::of(rows as f64);
                    let spread: Vec<T> = (0..rows * cols).map(|k| g[k % cols] * inv).collect();
                    self.acc_map(&mut adj, a, &spread, |_, gv| gv);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let (rows, cols) = node.value.shape();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].tracked {
                            let buf = slot(&mut adj, p, rows * w);
                            for r in 0..rows {
                                let src = &g[r * cols + off..r * cols + off + w];
                                buf[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(b, &x)| *b += x);
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let (rows, w) = node.value.shape();
                    let cols = self.nodes[a.0].value.cols();
                    if self.nodes[a.0].tracked {
                        let buf = slot(&mut adj, a, rows * cols);
                        for r in 0..rows {
                            buf[r * cols + start..r * cols + start + w]
                                .iter_mut()
                                .zip(&g[r * w..(r + 1) * w])
                                .for_each(|(b, &x)| *b += x);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (rows, cols) = node.value.shape();
                    let gt = Tensor2::from_vec(rows, cols, g).expect("shape").transpose();
                    self.acc_map(&mut adj, a, gt.data(), |_, gv| gv);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| {
                        if va[k] > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let va = self.nodes[a.0].value.data().to_vec();
                    let (kk, c) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC));
                    let (half, three) = (T::of(0.5), T::of(3.0));
                    self.acc_map(&mut adj, a, &g, |k, gv| {
                        let x = va[k];
                        let t = (kk * (x + c * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * kk * (T::one() + three * c * x * x);
                        gv * (half * (T::one() + t) + half * x * dt)
                    });
                }
                Op::Log(a) => {
                    let a = *a;
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| gv / va[k]);
                }
                Op::ClampMin { a, floor } => {
                    let (a, floor) = (*a, *floor);
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| {
                        if va[k] > floor {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                }
                Op::Abs(a) => {
                    let a = *a;
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.acc_map(&mut adj, a, &g, |k, gv| {
                        if va[k] < T::zero() {
                            -gv
                        } else {
                            gv
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc_map(&mut adj, a, &dx, |_, v| v);
                }
                Op::NormalizeRows { a, sums } => {
                    let a = *a;
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, &s) in sums.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = (gr[j] - dot) / s;
                        }
                    }
                    self.acc_map(&mut adj, a, &dx, |_, v| v);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (a, gain, bias) = (*a, *gain, *bias);
                    let (rows, cols) = node.value.shape();
                    let gv = self.nodes[gain.0].value.data().to_vec();
                    let inv_c = T::one() / T::of(cols as f64);
                    let mut dx = vec![T::zero(); rows * cols];
                    let mut dgain = vec![T::zero(); cols];
                    let mut dbias = vec![T::zero(); cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                            dgain[j] += gr[j] * xh[j];
                            dbias[j] += gr[j];
                        }
                        let (md, mdx) = (sum_d * inv_c, sum_dx * inv_c);
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            dx[r * cols + j] = rstd[r] * (d - md - xh[j] * mdx);
                        }
                    }
                    self.acc_map(&mut adj, a, &dx, |_, v| v);
                    self.acc_map(&mut adj, gain, &dgain, |_, v| v);
                    self.acc_map(&mut adj, bias, &dbias, |_, v| v);
                }
            }
        }
        Ok(())
    }

    /// `adj[target][k] += f(k, src[k])` if `target` is tracked.
    fn acc_map(
        &self,
        adj: &mut [Option<Vec<T>>],
        target: Var,
        src: &[T],
        f: impl Fn(usize, T) -> T,
    ) {
        if !self.nodes[target.0].tracked {
            return;
        }
        let buf = slot(adj, target, src.len());
        for (k, (b, &s)) in buf.iter_mut().zip(src).enumerate() {
            *b += f(k, s);
        }
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// In-place max-shifted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
