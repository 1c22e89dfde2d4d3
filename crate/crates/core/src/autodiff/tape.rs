//! The recording tape: forward ops append nodes, `backward` sweeps them in
//! reverse and accumulates exact analytic gradients into the leaves.
//!
//! The op inventory is the minimal closure needed by a decoder-only
//! transformer with a visual prefix: matmuls (plain and B-transposed),
//! elementwise add/mul/scale, bias add over the last dimension, row
//! concat/slice, embedding gather, layer norm, GELU, last-dim softmax,
//! masked fill, and a summed cross entropy with an ignore id. There is no
//! broadcasting beyond the bias add; mismatched shapes panic, naming both
//! shapes, since they are programmer errors rather than data errors.

use std::sync::Arc;

use super::tensor::{assert_same_shape, mm, mm_nt, mm_tn, sc, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Attention visibility: `allow[i*cols + j]` says whether position `i` may
/// attend to position `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), rows * cols);
        Mask { rows, cols, allow }
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    SoftmaxLast(Var),
    MaskedFill(Var, Arc<Mask>),
    CrossEntropySum { logits: Var, targets: Arc<Vec<i64>> },
    SumAll(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires: bool,
    op: Op<T>,
}

/// A topologically ordered record of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    debug_nan_checks: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            debug_nan_checks: false,
        }
    }

    /// Enables per-op NaN screening of inputs (costly; off by default).
    pub fn set_debug_nan_checks(&mut self, on: bool) {
        self.debug_nan_checks = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that accumulates gradients across `backward` calls.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of its shape if it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn check_nan(&self, op: &str, v: Var) {
        if self.debug_nan_checks {
            assert!(
                self.nodes[v.0].value.all_finite(),
                "{op}: non-finite input detected (debug mode)"
            );
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.check_nan("matmul", a);
        self.check_nan("matmul", b);
        let value = mm(self.value(a), self.value(b));
        let requires = self.requires(a) || self.requires(b);
        self.push(value, requires, Op::Matmul(a, b))
    }

    /// `a @ b^T`, with `b` stored row-major as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.check_nan("matmul_nt", a);
        self.check_nan("matmul_nt", b);
        let value = mm_nt(self.value(a), self.value(b));
        let requires = self.requires(a) || self.requires(b);
        self.push(value, requires, Op::MatmulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_nan("add", a);
        self.check_nan("add", b);
        assert_same_shape("add", self.value(a), self.value(b));
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a) || self.requires(b);
        self.push(value, requires, Op::Add(a, b))
    }

    /// `a [m,n] + bias [n]`, broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        self.check_nan("add_bias", a);
        self.check_nan("add_bias", bias);
        let value = {
            let (va, vb) = (self.value(a), self.value(bias));
            assert_eq!(
                vb.shape().len(),
                1,
                "add_bias: bias shape {:?} is not rank 1",
                vb.shape()
            );
            assert_eq!(
                va.cols(),
                vb.len(),
                "add_bias: shape {:?} vs bias {:?}",
                va.shape(),
                vb.shape()
            );
            let n = va.cols();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(idx, &x)| x + vb.data()[idx % n])
                .collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a) || self.requires(bias);
        self.push(value, requires, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_nan("mul", a);
        self.check_nan("mul", b);
        assert_same_shape("mul", self.value(a), self.value(b));
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a) || self.requires(b);
        self.push(value, requires, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.check_nan("scale", a);
        let c: T = sc(c);
        let value = {
            let va = self.value(a);
            let data = va.data().iter().map(|&x| x * c).collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a);
        self.push(value, requires, Op::Scale(a, c))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            self.check_nan("concat_rows", p);
            let v = self.value(p);
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows: shape {:?} vs expected {cols} columns",
                v.shape()
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::from_vec(&[rows, cols], data), requires, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.check_nan("slice_rows", a);
        let value = {
            let va = self.value(a);
            assert!(
                start <= end && end <= va.rows(),
                "slice_rows: {start}..{end} out of bounds for shape {:?}",
                va.shape()
            );
            let n = va.cols();
            Tensor::from_vec(&[end - start, n], va.data()[start * n..end * n].to_vec())
        };
        let requires = self.requires(a);
        self.push(value, requires, Op::SliceRows(a, start))
    }

    /// Gathers `table[id]` rows; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        self.check_nan("embedding", table);
        let value = {
            let vt = self.value(table);
            let (v, d) = (vt.rows(), vt.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                assert!(id < v, "embedding: id {id} out of range for table [{v},{d}]");
                data.extend_from_slice(vt.row(id));
            }
            Tensor::from_vec(&[ids.len(), d], data)
        };
        let requires = self.requires(table);
        self.push(value, requires, Op::Embedding(table, ids.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        self.check_nan("layer_norm", x);
        let value = {
            let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
            let n = vx.cols();
            assert_eq!(
                vg.shape(),
                &[n],
                "layer_norm: gain shape {:?} vs features {n}",
                vg.shape()
            );
            assert_eq!(
                vb.shape(),
                &[n],
                "layer_norm: bias shape {:?} vs features {n}",
                vb.shape()
            );
            let eps: T = sc(LAYER_NORM_EPS);
            let mut out = Tensor::zeros(vx.shape());
            for i in 0..vx.rows() {
                let row = vx.row(i);
                let mean = row.iter().copied().sum::<T>() / sc(n as f64);
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / sc(n as f64);
                let istd = T::one() / (var + eps).sqrt();
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] = (row[j] - mean) * istd * vg.data()[j] + vb.data()[j];
                }
            }
            out
        };
        let requires = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(value, requires, Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.check_nan("gelu", a);
        let value = {
            let va = self.value(a);
            let data = va.data().iter().map(|&x| gelu_value(x)).collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a);
        self.push(value, requires, Op::Gelu(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        self.check_nan("softmax_lastdim", a);
        let value = {
            let va = self.value(a);
            let mut out = Tensor::zeros(va.shape());
            for i in 0..va.rows() {
                softmax_row(va.row(i), out.row_mut(i));
            }
            out
        };
        let requires = self.requires(a);
        self.push(value, requires, Op::SoftmaxLast(a))
    }

    /// Keeps entries where the mask allows attention, fills the rest with
    /// `-inf` so softmax zeroes them.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<Mask>) -> Var {
        self.check_nan("masked_fill", a);
        let value = {
            let va = self.value(a);
            assert_eq!(
                (va.rows(), va.cols()),
                (mask.rows, mask.cols),
                "masked_fill: shape {:?} vs mask [{},{}]",
                va.shape(),
                mask.rows,
                mask.cols
            );
            let data = va
                .data()
                .iter()
                .zip(&mask.allow)
                .map(|(&x, &keep)| if keep { x } else { T::neg_infinity() })
                .collect();
            Tensor::from_vec(va.shape(), data)
        };
        let requires = self.requires(a);
        self.push(value, requires, Op::MaskedFill(a, mask))
    }

    /// Summed token-level negative log-likelihood. `targets[i]` is the class
    /// for row `i`, or `None` to exclude the row. Returns the scalar loss
    /// node and the number of rows that contributed.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<u32>]) -> (Var, usize) {
        self.check_nan("cross_entropy", logits);
        let raw: Arc<Vec<i64>> = Arc::new(
            targets
                .iter()
                .map(|t| t.map(|x| x as i64).unwrap_or(-1))
                .collect(),
        );
        let (value, count) = {
            let vl = self.value(logits);
            assert_eq!(
                vl.rows(),
                targets.len(),
                "cross_entropy: logits {:?} vs {} targets",
                vl.shape(),
                targets.len()
            );
            let classes = vl.cols();
            let mut total = T::zero();
            let mut count = 0usize;
            for (i, &t) in raw.iter().enumerate() {
                if t < 0 {
                    continue;
                }
                let t = t as usize;
                assert!(t < classes, "cross_entropy: target {t} out of range {classes}");
                let row = vl.row(i);
                total = total + log_sum_exp(row) - row[t];
                count += 1;
            }
            (Tensor::scalar(total), count)
        };
        let requires = self.requires(logits);
        (
            self.push(value, requires, Op::CrossEntropySum { logits, targets: raw }),
            count,
        )
    }

    /// Mean NLL over included rows; panics if none are included.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[Option<u32>]) -> Var {
        let (sum, count) = self.cross_entropy_sum(logits, targets);
        assert!(count > 0, "cross_entropy_mean: no targets included");
        self.scale(sum, 1.0 / count as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.check_nan("sum_all", a);
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let requires = self.requires(a);
        self.push(value, requires, Op::SumAll(a))
    }

    /// Reverse sweep from a scalar loss. Gradients of `param` leaves
    /// accumulate across calls; intermediate gradients are per-call scratch.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward: loss has shape {:?}, expected a scalar",
            self.nodes[loss.0].value.shape()
        );
        let mut scratch: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            self.propagate(i, &g, &mut scratch);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + x;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, scratch: &mut Vec<Option<Tensor<T>>>) {
        let mut bump = |v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires {
                return;
            }
            match &mut scratch[v.0] {
                Some(acc) => {
                    for (a, &x) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + x;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                bump(*a, mm_nt(g, self.value(*b)));
                bump(*b, mm_tn(self.value(*a), g));
            }
            Op::MatmulNT(a, b) => {
                bump(*a, mm(g, self.value(*b)));
                bump(*b, mm_tn(g, self.value(*a)));
            }
            Op::Add(a, b) => {
                bump(*a, g.clone());
                bump(*b, g.clone());
            }
            Op::AddBias(a, bias) => {
                bump(*a, g.clone());
                let n = self.value(*bias).len();
                let mut db = Tensor::zeros(&[n]);
                for (idx, &x) in g.data().iter().enumerate() {
                    db.data_mut()[idx % n] = db.data_mut()[idx % n] + x;
                }
                bump(*bias, db);
            }
            Op::Mul(a, b) => {
                let da = elementwise_mul(g, self.value(*b));
                let db = elementwise_mul(g, self.value(*a));
                bump(*a, da);
                bump(*b, db);
            }
            Op::Scale(a, c) => {
                let data = g.data().iter().map(|&x| x * *c).collect();
                bump(*a, Tensor::from_vec(g.shape(), data));
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[row * n..(row + rows) * n].to_vec();
                    bump(p, Tensor::from_vec(&[rows, n], slice));
                    row += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut da = Tensor::zeros(va.shape());
                let n = va.cols();
                da.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                bump(*a, da);
            }
            Op::Embedding(table, ids) => {
                let vt = self.value(*table);
                let mut dt = Tensor::zeros(vt.shape());
                let d = vt.cols();
                for (row, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[row * d..(row + 1) * d];
                    let trow = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (t, &x) in trow.iter_mut().zip(grow) {
                        *t = *t + x;
                    }
                }
                bump(*table, dt);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let n = vx.cols();
                let eps: T = sc(LAYER_NORM_EPS);
                let inv_n: T = T::one() / sc(n as f64);
                let mut dx = Tensor::zeros(vx.shape());
                let mut dgain = Tensor::zeros(&[n]);
                let mut dbias = Tensor::zeros(&[n]);
                for i in 0..vx.rows() {
                    let row = vx.row(i);
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let mean = row.iter().copied().sum::<T>() * inv_n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                    let istd = T::one() / (var + eps).sqrt();
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * istd;
                        let dxhat = grow[j] * vg.data()[j];
                        dgain.data_mut()[j] = dgain.data_mut()[j] + grow[j] * xhat;
                        dbias.data_mut()[j] = dbias.data_mut()[j] + grow[j];
                        mean_dxhat = mean_dxhat + dxhat;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat * inv_n;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                    let drow = dx.row_mut(i);
                    for j in 0..n {
                        let xhat = (row[j] - mean) * istd;
                        let dxhat = grow[j] * vg.data()[j];
                        drow[j] = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                bump(*x, dx);
                bump(*gain, dgain);
                bump(*bias, dbias);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * gelu_derivative(x))
                    .collect();
                bump(*a, Tensor::from_vec(va.shape(), data));
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let n = y.cols();
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let dot: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    let drow = da.row_mut(r);
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                bump(*a, da);
            }
            Op::MaskedFill(a, mask) => {
                let data = g
                    .data()
                    .iter()
                    .zip(&mask.allow)
                    .map(|(&x, &keep)| if keep { x } else { T::zero() })
                    .collect();
                bump(*a, Tensor::from_vec(g.shape(), data));
            }
            Op::CrossEntropySum { logits, targets } => {
                let vl = self.value(*logits);
                let n = vl.cols();
                let gs = g.item();
                let mut dl = Tensor::zeros(vl.shape());
                let mut probs = vec![T::zero(); n];
                for (r, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    softmax_row(vl.row(r), &mut probs);
                    let drow = dl.row_mut(r);
                    for j in 0..n {
                        drow[j] = gs * probs[j];
                    }
                    drow[t as usize] = drow[t as usize] - gs;
                }
                bump(*logits, dl);
            }
            Op::SumAll(a) => {
                let gs = g.item();
                bump(*a, Tensor::filled(self.value(*a).shape(), gs));
            }
        }
    }
}

fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c: T = sc(GELU_C);
    let a: T = sc(GELU_A);
    let half: T = sc(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c: T = sc(GELU_C);
    let a: T = sc(GELU_A);
    let half: T = sc(0.5);
    let three: T = sc(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
