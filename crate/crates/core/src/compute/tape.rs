use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    /// Independent sequences stacked along the row axis.
    pub groups: usize,
    pub heads: usize,
    /// Query token `i` only sees key tokens `j <= i`.
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    RepeatRows { x: Var, times: usize },
    SliceCols { x: Var, start: usize },
    ConcatGroups { a: Var, b: Var, groups: usize },
    Reshape(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so inputs always precede the
/// operations that consume them. A tape supports exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` participated in
    /// the differentiated computation.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v).map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()))
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Branch-free scan: vectorizes, unlike an early-exit `any`.
fn all_finite(data: &[f64]) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    data.iter().fold(0u64, |acc, v| acc | u64::from(v.to_bits() & EXP == EXP)) == 0
}

fn row_map(x: &[f64], r: &[f64], cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        out.extend(row.iter().zip(r).map(|(&v, &w)| f(v, w)));
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    // exp-based tanh: much cheaper than libm's, absolute error near 1e-16.
    let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tanh-approximated GELU of a single value.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_parts(x).0
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return contract_err("tape already differentiated; record a new tape");
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a trainable input (shares storage with `t`).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what} expects a matrix, got shape {s:?}")),
        }
    }

    /// Matrix product of `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents disagree: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, MatRef::rows(self.data(a), 0, k), MatRef::rows(self.data(b), 0, n), 0.0, &mut out, 0, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn row_operand(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return dim_err(format!(
                "{what}: row vector of shape {:?} against last axis {cols} of {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        Ok(cols)
    }

    /// Adds a vector to every row (trailing-axis expansion).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "add_row")?;
        let r = self.data(row);
        let out = row_map(self.data(x), r, cols, |v, w| v + w);
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.row_operand(x, row, "mul_row")?;
        let r = self.data(row);
        let out = row_map(self.data(x), r, cols, |v, w| v * w);
        let shape = self.shape(x).to_vec();
        self.push("mul_row", shape, out, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar(x), &[x])
    }

    /// `[R, n] -> [R·times, n]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, n) = self.matrix(x, "repeat_rows")?;
        if times == 0 {
            return contract_err("repeat_rows with zero repetitions");
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * n * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        self.push("repeat_rows", vec![r * times, n], out, Op::RepeatRows { x, times }, &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, n) = self.matrix(x, "slice_cols")?;
        if start >= end || end > n {
            return dim_err(format!("slice_cols {start}..{end} of {:?}", self.shape(x)));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push("slice_cols", vec![r, end - start], out, Op::SliceCols { x, start }, &[x])
    }

    /// Interleaves two row-stacked batches: for each of `groups` groups,
    /// the group's rows of `a` followed by its rows of `b`.
    pub fn concat_groups(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ra, n) = self.matrix(a, "concat_groups")?;
        let (rb, nb) = self.matrix(b, "concat_groups")?;
        if n != nb || groups == 0 || ra % groups != 0 || rb % groups != 0 {
            return dim_err(format!(
                "concat_groups of {:?} and {:?} into {groups} groups",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (pa, pb) = (ra / groups, rb / groups);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity((ra + rb) * n);
        for g in 0..groups {
            out.extend_from_slice(&da[g * pa * n..(g + 1) * pa * n]);
            out.extend_from_slice(&db[g * pb * n..(g + 1) * pb * n]);
        }
        self.push("concat_groups", vec![ra + rb, n], out, Op::ConcatGroups { a, b, groups }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let data = t.into_data();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Affine-free normalization of each row over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if n < 2 {
            return dim_err(format!("layer_norm needs a last axis of at least 2, got {:?}", self.shape(x)));
        }
        let src = self.data(x);
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("silu", shape, out, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Scaled dot-product attention over `spec.groups` independent
    /// sequences. `q` is `[groups·Lq, d]`, `k` and `v` are `[groups·Lk, d]`;
    /// the model width `d` is split evenly across heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rq, d) = self.matrix(q, "attention")?;
        let (rk, dk) = self.matrix(k, "attention")?;
        self.same_shape(k, v, "attention keys/values")?;
        if d != dk {
            return dim_err(format!("attention query width {d} vs key width {dk}"));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {} heads", spec.heads)));
        }
        let g = spec.groups;
        if g == 0 || rq % g != 0 || rk % g != 0 {
            return dim_err(format!("attention rows {rq}/{rk} not divisible into {g} groups"));
        }
        let (lq, lk) = (rq / g, rk / g);
        if spec.causal && lq != lk {
            return dim_err(format!("causal attention needs equal lengths, got {lq} and {lk}"));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; g * spec.heads * lq * lk];
        let mut out = vec![0.0; rq * d];
        for b in 0..g {
            for h in 0..spec.heads {
                let p_off = (b * spec.heads + h) * lq * lk;
                let p = &mut probs[p_off..p_off + lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    MatRef::rows(qd, b * lq * d + h * dh, d),
                    MatRef::transposed(kd, b * lk * d + h * dh, d),
                    0.0,
                    p,
                    0,
                    lk,
                );
                for (i, row) in p.chunks_exact_mut(lk).enumerate() {
                    let visible = if spec.causal { i + 1 } else { lk };
                    for s in row[..visible].iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(&mut row[..visible]);
                    for s in row[visible..].iter_mut() {
                        *s = 0.0;
                    }
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    MatRef::rows(p, 0, lk),
                    MatRef::rows(vd, b * lk * d + h * dh, d),
                    0.0,
                    &mut out,
                    b * lq * d + h * dh,
                    d,
                );
            }
        }
        self.push("attention", vec![rq, d], out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let total: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push("mse", vec![1], vec![total / n], Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        let n = self.value(x).numel() as f64;
        self.push("mean", vec![1], vec![total / n], Op::Mean(x), &[x])
    }

    /// Inverted dropout with drop probability `p`; `p = 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return contract_err(format!("dropout probability {p} outside [0, 1)"));
        }
        let n = self.value(x).numel();
        let mask: Vec<f64> = if p == 0.0 {
            vec![1.0; n]
        } else {
            (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect()
        };
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode pass from a one-element `loss`. Consumes the tape: a
    /// second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return contract_err("backward called twice on the same tape");
        }
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        macro_rules! acc {
            ($v:expr, |$dst:ident| $body:block) => {
                if self.wants($v) {
                    let n = self.nodes[$v.0].value.numel();
                    let $dst: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc!(*a, |dst| {
                    gemm(m, n, k, MatRef::rows(g, 0, n), MatRef::transposed(self.data(*b), 0, n), 1.0, dst, 0, k);
                });
                acc!(*b, |dst| {
                    gemm(k, m, n, MatRef::transposed(self.data(*a), 0, k), MatRef::rows(g, 0, n), 1.0, dst, 0, n);
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += g); });
                acc!(*b, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += g); });
            }
            Op::Sub(a, b) => {
                acc!(*a, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += g); });
                acc!(*b, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d -= g); });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc!(*a, |dst| { for j in 0..g.len() { dst[j] += g[j] * db[j]; } });
                acc!(*b, |dst| { for j in 0..g.len() { dst[j] += g[j] * da[j]; } });
            }
            Op::AddRow(x, row) => {
                let cols = self.value(*row).numel();
                acc!(*x, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += g); });
                acc!(*row, |dst| {
                    for gr in g.chunks_exact(cols) {
                        dst.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let cols = self.value(*row).numel();
                let (dx, dr) = (self.data(*x), self.data(*row));
                acc!(*x, |dst| {
                    for (d, gr) in dst.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        d.iter_mut().zip(gr).zip(dr).for_each(|((d, g), r)| *d += g * r);
                    }
                });
                acc!(*row, |dst| {
                    for (gr, xr) in g.chunks_exact(cols).zip(dx.chunks_exact(cols)) {
                        dst.iter_mut().zip(gr).zip(xr).for_each(|((d, g), x)| *d += g * x);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += c * g); });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc!(*x, |dst| { dst.iter_mut().zip(g).for_each(|(d, g)| *d += g); });
            }
            Op::RepeatRows { x, times } => {
                let n = self.value(*x).cols();
                acc!(*x, |dst| {
                    for (j, gr) in g.chunks_exact(n).enumerate() {
                        let r = j / times;
                        dst[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                acc!(*x, |dst| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        dst[r * n + start..r * n + start + w].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::ConcatGroups { a, b, groups } => {
                let n = node.value.cols();
                let pa = self.value(*a).rows() / groups;
                let pb = self.value(*b).rows() / groups;
                let per = (pa + pb) * n;
                acc!(*a, |dst| {
                    for gi in 0..*groups {
                        let src = &g[gi * per..gi * per + pa * n];
                        dst[gi * pa * n..(gi + 1) * pa * n].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
                acc!(*b, |dst| {
                    for gi in 0..*groups {
                        let src = &g[gi * per + pa * n..(gi + 1) * per];
                        dst[gi * pb * n..(gi + 1) * pb * n].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.cols();
                acc!(*x, |dst| {
                    for (r, ((gr, yr), dr)) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(dst.chunks_exact_mut(n)).enumerate() {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let s = inv_std[r];
                        for j in 0..n {
                            dr[j] += s * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let src = self.data(*x);
                acc!(*x, |dst| { for j in 0..g.len() { dst[j] += g[j] * gelu_parts(src[j]).1; } });
            }
            Op::Silu(x) => {
                let src = self.data(*x);
                acc!(*x, |dst| {
                    for j in 0..g.len() {
                        let s = sigmoid(src[j]);
                        dst[j] += g[j] * s * (1.0 + src[j] * (1.0 - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                acc!(*x, |dst| {
                    for ((gr, yr), dr) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(dst.chunks_exact_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, *spec, probs, g, grads);
            }
            Op::Mse(a, b) => {
                let count = self.value(*a).numel() as f64;
                let (da, db) = (self.data(*a), self.data(*b));
                let c = 2.0 * g[0] / count;
                acc!(*a, |dst| { for j in 0..da.len() { dst[j] += c * (da[j] - db[j]); } });
                acc!(*b, |dst| { for j in 0..da.len() { dst[j] -= c * (da[j] - db[j]); } });
            }
            Op::Sum(x) => {
                acc!(*x, |dst| { dst.iter_mut().for_each(|d| *d += g[0]); });
            }
            Op::Mean(x) => {
                let c = g[0] / self.value(*x).numel() as f64;
                acc!(*x, |dst| { dst.iter_mut().for_each(|d| *d += c); });
            }
            Op::Dropout { x, mask } => {
                acc!(*x, |dst| { for j in 0..g.len() { dst[j] += g[j] * mask[j]; } });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let groups = spec.groups;
        let (lq, lk) = (self.value(q).rows() / groups, self.value(k).rows() / groups);
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = self.wants(q).then(|| vec![0.0; qd.len()]);
        let mut dk = self.wants(k).then(|| vec![0.0; kd.len()]);
        let mut dv = self.wants(v).then(|| vec![0.0; vd.len()]);
        let mut dp = vec![0.0; lq * lk];
        for b in 0..groups {
            for h in 0..spec.heads {
                let p_off = (b * spec.heads + h) * lq * lk;
                let p = &probs[p_off..p_off + lq * lk];
                let (q_off, k_off) = (b * lq * d + h * dh, b * lk * d + h * dh);
                if let Some(dv) = dv.as_mut() {
                    gemm(lk, lq, dh, MatRef::transposed(p, 0, lk), MatRef::rows(g, q_off, d), 1.0, dv, k_off, d);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                gemm(lq, dh, lk, MatRef::rows(g, q_off, d), MatRef::transposed(vd, k_off, d), 0.0, &mut dp, 0, lk);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/sqrt(dh) scale.
                for (pr, dr) in p.chunks_exact(lk).zip(dp.chunks_exact_mut(lk)) {
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(lq, lk, dh, MatRef::rows(&dp, 0, lk), MatRef::rows(kd, k_off, d), 1.0, dq, q_off, d);
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(lk, lq, dh, MatRef::transposed(&dp, 0, lk), MatRef::rows(qd, q_off, d), 1.0, dk, k_off, d);
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(local) = local {
                match grads[var.0].as_mut() {
                    Some(dst) => dst.iter_mut().zip(&local).for_each(|(d, l)| *d += l),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}
