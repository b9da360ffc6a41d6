use super::array::{axis_extents, gemm, Array};
use super::lstm::{lstm_backward, lstm_forward, LstmSaved};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Which operand, if any, repeats across the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Rhs,
    Lhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Elu,
    Sqrt,
    Square,
}

enum Op {
    Leaf,
    Binary(Var, Var, BinKind, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Broadcast {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        saved: Box<LstmSaved>,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph that records a tape for reverse-mode
/// differentiation. Nodes are appended in evaluation order, so the tape order
/// is already a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "{op}: axis {axis} out of range for {shape:?}"
        )));
    }
    Ok(())
}

/// Adds `delta` into the gradient slot, moving it in when the slot is empty.
fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Sums a full-length gradient down onto a repeated operand of length `m`.
fn reduce_repeated(full: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for chunk in full.chunks(m) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, parents: &[Var], what: &str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (shape, bcast) = if sa == sb {
            (sa.clone(), Bcast::None)
        } else if self.value(b).numel() == 1 || is_suffix(&sb, &sa) {
            (sa.clone(), Bcast::Rhs)
        } else if self.value(a).numel() == 1 || is_suffix(&sa, &sb) {
            (sb.clone(), Bcast::Lhs)
        } else {
            return Err(mismatch(&format!("{kind:?}"), &sa, &sb));
        };
        let (x, y) = (self.data(a), self.data(b));
        if kind == BinKind::Div && y.iter().any(|&v| v == 0.0) {
            return Err(Error::DomainError("division by zero".into()));
        }
        let f = match kind {
            BinKind::Add => |p: f64, q: f64| p + q,
            BinKind::Sub => |p: f64, q: f64| p - q,
            BinKind::Mul => |p: f64, q: f64| p * q,
            BinKind::Div => |p: f64, q: f64| p / q,
        };
        let out: Vec<f64> = match bcast {
            Bcast::None => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Bcast::Rhs => x
                .chunks(y.len())
                .flat_map(|c| c.iter().zip(y).map(|(&p, &q)| f(p, q)))
                .collect(),
            Bcast::Lhs => y
                .chunks(x.len())
                .flat_map(|c| x.iter().zip(c).map(|(&p, &q)| f(p, q)))
                .collect(),
        };
        self.push(
            Array::from_raw(shape, out),
            Op::Binary(a, b, kind, bcast),
            &[a, b],
            "binary op",
        )
    }

    /// Elementwise sum; `b` may be a scalar or a trailing-shape suffix of `a` (or vice versa).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&p| p * c).collect();
        let shape = v.shape().to_vec();
        self.push(Array::from_raw(shape, out), Op::Scale(x, c), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&p| p + c).collect();
        let shape = v.shape().to_vec();
        self.push(Array::from_raw(shape, out), Op::AddScalar(x), &[x], "add_scalar")
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x);
        match kind {
            Unary::Log if v.data().iter().any(|&p| p <= 0.0) => {
                return Err(Error::DomainError("log of non-positive value".into()))
            }
            Unary::Sqrt if v.data().iter().any(|&p| p < 0.0) => {
                return Err(Error::DomainError("sqrt of negative value".into()))
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |p| -p,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |p| p.max(0.0),
            Unary::Elu => elu,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |p| p * p,
        };
        let out = v.data().iter().map(|&p| f(p)).collect();
        let shape = v.shape().to_vec();
        self.push(Array::from_raw(shape, out), Op::Unary(x, kind), &[x], "unary op")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    /// Exponential linear unit with unit scale: `x` for `x > 0`, else `e^x - 1`.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Elu)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// `a[..., k] · b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push(Array::from_raw(shape, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Batched product `a[b, m, k] · c[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (x, y) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &x[i * m * k..],
                false,
                &y[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Array::from_raw(vec![batch, m, n], out),
            Op::Bmm(a, b),
            &[a, b],
            "bmm",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.data(x), r, c);
        let mut shape = s;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push(Array::from_raw(shape, out), Op::Transpose(x), &[x], "transpose")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "softmax")?;
        let (outer, len, inner) = axis_extents(&s, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        self.push(Array::from_raw(s, out), Op::Softmax(x, axis), &[x], "softmax")
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "reduce")?;
        let (outer, len, inner) = axis_extents(&s, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, v)| *a += v);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = s;
        shape.remove(axis);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        self.push(Array::from_raw(shape, out), op, &[x], "reduce")
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push(Array::scalar(total), Op::SumAll(x), &[x], "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (p, q))| i != axis && p != q) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Array::from_raw(shape, out),
            Op::Concat(xs.to_vec(), axis),
            xs,
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis, "slice")?;
        if start >= end || end > s[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{end} of axis {axis} in {s:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(
            Array::from_raw(shape, out),
            Op::Slice { x, axis, start },
            &[x],
            "slice",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating `x` along it.
    pub fn broadcast(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() || n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "broadcast axis {axis} (x{n}) for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        self.push(
            Array::from_raw(shape, out),
            Op::Broadcast { x, axis },
            &[x],
            "broadcast",
        )
    }

    /// Layer normalization over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::ShapeMismatch("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Array::from_raw(s, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Runs a single-layer LSTM over `x[B, T, in]` from zero state and returns
    /// the hidden sequence `[B, T, h]`. Gate column order is (input, forget,
    /// candidate, output) in `w_ih[in, 4h]`, `w_hh[h, 4h]` and `bias[4h]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let swi = self.shape(w_ih);
        let swh = self.shape(w_hh);
        if sx.len() != 3 || swi.len() != 2 || swh.len() != 2 || swi[0] != sx[2] {
            return Err(mismatch("lstm", &sx, swi));
        }
        let h = swh[0];
        if swi[1] != 4 * h || swh[1] != 4 * h || self.shape(bias) != [4 * h] {
            return Err(mismatch("lstm", swi, swh));
        }
        let (out, saved) = lstm_forward(
            self.data(x),
            self.data(w_ih),
            self.data(w_hh),
            self.data(bias),
            sx[0],
            sx[1],
            sx[2],
            h,
        );
        self.push(
            Array::from_raw(vec![sx[0], sx[1], h], out),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                saved: Box::new(saved),
            },
            &[x, w_ih, w_hh, bias],
            "lstm",
        )
    }

    /// Reverse-mode sweep from a scalar output. Each call starts from fresh
    /// accumulators; differentiable leaves the output does not reach get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut acc: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        acc[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Array::from_raw(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut acc);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[i].is_none() {
                leaves[i] = Some(Array::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, i: usize, g: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.needs(v) {
                accumulate(&mut acc[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(a, b, kind, bcast) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let n = g.len();
                let av = |k: usize| xa[if *bcast == Bcast::Lhs { k % xa.len() } else { k }];
                let bv = |k: usize| xb[if *bcast == Bcast::Rhs { k % xb.len() } else { k }];
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinKind::Add => (g.to_vec(), g.to_vec()),
                    BinKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinKind::Mul => (
                        (0..n).map(|k| g[k] * bv(k)).collect(),
                        (0..n).map(|k| g[k] * av(k)).collect(),
                    ),
                    BinKind::Div => (
                        (0..n).map(|k| g[k] / bv(k)).collect(),
                        (0..n).map(|k| -g[k] * av(k) / (bv(k) * bv(k))).collect(),
                    ),
                };
                let ga = if *bcast == Bcast::Lhs { reduce_repeated(&ga, xa.len()) } else { ga };
                let gb = if *bcast == Bcast::Rhs { reduce_repeated(&gb, xb.len()) } else { gb };
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::Unary(x, kind) => {
                let xs = self.data(*x);
                let d: Vec<f64> = match kind {
                    Unary::Neg => g.iter().map(|v| -v).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xs)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Elu => g
                        .iter()
                        .zip(xs.iter().zip(y))
                        .map(|(g, (x, y))| if *x > 0.0 { *g } else { g * (y + 1.0) })
                        .collect(),
                    Unary::Sqrt => g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect(),
                    Unary::Square => g.iter().zip(xs).map(|(g, x)| 2.0 * g * x).collect(),
                };
                send(*x, d);
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, 0.0, &mut ga);
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, 0.0, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &xb[i * k * n..],
                            true,
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &xa[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            0.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                send(*x, transpose_last2(g, r, c));
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let f = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * f));
                    }
                }
                send(*x, d);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        send(v, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    d[to..to + width * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                send(*x, d);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Broadcast { x, axis } => {
                let s = node.value.shape();
                let n = s[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        d[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, v)| *a += v);
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.data(*gamma);
                let d = gm.len();
                let rows = g.len() / d;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        gx[r * d + j] = inv_std[r] * (gh - mean_gh - hr[j] * mean_ghh);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                bias,
                saved,
            } => {
                let grads = lstm_backward(saved, self.data(*x), self.data(*w_ih), self.data(*w_hh), g);
                send(*x, grads.x);
                send(*w_ih, grads.w_ih);
                send(*w_hh, grads.w_hh);
                send(*bias, grads.bias);
            }
        }
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

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn transpose_last2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (b, block) in src.chunks(r * c).enumerate() {
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}
