use super::{Result, Tensor, TensorError};
use std::cell::RefCell;

// Recorded primitive application. Input/output handles are kept on the entry;
// VJPs read values straight from them, so no separate saved-intermediate store
// is needed (`exp`/`sigmoid` reuse their own outputs).
enum Op {
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Exp { x: Tensor, out: Tensor },
    Log { x: Tensor, out: Tensor },
    Relu { x: Tensor, out: Tensor },
    Sigmoid { x: Tensor, out: Tensor },
    Softmax { x: Tensor, out: Tensor, axis: usize },
    Sum { x: Tensor, out: Tensor, axis: Option<usize> },
    Mean { x: Tensor, out: Tensor, axis: Option<usize> },
    Concat { parts: Vec<Tensor>, out: Tensor, axis: usize },
    Slice { x: Tensor, out: Tensor, axis: usize, start: usize },
    IndexSelect { x: Tensor, out: Tensor, axis: usize, indices: Vec<usize> },
    Reshape { x: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    BroadcastTo { x: Tensor, out: Tensor },
    Dot { a: Tensor, b: Tensor, out: Tensor },
    L2Norm { x: Tensor, out: Tensor },
    Scale { x: Tensor, out: Tensor, c: f64 },
    AddScalar { x: Tensor, out: Tensor },
    BceLogits { logits: Tensor, out: Tensor, targets: Vec<f64> },
}

/// Wengert list for one forward/backward pass. Ops that see at least one
/// grad-requiring input are recorded in application order, which is already
/// topological; [`Tape::backward`] walks the list in reverse and is the only
/// consumer.
#[derive(Default)]
pub struct Tape {
    entries: RefCell<Vec<Op>>,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Tiling-index layout for the limited broadcast rule: identical shapes,
/// scalar, or one shape a trailing suffix of the other.
fn ew_layout<'a>(
    op: &'static str,
    a: &'a Tensor,
    b: &'a Tensor,
) -> Result<(Vec<usize>, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((sa.to_vec(), a.numel(), b.numel()));
    }
    if b.numel() == 1 || is_suffix(sb, sa) {
        return Ok((sa.to_vec(), a.numel(), b.numel()));
    }
    if a.numel() == 1 || is_suffix(sa, sb) {
        return Ok((sb.to_vec(), a.numel(), b.numel()));
    }
    Err(TensorError::Shape {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })
}

fn fold_into(grad_small: &mut [f64], grad_big: &[f64]) {
    let n = grad_small.len();
    for (i, g) in grad_big.iter().enumerate() {
        grad_small[i % n] += g;
    }
}

// (outer, mid, inner) decomposition of `shape` around `axis`: flat index
// (o * mid + m) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    fn record(&self, op: Op) {
        self.entries.borrow_mut().push(op);
    }

    fn make_out(&self, shape: Vec<usize>, values: Vec<f64>, track: bool) -> Tensor {
        Tensor::leaf(shape, values, track).expect("op produced consistent shape")
    }

    // ── elementwise with limited broadcast ──────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, na, nb) = ew_layout("add", a, b)?;
        let n = shape.iter().product::<usize>();
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = av[i % na] + bv[i % nb];
        }
        let track = a.requires_grad() || b.requires_grad();
        let out = self.make_out(shape, out, track);
        if track {
            self.record(Op::Add { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, na, nb) = ew_layout("sub", a, b)?;
        let n = shape.iter().product::<usize>();
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = av[i % na] - bv[i % nb];
        }
        let track = a.requires_grad() || b.requires_grad();
        let out = self.make_out(shape, out, track);
        if track {
            self.record(Op::Sub { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, na, nb) = ew_layout("mul", a, b)?;
        let n = shape.iter().product::<usize>();
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = av[i % na] * bv[i % nb];
        }
        let track = a.requires_grad() || b.requires_grad();
        let out = self.make_out(shape, out, track);
        if track {
            self.record(Op::Mul { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += aip * bb;
                }
            }
        }
        let track = a.requires_grad() || b.requires_grad();
        let out = self.make_out(vec![m, n], out, track);
        if track {
            self.record(Op::Matmul { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let v: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
        let track = a.requires_grad() || b.requires_grad();
        let out = self.make_out(vec![], vec![v], track);
        if track {
            self.record(Op::Dot { a: a.clone(), b: b.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Euclidean norm of a vector; the zero vector is rejected because the
    /// derivative is undefined there.
    pub fn l2norm(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 1 {
            return Err(TensorError::Shape { op: "l2norm", lhs: x.shape().to_vec(), rhs: vec![] });
        }
        let ss: f64 = x.values().iter().map(|v| v * v).sum();
        if ss == 0.0 {
            return Err(TensorError::Domain {
                op: "l2norm",
                msg: "zero vector has no normalized direction".into(),
            });
        }
        let out = self.make_out(vec![], vec![ss.sqrt()], x.requires_grad());
        if x.requires_grad() {
            self.record(Op::L2Norm { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    // ── pointwise nonlinearities ────────────────────────────────────

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v.exp()).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Exp { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(bad) = x.values().iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("log of non-positive value {bad}"),
            });
        }
        let out: Vec<f64> = x.values().iter().map(|v| v.ln()).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Log { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// `max(0, x)` elementwise; gradient at the kink is taken as 0.
    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v.max(0.0)).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Relu { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|&v| stable_sigmoid(v)).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Sigmoid { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(TensorError::Shape { op: "softmax", lhs: x.shape().to_vec(), rhs: vec![axis] });
        }
        let (outer, mid, inner) = axis_split(x.shape(), axis);
        let xv = x.values();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for m in 0..mid {
                    mx = mx.max(xv[at(m)]);
                }
                let mut s = 0.0;
                for m in 0..mid {
                    let e = (xv[at(m)] - mx).exp();
                    out[at(m)] = e;
                    s += e;
                }
                for m in 0..mid {
                    out[at(m)] /= s;
                }
            }
        }
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Softmax { x: x.clone(), out: out.clone(), axis });
        }
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(x, axis, true)
    }

    fn reduce(&self, x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let (shape, vals) = match axis {
            None => {
                let mut s: f64 = x.values().iter().sum();
                if mean {
                    s /= x.numel() as f64;
                }
                (vec![], vec![s])
            }
            Some(ax) => {
                if ax >= x.shape().len() {
                    return Err(TensorError::Shape {
                        op: "reduce",
                        lhs: x.shape().to_vec(),
                        rhs: vec![ax],
                    });
                }
                let (outer, mid, inner) = axis_split(x.shape(), ax);
                let xv = x.values();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            out[o * inner + i] += xv[(o * mid + m) * inner + i];
                        }
                    }
                }
                if mean {
                    for v in &mut out {
                        *v /= mid as f64;
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.remove(ax);
                (shape, out)
            }
        };
        let out = self.make_out(shape, vals, x.requires_grad());
        if x.requires_grad() {
            let op = if mean {
                Op::Mean { x: x.clone(), out: out.clone(), axis }
            } else {
                Op::Sum { x: x.clone(), out: out.clone(), axis }
            };
            self.record(op);
        }
        Ok(out)
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn concat(&self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Shape { op: "concat", lhs: vec![], rhs: vec![axis] });
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let mut total_mid = 0;
        for p in parts {
            let s = p.shape();
            let same_other = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == parts[0].shape()[d]);
            if !same_other {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total_mid += s[axis];
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total_mid;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total_mid * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let track = parts.iter().any(|p| p.requires_grad());
        let out = self.make_out(shape, out, track);
        if track {
            self.record(Op::Concat { parts: parts.to_vec(), out: out.clone(), axis });
        }
        Ok(out)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.shape().len() || start + len > x.shape()[axis] {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, mid, inner) = axis_split(x.shape(), axis);
        let xv = x.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = self.make_out(shape, out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Slice { x: x.clone(), out: out.clone(), axis, start });
        }
        Ok(out)
    }

    /// Arbitrary (possibly repeated) index pick along `axis`; the backward
    /// pass scatter-adds.
    pub fn index_select(&self, x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= x.shape().len() {
            return Err(TensorError::Shape {
                op: "index_select",
                lhs: x.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, mid, inner) = axis_split(x.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&j| j >= mid) {
            return Err(TensorError::Shape {
                op: "index_select",
                lhs: x.shape().to_vec(),
                rhs: vec![axis, bad],
            });
        }
        let xv = x.values();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let base = (o * mid + j) * inner;
                out.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let out = self.make_out(shape, out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::IndexSelect {
                x: x.clone(),
                out: out.clone(),
                axis,
                indices: indices.to_vec(),
            });
        }
        Ok(out)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(TensorError::Shape { op: "transpose", lhs: x.shape().to_vec(), rhs: vec![] });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let xv = x.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let out = self.make_out(vec![n, m], out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Transpose { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::Shape { op: "reshape", lhs: x.shape().to_vec(), rhs: shape });
        }
        let out = self.make_out(shape, x.values().to_vec(), x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Reshape { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    /// Tile `x` up to `shape`; `x` must be a scalar or a trailing suffix.
    pub fn broadcast_to(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let ok = x.numel() == 1 || is_suffix(x.shape(), &shape);
        if !ok {
            return Err(TensorError::Shape {
                op: "broadcast",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let n: usize = shape.iter().product();
        let ns = x.numel();
        let xv = x.values();
        let out: Vec<f64> = (0..n).map(|i| xv[i % ns]).collect();
        let out = self.make_out(shape, out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::BroadcastTo { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    // ── scalar-parameter ops ────────────────────────────────────────

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v * c).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::Scale { x: x.clone(), out: out.clone(), c });
        }
        Ok(out)
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.values().iter().map(|v| v + c).collect();
        let out = self.make_out(x.shape().to_vec(), out, x.requires_grad());
        if x.requires_grad() {
            self.record(Op::AddScalar { x: x.clone(), out: out.clone() });
        }
        Ok(out)
    }

    pub fn neg(&self, x: &Tensor) -> Result<Tensor> {
        self.scale(x, -1.0)
    }

    /// Numerically stable binary cross-entropy against fixed 0/1 targets,
    /// fused so the gradient is exactly `sigmoid(logit) - y`.
    pub fn bce_with_logits(&self, logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != logits.numel() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let out: Vec<f64> = logits
            .values()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let out = self.make_out(logits.shape().to_vec(), out, logits.requires_grad());
        if logits.requires_grad() {
            self.record(Op::BceLogits {
                logits: logits.clone(),
                out: out.clone(),
                targets: targets.to_vec(),
            });
        }
        Ok(out)
    }

    // ── composite helpers ───────────────────────────────────────────

    /// `clamp(x, lo, hi)` built from relu pieces; gradient is 1 strictly
    /// inside the band and 0 outside.
    pub fn clamp(&self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let a = self.relu(&self.add_scalar(x, -lo)?)?;
        let b = self.relu(&self.add_scalar(x, -hi)?)?;
        self.add_scalar(&self.sub(&a, &b)?, lo)
    }

    /// Pack rank-0 tensors into a vector of length `n`.
    pub fn stack_scalars(&self, xs: &[Tensor]) -> Result<Tensor> {
        let ones: Vec<Tensor> = xs
            .iter()
            .map(|x| self.reshape(x, vec![1]))
            .collect::<Result<_>>()?;
        self.concat(&ones, 0)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`; consumes the tape. Every leaf with
    /// `requires_grad` that the loss depends on ends up with its gradient
    /// accumulated; untouched leaves read back as zero.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::Rank { shape: loss.shape().to_vec() });
        }
        loss.accumulate_grad(&[1.0]);
        let entries = self.entries.into_inner();
        for op in entries.iter().rev() {
            backward_op(op);
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn grad_of(t: &Tensor) -> Option<Vec<f64>> {
    t.take_grad_for_backward()
}

// Accumulate an elementwise-op gradient into `t`, folding back over the
// broadcast tiling when `t` is the smaller operand.
fn push_ew(t: &Tensor, grad: &[f64]) {
    if !t.requires_grad() {
        return;
    }
    if t.numel() == grad.len() {
        t.accumulate_grad(grad);
    } else {
        let mut small = vec![0.0; t.numel()];
        fold_into(&mut small, grad);
        t.accumulate_grad(&small);
    }
}

fn backward_op(op: &Op) {
    match op {
        Op::Add { a, b, out } => {
            if let Some(g) = grad_of(out) {
                push_ew(a, &g);
                push_ew(b, &g);
            }
        }
        Op::Sub { a, b, out } => {
            if let Some(g) = grad_of(out) {
                push_ew(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                push_ew(b, &neg);
            }
        }
        Op::Mul { a, b, out } => {
            if let Some(g) = grad_of(out) {
                let (na, nb) = (a.numel(), b.numel());
                let (av, bv) = (a.values(), b.values());
                if a.requires_grad() {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                    push_ew(a, &ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * av[i % na]).collect();
                    push_ew(b, &gb);
                }
            }
        }
        Op::Matmul { a, b, out } => {
            if let Some(g) = grad_of(out) {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (av, bv) = (a.values(), b.values());
                if a.requires_grad() {
                    // dA = G @ B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    // dB = A^T @ G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    b.accumulate_grad(&gb);
                }
            }
        }
        Op::Exp { x, out } => {
            if let Some(g) = grad_of(out) {
                let ov = out.values();
                let gx: Vec<f64> = g.iter().zip(ov).map(|(gi, o)| gi * o).collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::Log { x, out } => {
            if let Some(g) = grad_of(out) {
                let xv = x.values();
                let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, v)| gi / v).collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::Relu { x, out } => {
            if let Some(g) = grad_of(out) {
                let xv = x.values();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::Sigmoid { x, out } => {
            if let Some(g) = grad_of(out) {
                let ov = out.values();
                let gx: Vec<f64> = g.iter().zip(ov).map(|(gi, o)| gi * o * (1.0 - o)).collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::Softmax { x, out, axis } => {
            if let Some(g) = grad_of(out) {
                let (outer, mid, inner) = axis_split(x.shape(), *axis);
                let ov = out.values();
                let mut gx = vec![0.0; ov.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + i;
                        let mut dotp = 0.0;
                        for m in 0..mid {
                            dotp += g[at(m)] * ov[at(m)];
                        }
                        for m in 0..mid {
                            gx[at(m)] = ov[at(m)] * (g[at(m)] - dotp);
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
        }
        Op::Sum { x, out, axis } => {
            if let Some(g) = grad_of(out) {
                x.accumulate_grad(&spread(x.shape(), *axis, &g, 1.0));
            }
        }
        Op::Mean { x, out, axis } => {
            if let Some(g) = grad_of(out) {
                let denom = match axis {
                    None => x.numel() as f64,
                    Some(ax) => x.shape()[*ax] as f64,
                };
                x.accumulate_grad(&spread(x.shape(), *axis, &g, 1.0 / denom));
            }
        }
        Op::Concat { parts, out, axis } => {
            if let Some(g) = grad_of(out) {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for p in parts {
                    offsets.push(acc);
                    acc += p.shape()[*axis] * inner;
                }
                let stride = acc;
                for (p, off) in parts.iter().zip(&offsets) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let chunk = p.shape()[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * stride + off;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    p.accumulate_grad(&gp);
                }
            }
        }
        Op::Slice { x, out, axis, start } => {
            if let Some(g) = grad_of(out) {
                let (outer, mid, inner) = axis_split(x.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * mid + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                x.accumulate_grad(&gx);
            }
        }
        Op::IndexSelect { x, out, axis, indices } => {
            if let Some(g) = grad_of(out) {
                let (outer, mid, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for (j_out, &j_in) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j_out) * inner;
                        let dst = (o * mid + j_in) * inner;
                        for i in 0..inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
        }
        Op::Reshape { x, out } => {
            if let Some(g) = grad_of(out) {
                x.accumulate_grad(&g);
            }
        }
        Op::Transpose { x, out } => {
            if let Some(g) = grad_of(out) {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                x.accumulate_grad(&gx);
            }
        }
        Op::BroadcastTo { x, out } => {
            if let Some(g) = grad_of(out) {
                push_ew(x, &g);
            }
        }
        Op::Dot { a, b, out } => {
            if let Some(g) = grad_of(out) {
                let s = g[0];
                if a.requires_grad() {
                    let ga: Vec<f64> = b.values().iter().map(|v| s * v).collect();
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = a.values().iter().map(|v| s * v).collect();
                    b.accumulate_grad(&gb);
                }
            }
        }
        Op::L2Norm { x, out } => {
            if let Some(g) = grad_of(out) {
                let s = g[0] / out.values()[0];
                let gx: Vec<f64> = x.values().iter().map(|v| s * v).collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::Scale { x, out, c } => {
            if let Some(g) = grad_of(out) {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                x.accumulate_grad(&gx);
            }
        }
        Op::AddScalar { x, out } => {
            if let Some(g) = grad_of(out) {
                x.accumulate_grad(&g);
            }
        }
        Op::BceLogits { logits, out, targets } => {
            if let Some(g) = grad_of(out) {
                let gx: Vec<f64> = logits
                    .values()
                    .iter()
                    .zip(targets)
                    .zip(&g)
                    .map(|((&x, &y), gi)| gi * (stable_sigmoid(x) - y))
                    .collect();
                logits.accumulate_grad(&gx);
            }
        }
    }
}

// Expand a reduced gradient back over the reduced axis (or the whole tensor).
fn spread(shape: &[usize], axis: Option<usize>, g: &[f64], scale: f64) -> Vec<f64> {
    match axis {
        None => {
            let n: usize = shape.iter().product();
            vec![g[0] * scale; n]
        }
        Some(ax) => {
            let (outer, mid, inner) = axis_split(shape, ax);
            let mut gx = vec![0.0; outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        gx[(o * mid + m) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            gx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, grad_check_multi, Tensor, TensorError};
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    fn p(shape: &[usize], vals: &[f64]) -> Tensor {
        Tensor::param(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(TensorError::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let y = tape.softmax(&x, 0).unwrap();
        for v in y.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_invariant_under_shift_and_stable() {
        let tape = Tape::new();
        let x = t(&[3], &[1000.0, 1001.0, 1002.0]);
        let y = tape.softmax(&x, 0).unwrap();
        let x2 = t(&[3], &[0.0, 1.0, 2.0]);
        let y2 = tape.softmax(&x2, 0).unwrap();
        let s: f64 = y.values().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (a, b) in y.values().iter().zip(y2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let tape = Tape::new();
        let x = t(&[1], &[1.0]);
        let y = tape.sigmoid(&x).unwrap();
        let e = std::f64::consts::E;
        assert!((y.values()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y.values()[0] - 0.7310585786300049).abs() < 1e-15);
        // Tails saturate without overflow: finite, inside [0, 1], and still
        // strictly interior wherever f64 can represent the gap.
        let far = t(&[4], &[-1000.0, -36.0, 36.0, 1000.0]);
        let yf = tape.sigmoid(&far).unwrap();
        assert!(yf.values().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(yf.values()[1] > 0.0 && yf.values()[2] < 1.0);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let tape = Tape::new();
        let x = p(&[], &[0.0]);
        let y = tape.sigmoid(&x).unwrap();
        tape.backward(&y).unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_mean_grad_masks_negative_branch() {
        let tape = Tape::new();
        let x = p(&[2], &[-1.0, 2.0]);
        let y = tape.mean(&tape.relu(&x).unwrap(), None).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = p(&[2], &[1.0, 2.0]);
        let y = tape.relu(&x).unwrap();
        assert!(matches!(tape.backward(&y), Err(TensorError::Rank { .. })));
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // d/dx (x*x) = 2x via two uses of the same handle.
        let tape = Tape::new();
        let x = p(&[], &[3.0]);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn suffix_broadcast_add_and_fold() {
        let tape = Tape::new();
        let a = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = p(&[3], &[10.0, 20.0, 30.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.values(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.sum(&c, None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn scalar_broadcast_any_shape() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::scalar(10.0);
        let c = tape.mul(&a, &s).unwrap();
        assert_eq!(c.values(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2], &[0.0; 2]);
        assert!(matches!(tape.add(&a, &b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn log_domain_error() {
        let tape = Tape::new();
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(tape.log(&x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn l2norm_zero_vector_rejected() {
        let tape = Tape::new();
        let x = t(&[3], &[0.0; 3]);
        assert!(matches!(tape.l2norm(&x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn axis_reductions() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s0 = tape.sum(&x, Some(0)).unwrap();
        assert_eq!(s0.shape(), &[3]);
        assert_eq!(s0.values(), &[5.0, 7.0, 9.0]);
        let m1 = tape.mean(&x, Some(1)).unwrap();
        assert_eq!(m1.shape(), &[2]);
        assert_eq!(m1.values(), &[2.0, 5.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = tape.concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.values(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice(&c, 1, 0, 2).unwrap();
        assert_eq!(back.values(), a.values());
        let tail = tape.slice(&c, 1, 2, 1).unwrap();
        assert_eq!(tail.values(), b.values());
    }

    #[test]
    fn index_select_scatter_add_grad() {
        let tape = Tape::new();
        let x = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // Row 1 picked twice: its gradient doubles.
        let y = tape.index_select(&x, 0, &[1, 1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(&y, None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_band_and_grad() {
        let tape = Tape::new();
        let x = p(&[3], &[-5.0, 0.5, 5.0]);
        let y = tape.clamp(&x, -1.0, 1.0).unwrap();
        assert_eq!(y.values(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum(&y, None).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn bce_logits_values_and_grad() {
        let tape = Tape::new();
        let x = p(&[2], &[0.0, 2.0]);
        let y = tape.bce_with_logits(&x, &[1.0, 0.0]).unwrap();
        // -ln sigmoid(0) = ln 2 ; -ln(1 - sigmoid(2)) = ln(1 + e^2)
        assert!((y.values()[0] - (2.0f64).ln()).abs() < 1e-15);
        assert!((y.values()[1] - (1.0 + 2.0f64.exp()).ln()).abs() < 1e-12);
        let m = tape.mean(&y, None).unwrap();
        tape.backward(&m).unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.5 * (0.5 - 1.0)).abs() < 1e-15);
        assert!((g[1] - 0.5 * stable_sigmoid(2.0)).abs() < 1e-15);
        // Extreme logits stay finite.
        let tape = Tape::new();
        let far = t(&[2], &[-800.0, 800.0]);
        let yf = tape.bce_with_logits(&far, &[1.0, 0.0]).unwrap();
        assert!(yf.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stack_scalars_builds_vector() {
        let tape = Tape::new();
        let parts: Vec<Tensor> = [1.0, 2.0, 3.0].iter().map(|&v| Tensor::scalar(v)).collect();
        let v = tape.stack_scalars(&parts).unwrap();
        assert_eq!(v.shape(), &[3]);
        assert_eq!(v.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_check_attention_like_composite() {
        // softmax(q . K) weighted sum, the shape used by the behavior encoder.
        let err = grad_check_multi(
            |tape, xs| {
                let scores = tape.matmul(&xs[0], &xs[1])?;
                let flat = tape.reshape(&scores, vec![2])?;
                let alpha = tape.softmax(&flat, 0)?;
                let arow = tape.reshape(&alpha, vec![1, 2])?;
                let mixed = tape.matmul(&arow, &xs[2])?;
                tape.sum(&tape.mul(&mixed, &mixed)?, None)
            },
            &[
                (vec![1, 2], vec![0.3, -0.7]),
                (vec![2, 2], vec![1.0, 0.2, -0.4, 0.9]),
                (vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]),
            ],
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn transpose_round_trip_and_grad() {
        let tape = Tape::new();
        let x = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = tape.transpose(&x).unwrap();
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = tape.transpose(&xt).unwrap();
        assert_eq!(back.values(), x.values());
        let err = grad_check_multi(
            |tape, xs| {
                let prod = tape.matmul(&xs[0], &tape.transpose(&xs[0])?)?;
                tape.sum(&tape.mul(&prod, &prod)?, None)
            },
            &[(vec![2, 3], vec![0.3, -0.1, 0.8, 0.4, 0.2, -0.6])],
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_log_exp_norm_chain() {
        let err = grad_check(
            |tape, x| {
                let e = tape.exp(x)?;
                let n = tape.l2norm(&e)?;
                let l = tape.log(&tape.reshape(&n, vec![1])?)?;
                tape.sum(&l, None)
            },
            &[3],
            &[0.1, -0.2, 0.4],
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let tape = Tape::new();
            let x = t(&[2, 3], &vals);
            let y = tape.softmax(&x, 1).unwrap();
            for r in 0..2 {
                let s: f64 = y.values()[r * 3..(r + 1) * 3].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!(y.values().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn smooth_composite_passes_fd_check(vals in proptest::collection::vec(-2.0f64..2.0, 4)) {
            // exp/sigmoid/mul/sum chain: smooth everywhere, so FD must agree.
            let err = grad_check(
                |tape, x| {
                    let a = tape.sigmoid(x)?;
                    let b = tape.exp(&tape.scale(x, 0.5)?)?;
                    tape.mean(&tape.mul(&a, &b)?, None)
                },
                &[4],
                &vals,
            ).unwrap();
            prop_assert!(err < 1e-5, "max rel err {}", err);
        }

        #[test]
        fn backward_is_linear_in_seed(vals in proptest::collection::vec(-3.0f64..3.0, 3), c in 0.1f64..5.0) {
            // Scaling the loss scales every leaf gradient by the same factor.
            let run = |scale: f64| -> Vec<f64> {
                let tape = Tape::new();
                let x = p(&[3], &vals);
                let y = tape.sum(&tape.mul(&tape.sigmoid(&x).unwrap(), &x).unwrap(), None).unwrap();
                let y = tape.scale(&y, scale).unwrap();
                tape.backward(&y).unwrap();
                x.grad().unwrap()
            };
            let g1 = run(1.0);
            let gc = run(c);
            for (a, b) in g1.iter().zip(&gc) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + a.abs() * c));
            }
        }

        #[test]
        fn concat_slice_inverse(n1 in 1usize..4, n2 in 1usize..4, seedv in -10.0f64..10.0) {
            let tape = Tape::new();
            let a_vals: Vec<f64> = (0..n1 * 2).map(|i| seedv + i as f64).collect();
            let b_vals: Vec<f64> = (0..n2 * 2).map(|i| seedv - i as f64).collect();
            let a = t(&[n1, 2], &a_vals);
            let b = t(&[n2, 2], &b_vals);
            let c = tape.concat(&[a.clone(), b.clone()], 0).unwrap();
            let ra = tape.slice(&c, 0, 0, n1).unwrap();
            let rb = tape.slice(&c, 0, n1, n2).unwrap();
            prop_assert_eq!(ra.values(), a.values());
            prop_assert_eq!(rb.values(), b.values());
        }
    }
}
