use std::cell::RefCell;
use std::rc::Rc;

use super::{ensure_finite, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Records a forward pass so it can be differentiated in reverse.
///
/// A tape is built once per step and dropped afterwards; node values are
/// immutable once recorded.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { a: usize, c: Rc<Vec<S>> },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    LeakyRelu { a: usize, slope: S },
    Abs { a: usize },
    Square { a: usize },
    Sum { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<S>, rstd: Vec<S> },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Slice { a: usize, cols: usize, start: usize, len: usize },
    Reshape { a: usize },
    RepeatRows { a: usize, times: usize, cols: usize },
    Attention(Box<AttnRecord<S>>),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<S>, classes: usize },
}

struct AttnRecord<S> {
    q: usize,
    k: usize,
    v: usize,
    batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    dim: usize,
    probs: Vec<S>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f64> {
    tape: &'t Tape<S>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_, S>) -> Vec<S> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); v.numel()],
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: &[S]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Fold a gradient of shape `a` down onto a suffix-broadcast operand of `blen` elements.
fn reduce_broadcast<S: Scalar>(g: &[S], blen: usize) -> Vec<S> {
    if g.len() == blen {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); blen];
    for chunk in g.chunks_exact(blen) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push_checked(
        &self,
        what: &str,
        shape: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        needs_grad: bool,
    ) -> Result<Var<'_, S>> {
        ensure_finite(&value, what)?;
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Record a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&self, t: &Tensor<S>) -> Result<Var<'_, S>> {
        ensure_finite(t.data(), "leaf")?;
        Ok(self.leaf_unchecked(t))
    }

    pub(crate) fn leaf_unchecked(&self, t: &Tensor<S>) -> Var<'_, S> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Non-differentiable input.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<S>) -> Result<Var<'_, S>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!("constant of shape {shape:?} given {} values", data.len()));
        }
        self.push_checked("constant", shape, data, Op::Leaf, false)
    }

    /// Differentiable input that is not backed by a stored parameter.
    pub fn variable(&self, shape: Vec<usize>, data: Vec<S>) -> Result<Var<'_, S>> {
        let v = self.constant(shape, data)?;
        self.nodes.borrow_mut()[v.id].needs_grad = true;
        Ok(v)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if wants(a) {
                let bv = &nodes[b].value;
                let mut da = vec![S::zero(); m * k];
                // da = g · bᵀ
                S::gemm(m, n, k, S::one(), g, n as isize, 1, bv, 1, n as isize, S::zero(), &mut da, k as isize, 1);
                add_into(&mut grads[a], &da);
            }
            if wants(b) {
                let av = &nodes[a].value;
                let mut db = vec![S::zero(); k * n];
                // db = aᵀ · g
                S::gemm(k, m, n, S::one(), av, 1, k as isize, g, n as isize, 1, S::zero(), &mut db, n as isize, 1);
                add_into(&mut grads[b], &db);
            }
        }
        &Op::Add { a, b } => {
            if wants(a) {
                add_into(&mut grads[a], g);
            }
            if wants(b) {
                let db = reduce_broadcast(g, nodes[b].value.len());
                add_into(&mut grads[b], &db);
            }
        }
        &Op::Sub { a, b } => {
            if wants(a) {
                add_into(&mut grads[a], g);
            }
            if wants(b) {
                let mut db = reduce_broadcast(g, nodes[b].value.len());
                db.iter_mut().for_each(|v| *v = -*v);
                add_into(&mut grads[b], &db);
            }
        }
        &Op::Mul { a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let bl = bv.len();
            if wants(a) {
                let da: Vec<S> = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % bl]).collect();
                add_into(&mut grads[a], &da);
            }
            if wants(b) {
                let prod: Vec<S> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                let db = reduce_broadcast(&prod, bl);
                add_into(&mut grads[b], &db);
            }
        }
        Op::MulConst { a, c } => {
            let da: Vec<S> = g.iter().zip(c.iter()).map(|(&gi, &ci)| gi * ci).collect();
            add_into(&mut grads[*a], &da);
        }
        &Op::Scale { a, c } => {
            let da: Vec<S> = g.iter().map(|&gi| gi * c).collect();
            add_into(&mut grads[a], &da);
        }
        &Op::AddScalar { a } => add_into(&mut grads[a], g),
        &Op::LeakyRelu { a, slope } => {
            let av = &nodes[a].value;
            let da: Vec<S> = g
                .iter()
                .zip(av)
                .map(|(&gi, &x)| if x >= S::zero() { gi } else { gi * slope })
                .collect();
            add_into(&mut grads[a], &da);
        }
        &Op::Abs { a } => {
            let av = &nodes[a].value;
            let da: Vec<S> = g
                .iter()
                .zip(av)
                .map(|(&gi, &x)| {
                    if x > S::zero() {
                        gi
                    } else if x < S::zero() {
                        -gi
                    } else {
                        S::zero()
                    }
                })
                .collect();
            add_into(&mut grads[a], &da);
        }
        &Op::Square { a } => {
            let av = &nodes[a].value;
            let two = S::lit(2.0);
            let da: Vec<S> = g.iter().zip(av).map(|(&gi, &x)| two * x * gi).collect();
            add_into(&mut grads[a], &da);
        }
        &Op::Sum { a } => {
            let da = vec![g[0]; nodes[a].value.len()];
            add_into(&mut grads[a], &da);
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            let mut da = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = S::zero();
                    for j in 0..len {
                        let p = base + j * inner;
                        dot = dot + g[p] * y[p];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        da[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            add_into(&mut grads[a], &da);
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
            let cols = *cols;
            let gv = &nodes[*gain].value;
            let rows = xhat.len() / cols;
            if wants(*gain) || wants(*bias) {
                let mut dg = vec![S::zero(); cols];
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let p = r * cols + c;
                        dg[c] = dg[c] + g[p] * xhat[p];
                        db[c] = db[c] + g[p];
                    }
                }
                if wants(*gain) {
                    add_into(&mut grads[*gain], &dg);
                }
                if wants(*bias) {
                    add_into(&mut grads[*bias], &db);
                }
            }
            if wants(*x) {
                let n = S::from_usize(cols).unwrap();
                let mut dx = vec![S::zero(); xhat.len()];
                for r in 0..rows {
                    let row = r * cols..(r + 1) * cols;
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for (c, p) in row.clone().enumerate() {
                        let d = g[p] * gv[c];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat[p];
                    }
                    let scale = rstd[r] / n;
                    for (c, p) in row.enumerate() {
                        let d = g[p] * gv[c];
                        dx[p] = scale * (n * d - sum_d - xhat[p] * sum_dx);
                    }
                }
                add_into(&mut grads[*x], &dx);
            }
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, width) in parts {
                if wants(id) {
                    let mut d = Vec::with_capacity(rows * width);
                    for r in 0..*rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + width]);
                    }
                    add_into(&mut grads[id], &d);
                }
                offset += width;
            }
        }
        &Op::Slice { a, cols, start, len } => {
            let rows = g.len() / len;
            let mut da = vec![S::zero(); rows * cols];
            for r in 0..rows {
                da[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            add_into(&mut grads[a], &da);
        }
        &Op::Reshape { a } => add_into(&mut grads[a], g),
        &Op::RepeatRows { a, times, cols } => {
            let rows = nodes[a].value.len() / cols;
            let mut da = vec![S::zero(); rows * cols];
            for r in 0..rows {
                for t in 0..times {
                    let src = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                    da[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
            add_into(&mut grads[a], &da);
        }
        Op::Attention(rec) => attention_backward(nodes, rec, g, grads),
        Op::CrossEntropy { logits, labels, probs, classes } => {
            let n = labels.len();
            let inv = g[0] / S::from_usize(n).unwrap();
            let mut d: Vec<S> = probs.iter().map(|&p| p * inv).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * classes + l] = d[r * classes + l] - inv;
            }
            add_into(&mut grads[*logits], &d);
        }
    }
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    rec: &AttnRecord<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let AttnRecord { q, k, v, batch, lq, lk, heads, dim, ref probs } = *rec;
    let dh = dim / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let mut dq = vec![S::zero(); qv.len()];
    let mut dk = vec![S::zero(); kv.len()];
    let mut dv = vec![S::zero(); vv.len()];
    let mut dp = vec![S::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = (b * lq + i) * dim + off;
                let prow = ((b * heads + h) * lq + i) * lk;
                let p = &probs[prow..prow + lk];
                let go = &g[qrow..qrow + dh];
                let mut dot = S::zero();
                for j in 0..lk {
                    let krow = (b * lk + j) * dim + off;
                    if p[j] != S::zero() {
                        for d in 0..dh {
                            dv[krow + d] = dv[krow + d] + p[j] * go[d];
                        }
                    }
                    let mut s = S::zero();
                    for d in 0..dh {
                        s = s + go[d] * vv[krow + d];
                    }
                    dp[j] = s;
                    dot = dot + p[j] * s;
                }
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let krow = (b * lk + j) * dim + off;
                    for d in 0..dh {
                        dq[qrow + d] = dq[qrow + d] + ds * kv[krow + d];
                        dk[krow + d] = dk[krow + d] + ds * qv[qrow + d];
                    }
                }
            }
        }
    }
    if nodes[q].needs_grad {
        add_into(&mut grads[q], &dq);
    }
    if nodes[k].needs_grad {
        add_into(&mut grads[k], &dk);
    }
    if nodes[v].needs_grad {
        add_into(&mut grads[v], &dv);
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrowing access to the recorded value.
    pub fn with_value<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn unary(&self, what: &str, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var<'t, S>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect::<Vec<_>>())
        };
        let ng = self.tape.needs(self.id);
        self.tape.push_checked(what, shape, value, op, ng)
    }

    fn binary(&self, other: Var<'t, S>, what: &str, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if !suffix_broadcast(&a.shape, &b.shape) {
            return dim_err(format!("{what}: cannot broadcast {:?} onto {:?}", b.shape, a.shape));
        }
        let bl = b.value.len();
        let value = a.value.iter().enumerate().map(|(i, &x)| f(x, b.value[i % bl])).collect();
        Ok((a.shape.clone(), value))
    }

    fn grad_of(&self, other: Var<'t, S>) -> bool {
        self.tape.needs(self.id) || self.tape.needs(other.id)
    }

    /// `self + other`; `other` may broadcast over leading axes.
    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, value) = self.binary(other, "add", |a, b| a + b)?;
        self.tape.push_checked("add", shape, value, Op::Add { a: self.id, b: other.id }, self.grad_of(other))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, value) = self.binary(other, "sub", |a, b| a - b)?;
        self.tape.push_checked("sub", shape, value, Op::Sub { a: self.id, b: other.id }, self.grad_of(other))
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, value) = self.binary(other, "mul", |a, b| a * b)?;
        self.tape.push_checked("mul", shape, value, Op::Mul { a: self.id, b: other.id }, self.grad_of(other))
    }

    /// Elementwise product with a non-differentiable array of the same size.
    pub fn mul_const(&self, c: Rc<Vec<S>>) -> Result<Var<'t, S>> {
        if c.len() != self.numel() {
            return dim_err(format!("mul_const: {} factors for {} values", c.len(), self.numel()));
        }
        let cc = Rc::clone(&c);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().zip(cc.iter()).map(|(&x, &m)| x * m).collect::<Vec<_>>())
        };
        let ng = self.tape.needs(self.id);
        self.tape.push_checked("mul_const", shape, value, Op::MulConst { a: self.id, c }, ng)
    }

    pub fn scale(&self, c: S) -> Result<Var<'t, S>> {
        self.unary("scale", Op::Scale { a: self.id, c }, |x| x * c)
    }

    pub fn add_scalar(&self, c: S) -> Result<Var<'t, S>> {
        self.unary("add_scalar", Op::AddScalar { a: self.id }, |x| x + c)
    }

    pub fn neg(&self) -> Result<Var<'t, S>> {
        self.scale(-S::one())
    }

    pub fn leaky_relu(&self, slope: S) -> Result<Var<'t, S>> {
        if !(slope >= S::zero() && slope < S::one()) {
            return Err(Error::Parameter(format!("leaky_relu slope {slope} outside [0,1)")));
        }
        self.unary("leaky_relu", Op::LeakyRelu { a: self.id, slope }, |x| if x >= S::zero() { x } else { x * slope })
    }

    pub fn relu(&self) -> Result<Var<'t, S>> {
        self.leaky_relu(S::zero())
    }

    pub fn abs(&self) -> Result<Var<'t, S>> {
        self.unary("abs", Op::Abs { a: self.id }, |x| x.abs())
    }

    pub fn square(&self) -> Result<Var<'t, S>> {
        self.unary("square", Op::Square { a: self.id }, |x| x * x)
    }

    pub fn sum(&self) -> Result<Var<'t, S>> {
        let total = self.with_value(|v| v.iter().copied().sum::<S>());
        let ng = self.tape.needs(self.id);
        self.tape.push_checked("sum", vec![1], vec![total], Op::Sum { a: self.id }, ng)
    }

    pub fn mean(&self) -> Result<Var<'t, S>> {
        let n = S::from_usize(self.numel()).unwrap();
        self.sum()?.scale(S::one() / n)
    }

    /// Matrix product. `self` is `[.., k]` (leading axes flattened), `rhs` is `[k, n]`.
    pub fn matmul(&self, rhs: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() < 2 || b.shape.len() != 2 || a.shape[a.shape.len() - 1] != b.shape[0] {
                return dim_err(format!("matmul: incompatible shapes {:?} and {:?}", a.shape, b.shape));
            }
            let k = b.shape[0];
            let n = b.shape[1];
            let m = a.value.len() / k;
            let mut out = vec![S::zero(); m * n];
            S::gemm(m, k, n, S::one(), &a.value, k as isize, 1, &b.value, n as isize, 1, S::zero(), &mut out, n as isize, 1);
            let mut shape = a.shape[..a.shape.len() - 1].to_vec();
            shape.push(n);
            (shape, out, m, k, n)
        };
        self.tape.push_checked(
            "matmul",
            shape,
            value,
            Op::MatMul { a: self.id, b: rhs.id, m, k, n },
            self.grad_of(rhs),
        )
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return dim_err(format!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = self.with_value(|x| {
            let mut out = vec![S::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = S::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(x[base + j * inner]);
                    }
                    let mut z = S::zero();
                    for j in 0..len {
                        let e = (x[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        z = z + e;
                    }
                    for j in 0..len {
                        out[base + j * inner] = out[base + j * inner] / z;
                    }
                }
            }
            out
        });
        let ng = self.tape.needs(self.id);
        self.tape.push_checked("softmax", shape, out, Op::Softmax { a: self.id, outer, len, inner }, ng)
    }

    /// Normalise each row over the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return dim_err(format!("layer_norm: gain/bias must be [{cols}]"));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let n = S::from_usize(cols).unwrap();
        let (out, xhat, rstd) = self.with_value(|x| {
            let rows = x.len() / cols;
            let mut out = vec![S::zero(); x.len()];
            let mut xhat = vec![S::zero(); x.len()];
            let mut rstd = vec![S::zero(); rows];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] - mean) * rs;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * gv[c] + bv[c];
                }
            }
            (out, xhat, rstd)
        });
        let ng = self.tape.needs(self.id) || self.tape.needs(gain.id) || self.tape.needs(bias.id);
        self.tape.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, cols, xhat, rstd },
            ng,
        )
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let tape = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.tape;
        let nodes = tape.nodes.borrow();
        let lead = nodes[parts[0].id].shape[..nodes[parts[0].id].shape.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &nodes[p.id].shape;
            if s[..s.len() - 1] != lead[..] {
                return dim_err(format!("concat: leading shape {:?} vs {:?}", &s[..s.len() - 1], lead));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| nodes[p.id].needs_grad);
        drop(nodes);
        let mut shape = lead;
        shape.push(total);
        let parts = parts.iter().zip(widths).map(|(p, w)| (p.id, w)).collect();
        Ok(tape.push(shape, out, Op::Concat { parts, rows }, ng))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        if start + len > cols || len == 0 {
            return dim_err(format!("slice {start}..{} of last axis {cols}", start + len));
        }
        let out = self.with_value(|x| {
            x.chunks_exact(cols).flat_map(|row| row[start..start + len].iter().copied()).collect::<Vec<_>>()
        });
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let ng = self.tape.needs(self.id);
        Ok(self.tape.push(new_shape, out, Op::Slice { a: self.id, cols, start, len }, ng))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t, S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape()));
        }
        let v = self.value();
        let ng = self.tape.needs(self.id);
        Ok(self.tape.push(shape, v, Op::Reshape { a: self.id }, ng))
    }

    /// `[R, C] -> [R, times, C]`, each row repeated `times` times.
    pub fn repeat_rows(&self, times: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if shape.len() != 2 || times == 0 {
            return dim_err(format!("repeat_rows expects a matrix, got {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let out = self.with_value(|x| {
            let mut out = Vec::with_capacity(rows * times * cols);
            for r in 0..rows {
                for _ in 0..times {
                    out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
                }
            }
            out
        });
        let ng = self.tape.needs(self.id);
        Ok(self.tape.push(vec![rows, times, cols], out, Op::RepeatRows { a: self.id, times, cols }, ng))
    }

    /// Mean cross-entropy between logits `[N, C]` and integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(format!("cross_entropy: logits {shape:?} for {} labels", labels.len()));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parameter(format!("label {bad} >= {classes} classes")));
        }
        let (loss, probs) = self.with_value(|x| {
            let mut probs = vec![S::zero(); x.len()];
            let mut loss = S::zero();
            for (r, &l) in labels.iter().enumerate() {
                let row = &x[r * classes..(r + 1) * classes];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
                let lz = z.ln() + mx;
                for c in 0..classes {
                    probs[r * classes + c] = (row[c] - lz).exp();
                }
                loss = loss + lz - row[l];
            }
            (loss / S::from_usize(labels.len()).unwrap(), probs)
        });
        let ng = self.tape.needs(self.id);
        self.tape.push_checked(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs, classes },
            ng,
        )
    }
}

/// Multi-head scaled dot-product attention over a batch of token sets.
///
/// `q` is `[batch * lq, dim]`, `k` and `v` are `[batch * lk, dim]`.
/// `key_mask[b * lk + j]` marks key `j` of set `b` as valid; invalid keys get
/// zero attention weight. Every set needs at least one valid key.
pub fn attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    key_mask: &[bool],
    batch: usize,
    heads: usize,
) -> Result<Var<'t, S>> {
    let tape = q.tape;
    let nodes = tape.nodes.borrow();
    let (qn, kn, vn) = (&nodes[q.id], &nodes[k.id], &nodes[v.id]);
    let dim = *qn.shape.last().unwrap();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Parameter(format!("{heads} heads do not divide width {dim}")));
    }
    if kn.shape.last() != Some(&dim) || vn.shape != kn.shape {
        return dim_err(format!("attention: q {:?}, k {:?}, v {:?}", qn.shape, kn.shape, vn.shape));
    }
    let nq = qn.value.len() / dim;
    let nk = kn.value.len() / dim;
    if batch == 0 || nq % batch != 0 || nk % batch != 0 || key_mask.len() != nk {
        return dim_err(format!(
            "attention: {nq} queries / {nk} keys / {} mask flags for batch {batch}",
            key_mask.len()
        ));
    }
    let (lq, lk) = (nq / batch, nk / batch);
    for b in 0..batch {
        if !key_mask[b * lk..(b + 1) * lk].iter().any(|&m| m) {
            return Err(Error::Contract(format!("attention: every key of set {b} is masked")));
        }
    }
    let dh = dim / heads;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![S::zero(); batch * heads * lq * lk];
    let mut out = vec![S::zero(); nq * dim];
    let mut scores = vec![S::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = (b * lq + i) * dim + off;
                let mut mx = S::neg_infinity();
                for j in 0..lk {
                    if !key_mask[b * lk + j] {
                        continue;
                    }
                    let krow = (b * lk + j) * dim + off;
                    let mut s = S::zero();
                    for d in 0..dh {
                        s = s + qn.value[qrow + d] * kn.value[krow + d];
                    }
                    scores[j] = s * scale;
                    mx = mx.max(scores[j]);
                }
                let prow = ((b * heads + h) * lq + i) * lk;
                let mut z = S::zero();
                for j in 0..lk {
                    if key_mask[b * lk + j] {
                        let e = (scores[j] - mx).exp();
                        probs[prow + j] = e;
                        z = z + e;
                    }
                }
                for j in 0..lk {
                    let p = probs[prow + j] / z;
                    probs[prow + j] = p;
                    if p != S::zero() {
                        let vrow = (b * lk + j) * dim + off;
                        for d in 0..dh {
                            out[qrow + d] = out[qrow + d] + p * vn.value[vrow + d];
                        }
                    }
                }
            }
        }
    }
    let ng = qn.needs_grad || kn.needs_grad || vn.needs_grad;
    let shape = qn.shape.clone();
    drop(nodes);
    let rec = AttnRecord { q: q.id, k: k.id, v: v.id, batch, lq, lk, heads, dim, probs };
    tape.push_checked("attention", shape, out, Op::Attention(Box::new(rec)), ng)
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}
