//! Reverse-mode differentiation over an explicit operation record.
//!
//! A [`Tape`] borrows a [`ParamSet`] for the duration of one forward pass.
//! Every operation appends a node holding its output and whatever it needs
//! to evaluate the adjoint; [`Tape::backward`] replays the adjoints in reverse
//! order. A tape can be differentiated once.

use super::{gemm, Array, ParamId, ParamSet, Scalar};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    RowScale { x: Var, factors: Vec<T> },
    Gru { gx: Var, h: Var, w: Var, b: Var, r: Vec<T>, z: Vec<T>, n: Vec<T>, hn: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Surrogate { logits: Var, actions: Vec<usize>, probs: Vec<T>, coef: Vec<T> },
    Entropy { logits: Var, probs: Vec<T>, logp: Vec<T>, ent: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Option<Array<T>>,
    op: Op<T>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    /// One array per parameter, in [`ParamSet`] order; zero where unreachable.
    pub params: Vec<Array<T>>,
    leaves: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> &Array<T> {
        &self.params[id.0]
    }

    /// Gradient with respect to a constant leaf created by [`Tape::constant`].
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    spent: bool,
}

/// Logits row -> (probabilities, log-sum-exp), max-subtracted.
fn softmax_row<T: Scalar>(row: &[T], probs: &mut [T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - m).exp();
        s += *p;
    }
    for p in probs.iter_mut() {
        *p /= s;
    }
    m + s.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape(op: &'static str, a: &Array<impl Scalar>, b: &Array<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn acc<T: Scalar>(grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape { params, param_vars: vec![None; params.len()], nodes: Vec::new(), spent: false }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Smallest `|input|` over all ReLU and abs nodes, the distance to the
    /// nearest non-differentiable point. `None` if the tape has no such node.
    ///
    /// Exact zeros at abs nodes are skipped: they come from differences of
    /// clamped ReLU outputs, which stay zero under small perturbations.
    pub fn kink_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some((x, false)),
                Op::Abs(x) => Some((x, true)),
                _ => None,
            })
            .flat_map(|(x, skip_zero)| {
                self.value(x).data().iter().filter(move |v| !(skip_zero && v.is_zero())).map(|v| v.abs())
            })
            .reduce(|a, b| a.min(b))
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be 4-D [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("weights must be [Cout,Cin,k,k], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels: input has {} but weights expect {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err("conv2d", format!("bias must be [{}], got {bs:?}", ws[0])));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        let k = ws[2];
        if k > xs[2] + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("height: kernel {k} exceeds padded height {}", xs[2] + 2 * padding),
            ));
        }
        if k > xs[3] + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!("width: kernel {k} exceeds padded width {}", xs[3] + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - k) / stride + 1,
            wo: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.batch * geom.positions();
        let mut tmp = vec![T::zero(); rows * geom.cout];
        gemm(rows, geom.patch(), geom.cout, &cols, false, self.value(w).data(), true, &mut tmp, false);
        let bias = self.value(b).data();
        let p = geom.positions();
        let mut out = vec![T::zero(); rows * geom.cout];
        for bi in 0..geom.batch {
            for co in 0..geom.cout {
                let dst = &mut out[(bi * geom.cout + co) * p..(bi * geom.cout + co + 1) * p];
                for (pi, d) in dst.iter_mut().enumerate() {
                    *d = tmp[(bi * p + pi) * geom.cout + co] + bias[co];
                }
            }
        }
        let value = Array::new(&[geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// `x * W^T + b` for `x: [B,n]`, `W: [m,n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(shape_err("linear", format!("expected 2-D input and weights, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("inner dimension: input has {} features, weights expect {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err("linear", format!("bias must be [{}], got {bs:?}", ws[0])));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * m];
        let bias = self.value(b).data();
        for row in out.chunks_mut(m) {
            row.copy_from_slice(bias);
        }
        gemm(batch, n, m, self.value(x).data(), false, self.value(w).data(), true, &mut out, true);
        let value = Array::new(&[batch, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero operands".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(
                    "concat",
                    format!("operand shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let blk = v.dim(axis) * inner;
                data.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let value = Array::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Gather rows (leading-axis slices) in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if rows.is_empty() {
            return Err(Error::Invalid("select_rows with no rows".into()));
        }
        let n = v.dim(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("select_rows", format!("row {bad} out of range for {} rows", n)));
        }
        let w = v.len() / n;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let value = Array::new(&shape, data)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Multiply each leading-axis row by a constant factor.
    pub fn row_scale(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let v = self.value(x);
        if factors.len() != v.dim(0) {
            return Err(shape_err(
                "row_scale",
                format!("{} factors for {} rows", factors.len(), v.dim(0)),
            ));
        }
        let w = v.len() / v.dim(0);
        let data = v.data().iter().enumerate().map(|(i, &x)| x * factors[i / w]).collect();
        let value = Array::new(v.shape(), data)?;
        Ok(self.push(value, Op::RowScale { x, factors: factors.to_vec() }))
    }

    /// Recurrent half of a gated recurrent unit.
    ///
    /// `gx: [B,3m]` is the precomputed input projection (reset, update, new
    /// blocks), `h: [B,m]`, `w: [3m,m]`, `b: [3m]`.
    pub fn gru_step(&mut self, gx: Var, h: Var, w: Var, b: Var) -> Result<Var> {
        let (gs, hs, ws, bs) = (self.shape(gx), self.shape(h), self.shape(w), self.shape(b));
        if hs.len() != 2 {
            return Err(shape_err("gru_cell", format!("hidden must be [B,m], got {hs:?}")));
        }
        let (batch, m) = (hs[0], hs[1]);
        if gs != [batch, 3 * m] {
            return Err(shape_err("gru_cell", format!("input projection must be [{batch},{}], got {gs:?}", 3 * m)));
        }
        if ws != [3 * m, m] || bs != [3 * m] {
            return Err(shape_err("gru_cell", format!("hidden weights {ws:?} / bias {bs:?} do not match hidden size {m}")));
        }
        let mut gh = vec![T::zero(); batch * 3 * m];
        for row in gh.chunks_mut(3 * m) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(batch, m, 3 * m, self.value(h).data(), false, self.value(w).data(), true, &mut gh, true);
        let gxd = self.value(gx).data();
        let hd = self.value(h).data();
        let mut r = vec![T::zero(); batch * m];
        let mut z = vec![T::zero(); batch * m];
        let mut n = vec![T::zero(); batch * m];
        let mut hn = vec![T::zero(); batch * m];
        let mut out = vec![T::zero(); batch * m];
        for bi in 0..batch {
            let gxr = &gxd[bi * 3 * m..(bi + 1) * 3 * m];
            let ghr = &gh[bi * 3 * m..(bi + 1) * 3 * m];
            for j in 0..m {
                let i = bi * m + j;
                r[i] = sigmoid(gxr[j] + ghr[j]);
                z[i] = sigmoid(gxr[m + j] + ghr[m + j]);
                hn[i] = ghr[2 * m + j];
                n[i] = (gxr[2 * m + j] + r[i] * hn[i]).tanh();
                out[i] = (T::one() - z[i]) * n[i] + z[i] * hd[i];
            }
        }
        let value = Array::new(&[batch, m], out)?;
        Ok(self.push(value, Op::Gru { gx, h, w, b, r, z, n, hn }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.dim(0) != targets.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} targets", v.shape(), targets.len()),
            ));
        }
        let (rows, n) = (v.dim(0), v.dim(1));
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Invalid(format!("target {bad} outside [0, {n})")));
        }
        let mut probs = vec![T::zero(); rows * n];
        let mut total = T::zero();
        for i in 0..rows {
            let row = &v.data()[i * n..(i + 1) * n];
            let lse = softmax_row(row, &mut probs[i * n..(i + 1) * n]);
            total += lse - row[targets[i]];
        }
        let value = Array::scalar(total / T::from_usize(rows).unwrap());
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Clipped surrogate policy loss, `mean(-min(r A, clip(r, 1-e, 1+e) A))`
    /// with `r = exp(log pi(a) - old_logp)`.
    pub fn clipped_surrogate(
        &mut self,
        logits: Var,
        actions: &[usize],
        old_logp: &[T],
        advantages: &[T],
        clip: T,
    ) -> Result<Var> {
        let v = self.value(logits);
        let rows = actions.len();
        if v.ndim() != 2 || v.dim(0) != rows || old_logp.len() != rows || advantages.len() != rows {
            return Err(shape_err(
                "clipped_surrogate",
                format!(
                    "logits {:?}, {} actions, {} old log-probs, {} advantages",
                    v.shape(),
                    rows,
                    old_logp.len(),
                    advantages.len()
                ),
            ));
        }
        let n = v.dim(1);
        if let Some(&bad) = actions.iter().find(|&&a| a >= n) {
            return Err(Error::Invalid(format!("action {bad} outside [0, {n})")));
        }
        let inv = T::one() / T::from_usize(rows).unwrap();
        let mut probs = vec![T::zero(); rows * n];
        let mut coef = vec![T::zero(); rows];
        let mut total = T::zero();
        for i in 0..rows {
            let row = &v.data()[i * n..(i + 1) * n];
            let lse = softmax_row(row, &mut probs[i * n..(i + 1) * n]);
            let ratio = (row[actions[i]] - lse - old_logp[i]).exp();
            let s1 = ratio * advantages[i];
            let s2 = ratio.max(T::one() - clip).min(T::one() + clip) * advantages[i];
            if s1 <= s2 {
                total -= s1;
                coef[i] = -s1 * inv;
            } else {
                total -= s2;
            }
        }
        let value = Array::scalar(total * inv);
        Ok(self.push(value, Op::Surrogate { logits, actions: actions.to_vec(), probs, coef }))
    }

    /// Mean categorical entropy of the rows of `logits`.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 {
            return Err(shape_err("entropy", format!("logits must be 2-D, got {:?}", v.shape())));
        }
        let (rows, n) = (v.dim(0), v.dim(1));
        let mut probs = vec![T::zero(); rows * n];
        let mut logp = vec![T::zero(); rows * n];
        let mut ent = vec![T::zero(); rows];
        for i in 0..rows {
            let row = &v.data()[i * n..(i + 1) * n];
            let lse = softmax_row(row, &mut probs[i * n..(i + 1) * n]);
            for j in 0..n {
                logp[i * n + j] = row[j] - lse;
                ent[i] -= probs[i * n + j] * logp[i * n + j];
            }
        }
        let mean = ent.iter().copied().sum::<T>() / T::from_usize(rows).unwrap();
        Ok(self.push(Array::scalar(mean), Op::Entropy { logits, probs, logp, ent }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let v = self.value(pred);
        if v.len() != target.len() {
            return Err(shape_err("mse", format!("{} predictions vs {} targets", v.len(), target.len())));
        }
        let s: T = v.data().iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let value = Array::scalar(s / T::from_usize(target.len()).unwrap());
        Ok(self.push(value, Op::Mse { pred, target: target.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x))
    }

    /// `sum_k c_k * x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            let a = self.value(v);
            if a.len() != 1 {
                return Err(shape_err("weighted_sum", format!("term has shape {:?}, expected a scalar", a.shape())));
            }
            s += c * a.item();
        }
        Ok(self.push(Array::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Populate gradients of `loss` for every parameter and constant leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.spent {
            return Err(Error::BackwardReused);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        let loss_shape = lv.shape().to_vec();
        self.spent = true;
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(&loss_shape, T::one()));
        let mut leaves: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, g, &mut grads, &mut leaves)?;
        }
        let params = self
            .params
            .ids()
            .map(|id| match self.param_vars[id.0].and_then(|v| leaves[v.0].take()) {
                Some(g) => g,
                None => Array::zeros(self.params.value(id).shape()),
            })
            .collect();
        Ok(Gradients { params, leaves })
    }

    fn adjoint(
        &self,
        i: usize,
        g: Array<T>,
        grads: &mut [Option<Array<T>>],
        leaves: &mut [Option<Array<T>>],
    ) -> Result<()> {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => leaves[i] = Some(g),
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.batch * geom.positions();
                let p = geom.positions();
                let mut dtmp = vec![T::zero(); rows * geom.cout];
                let mut db = vec![T::zero(); geom.cout];
                for bi in 0..geom.batch {
                    for co in 0..geom.cout {
                        let src = &g.data()[(bi * geom.cout + co) * p..(bi * geom.cout + co + 1) * p];
                        for (pi, &v) in src.iter().enumerate() {
                            dtmp[(bi * p + pi) * geom.cout + co] = v;
                            db[co] += v;
                        }
                    }
                }
                let mut dw = vec![T::zero(); geom.cout * geom.patch()];
                gemm(geom.cout, rows, geom.patch(), &dtmp, true, cols, false, &mut dw, false);
                let mut dcols = vec![T::zero(); rows * geom.patch()];
                gemm(rows, geom.cout, geom.patch(), &dtmp, false, self.value(*w).data(), false, &mut dcols, false);
                let dx = col2im(&dcols, geom);
                acc(grads, *x, Array::new(self.shape(*x), dx)?);
                acc(grads, *w, Array::new(self.shape(*w), dw)?);
                acc(grads, *b, Array::new(self.shape(*b), db)?);
            }
            Op::Linear { x, w, b } => {
                let (batch, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                let mut dx = vec![T::zero(); batch * n];
                gemm(batch, m, n, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); m * n];
                gemm(m, batch, n, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                let mut db = vec![T::zero(); m];
                for row in g.data().chunks(m) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(grads, *x, Array::new(&[batch, n], dx)?);
                acc(grads, *w, Array::new(&[m, n], dw)?);
                acc(grads, *b, Array::new(&[m], db)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = zip_map(&g, xv, |gv, v| if v > T::zero() { gv } else { T::zero() });
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = out.unwrap();
                let d = zip_map(&g, y, |gv, s| gv * s * (T::one() - s));
                acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = out.unwrap();
                let d = zip_map(&g, y, |gv, t| gv * (T::one() - t * t));
                acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = zip_map(&g, xv, |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *x, d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_map(&g, self.value(*b), |gv, v| gv * v);
                let db = zip_map(&g, self.value(*a), |gv, v| gv * v);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                acc(grads, *x, g.map(|v| v * s));
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let blk = ps[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + blk]);
                    }
                    offset += blk;
                    acc(grads, p, Array::new(&ps, d)?);
                }
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                acc(grads, *x, g.into_shape(&s)?);
            }
            Op::SelectRows { x, rows } => {
                let s = self.shape(*x).to_vec();
                let w = g.len() / rows.len();
                let mut d = Array::zeros(&s);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        d.data_mut()[r * w + j] += g.data()[k * w + j];
                    }
                }
                acc(grads, *x, d);
            }
            Op::RowScale { x, factors } => {
                let w = g.len() / factors.len();
                let data = g.data().iter().enumerate().map(|(i, &v)| v * factors[i / w]).collect();
                acc(grads, *x, Array::new(g.shape(), data)?);
            }
            Op::Gru { gx, h, w, b, r, z, n, hn } => {
                let (batch, m) = (self.shape(*h)[0], self.shape(*h)[1]);
                let hd = self.value(*h).data();
                let gd = g.data();
                let mut dgx = vec![T::zero(); batch * 3 * m];
                let mut dgh = vec![T::zero(); batch * 3 * m];
                let mut dh = vec![T::zero(); batch * m];
                for bi in 0..batch {
                    for j in 0..m {
                        let i = bi * m + j;
                        let dn = gd[i] * (T::one() - z[i]);
                        let dz = gd[i] * (hd[i] - n[i]);
                        dh[i] = gd[i] * z[i];
                        let dn_pre = dn * (T::one() - n[i] * n[i]);
                        let dr_pre = dn_pre * hn[i] * r[i] * (T::one() - r[i]);
                        let dz_pre = dz * z[i] * (T::one() - z[i]);
                        let base = bi * 3 * m;
                        dgx[base + j] = dr_pre;
                        dgx[base + m + j] = dz_pre;
                        dgx[base + 2 * m + j] = dn_pre;
                        dgh[base + j] = dr_pre;
                        dgh[base + m + j] = dz_pre;
                        dgh[base + 2 * m + j] = dn_pre * r[i];
                    }
                }
                let mut dw = vec![T::zero(); 3 * m * m];
                gemm(3 * m, batch, m, &dgh, true, hd, false, &mut dw, false);
                let mut db = vec![T::zero(); 3 * m];
                for row in dgh.chunks(3 * m) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                gemm(batch, 3 * m, m, &dgh, false, self.value(*w).data(), false, &mut dh, true);
                acc(grads, *gx, Array::new(&[batch, 3 * m], dgx)?);
                acc(grads, *h, Array::new(&[batch, m], dh)?);
                acc(grads, *w, Array::new(&[3 * m, m], dw)?);
                acc(grads, *b, Array::new(&[3 * m], db)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits).to_vec();
                let n = s[1];
                let scale = g.item() / T::from_usize(targets.len()).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= scale;
                }
                acc(grads, *logits, Array::new(&s, d)?);
            }
            Op::Surrogate { logits, actions, probs, coef } => {
                let s = self.shape(*logits).to_vec();
                let n = s[1];
                let gv = g.item();
                let mut d = vec![T::zero(); probs.len()];
                for (i, &a) in actions.iter().enumerate() {
                    let c = coef[i] * gv;
                    for j in 0..n {
                        d[i * n + j] = -c * probs[i * n + j];
                    }
                    d[i * n + a] += c;
                }
                acc(grads, *logits, Array::new(&s, d)?);
            }
            Op::Entropy { logits, probs, logp, ent } => {
                let s = self.shape(*logits).to_vec();
                let n = s[1];
                let scale = g.item() / T::from_usize(ent.len()).unwrap();
                let d = (0..probs.len())
                    .map(|k| -probs[k] * (logp[k] + ent[k / n]) * scale)
                    .collect();
                acc(grads, *logits, Array::new(&s, d)?);
            }
            Op::Mse { pred, target } => {
                let s = self.shape(*pred).to_vec();
                let scale = T::from_f64_lossy(2.0) * g.item() / T::from_usize(target.len()).unwrap();
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                acc(grads, *pred, Array::new(&s, d)?);
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                acc(grads, *x, Array::full(&s, g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let n = T::from_usize(self.value(*x).len()).unwrap();
                acc(grads, *x, Array::full(&s, g.item() / n));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(grads, v, Array::scalar(c * g.item()));
                }
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(g: &Array<T>, other: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::new(g.shape(), data).expect("gradient shape matches its node")
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let mut cols = vec![T::zero(); g.batch * g.positions() * kk];
    for bi in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (bi * g.ho + oy) * g.wo + ox;
                let dst = &mut cols[row * kk..(row + 1) * kk];
                for ci in 0..g.cin {
                    let plane = &x[(bi * g.cin + ci) * g.h * g.w..(bi * g.cin + ci + 1) * g.h * g.w];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[(ci * g.k + ky) * g.k + kx] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for bi in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (bi * g.ho + oy) * g.wo + ox;
                let src = &cols[row * kk..(row + 1) * kk];
                for ci in 0..g.cin {
                    let base = (bi * g.cin + ci) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy as usize * g.w + ix as usize] += src[(ci * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[M] -> [M, n]` one-hot rows.
pub fn one_hot<T: Scalar>(indices: &[usize], n: usize) -> Result<Array<T>> {
    if let Some(&bad) = indices.iter().find(|&&a| a >= n) {
        return Err(Error::Invalid(format!("one_hot index {bad} outside [0, {n})")));
    }
    let mut out = Array::zeros(&[indices.len(), n]);
    for (i, &a) in indices.iter().enumerate() {
        out.data_mut()[i * n + a] = T::one();
    }
    Ok(out)
}

/// Log-softmax of each row, as plain values (no record).
pub fn log_softmax_rows<T: Scalar>(logits: &Array<T>) -> Array<T> {
    let n = logits.dim(logits.ndim() - 1);
    let mut out = logits.clone();
    let mut probs = vec![T::zero(); n];
    for row in out.data_mut().chunks_mut(n) {
        let lse = softmax_row(row, &mut probs);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}
