use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        eps: T,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed primitives.
///
/// A tape belongs to one thread while it is built and replayed. Distinct
/// tapes share nothing and can run concurrently.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Moves the gradient of `v` into `t.grad`, adding to any existing grad.
    pub fn accumulate_into(&mut self, v: Var, t: &mut Tensor<T>) {
        if let Some(g) = self.take(v) {
            match &mut t.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += *x),
                None => t.grad = Some(g),
            }
        }
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += *b),
        None => *dst = Some(src.to_vec()),
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Stable softmax of one row in place.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// adjoints are propagated to it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(format!(
                "constant shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` where `b` is stored `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (b0, b1) = self.matrix_dims(b)?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(shape_err(format!(
                "matmul inner dimensions disagree: [{m}x{k}] · [{kb}x{n}]"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, trans_b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every row of `x[...×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.node(bias).value.len() != n {
            return Err(shape_err(format!(
                "bias of {} values for rows of width {n}",
                self.node(bias).value.len()
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| *v + *c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, c })
    }

    /// Multiplies by a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by expects a one-element scale"));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ScaleBy { x, s }))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| gelu_scalar(*v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x))
    }

    /// Normalizes every row over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(format!("layer_norm params must have width {d}")));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let xs = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + bt[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        if n > 0 {
            out.chunks_mut(n).for_each(softmax_in_place);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Softmax(x))
    }

    /// Row `i` of the output is row `ids[i]` of `table`. The adjoint
    /// scatter-adds, so repeated ids accumulate.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("id {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks matrices with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let mut d = None;
        let mut rows = 0;
        for &p in parts {
            let (r, w) = self.matrix_dims(p)?;
            if *d.get_or_insert(w) != w {
                return Err(shape_err("concat_rows width mismatch"));
            }
            rows += r;
        }
        let d = d.unwrap();
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, d], out, rg, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    /// Inverted dropout with an explicit keep mask (`true` keeps).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(shape_err("dropout mask length"));
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { scale } else { T::zero() })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Dropout { x, mask }))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]` with heads laid out as contiguous
    /// column blocks of width `d / heads`. Position `i` attends to `j ≤ i`
    /// within its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q)?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(shape_err("attention q/k/v shapes differ"));
        }
        if rows != batch * seq {
            return Err(shape_err(format!("attention rows {rows} != {batch}x{seq}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                // SAFETY: head block [seq × dh] at `off` with row stride d lies in q/k.
                unsafe {
                    T::gemm_raw(
                        seq,
                        dh,
                        seq,
                        qv.as_ptr().add(off),
                        d as isize,
                        1,
                        kv.as_ptr().add(off),
                        1,
                        d as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row[..=i].iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
                }
                // SAFETY: output head block mirrors the input layout.
                unsafe {
                    T::gemm_raw(
                        seq,
                        seq,
                        dh,
                        p.as_ptr(),
                        seq as isize,
                        1,
                        vv.as_ptr().add(off),
                        d as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean over targeted rows of the label-smoothed cross-entropy
    /// `-Σ_i q(i)·log softmax(logits)_i`, with
    /// `q = (1-eps)·onehot(target) + eps/V`. Rows whose target is `None`
    /// contribute nothing.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        eps: f64,
    ) -> Result<Var> {
        let (rows, vocab) = self.matrix_dims(logits)?;
        if targets.len() != rows {
            return Err(shape_err(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Contract(format!(
                "label smoothing {eps} outside [0,1)"
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!(
                "target {bad} outside vocabulary {vocab}"
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("loss over zero target positions".into()));
        }
        let eps_t = T::lit(eps);
        let uniform = eps_t / T::from_usize(vocab).unwrap();
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(t) = *tgt else { continue };
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            let mut loss = T::zero();
            for (i, &x) in row.iter().enumerate() {
                let logp = x - lse;
                let q = if i == t {
                    T::one() - eps_t + uniform
                } else {
                    uniform
                };
                loss -= q * logp;
                probs[r * vocab + i] = logp.exp();
            }
            total += loss;
        }
        let mean = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps: eps_t,
                probs,
                count,
            },
        ))
    }

    /// Replays the tape in reverse from a scalar `loss`, returning adjoints
    /// for every node that requires a gradient. Fan-out accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if self.rg(*a) {
                    // dA = G · Bᵀ (or G · B when b is stored transposed)
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(*b), !trans_b, &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // b stored [n×k]: dB = Gᵀ · A
                        gemm(n, m, k, g, true, self.value(*a), false, &mut db, false);
                    } else {
                        gemm(k, m, n, self.value(*a), true, g, false, &mut db, false);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b)).map(|(x, y)| *x * *y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.rg(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a)).map(|(x, y)| *x * *y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddBias { x, bias } => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.rg(*bias) {
                    let n = last_dim(&node.shape);
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Scale { x, c } => {
                let d: Vec<T> = g.iter().map(|v| *v * *c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s)[0];
                if self.rg(*x) {
                    let d: Vec<T> = g.iter().map(|v| *v * c).collect();
                    add_into(&mut grads[x.0], &d);
                }
                if self.rg(*s) {
                    let ds = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(a, b)| *a * *b)
                        .sum::<T>();
                    add_into(&mut grads[s.0], &[ds]);
                }
            }
            Op::Gelu(x) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, xv)| *gv * gelu_grad(*xv))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = last_dim(&node.shape);
                let dn = T::from_usize(d).unwrap();
                let gm = self.value(*gamma);
                if self.rg(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += grow[i] * hrow[i];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, b)| *a += *b);
                    }
                    add_into(&mut grads[beta.0], &db);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((grow, hrow), dxrow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for i in 0..d {
                            let dh = grow[i] * gm[i];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[i];
                        }
                        let is = inv_std[r];
                        for i in 0..d {
                            let dh = grow[i] * gm[i];
                            dxrow[i] = is * (dh - sum_dh / dn - hrow[i] * sum_dh_h / dn);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(&node.shape);
                let mut dx = vec![T::zero(); g.len()];
                for ((grow, yrow), dxrow) in
                    g.chunks(n).zip(node.value.chunks(n)).zip(dx.chunks_mut(n))
                {
                    let dot = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum::<T>();
                    for i in 0..n {
                        dxrow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                let slot =
                    grads[table.0].get_or_insert_with(|| vec![T::zero(); self.value(*table).len()]);
                for (r, &i) in ids.iter().enumerate() {
                    slot[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += *b);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.rg(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / T::from_usize(n.max(1)).unwrap(); n];
                add_into(&mut grads[x.0], &d);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<T> = g.iter().zip(mask).map(|(a, m)| *a * *m).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads),
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(*count).unwrap();
                let uniform = *eps / T::from_usize(vocab).unwrap();
                let mut dl = vec![T::zero(); probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(t) = *tgt else { continue };
                    for i in 0..vocab {
                        let q = if i == t {
                            T::one() - *eps + uniform
                        } else {
                            uniform
                        };
                        dl[r * vocab + i] = (probs[r * vocab + i] - q) * scale;
                    }
                }
                add_into(&mut grads[logits.0], &dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // SAFETY (all blocks below): head slices [seq × dh] with row
                // stride d stay inside buffers of batch·seq·d elements, and
                // p/dp are seq × seq.
                unsafe {
                    // dV = Pᵀ · dO
                    T::gemm_raw(
                        seq,
                        seq,
                        dh,
                        p.as_ptr(),
                        1,
                        seq as isize,
                        g.as_ptr().add(off),
                        d as isize,
                        1,
                        T::zero(),
                        dv.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                    // dP = dO · Vᵀ
                    T::gemm_raw(
                        seq,
                        dh,
                        seq,
                        g.as_ptr().add(off),
                        d as isize,
                        1,
                        vv.as_ptr().add(off),
                        1,
                        d as isize,
                        T::zero(),
                        dp.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let drow = &mut dp[i * seq..(i + 1) * seq];
                    let dot = prow[..=i]
                        .iter()
                        .zip(&drow[..=i])
                        .map(|(a, b)| *a * *b)
                        .sum::<T>();
                    for j in 0..seq {
                        drow[j] = if j <= i {
                            prow[j] * (drow[j] - dot) * scale
                        } else {
                            T::zero()
                        };
                    }
                }
                unsafe {
                    // dQ = dS · K
                    T::gemm_raw(
                        seq,
                        seq,
                        dh,
                        dp.as_ptr(),
                        seq as isize,
                        1,
                        kv.as_ptr().add(off),
                        d as isize,
                        1,
                        T::zero(),
                        dq.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                    // dK = dSᵀ · Q
                    T::gemm_raw(
                        seq,
                        seq,
                        dh,
                        dp.as_ptr(),
                        1,
                        seq as isize,
                        qv.as_ptr().add(off),
                        d as isize,
                        1,
                        T::zero(),
                        dk.as_mut_ptr().add(off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        if self.rg(q) {
            add_into(&mut grads[q.0], &dq);
        }
        if self.rg(k) {
            add_into(&mut grads[k.0], &dk);
        }
        if self.rg(v) {
            add_into(&mut grads[v.0], &dv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape<f64>, shape: [usize; 2], data: &[f64], rg: bool) -> Var {
        let mut t = Tensor::from_vec(shape, data.to_vec()).unwrap();
        t.requires_grad = rg;
        tape.leaf(&t)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = mat(&mut tape, [2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let ones = mat(&mut tape, [2, 1], &[1.0, 1.0], false);
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);

        let eye = tape.leaf(&Tensor::eye(3));
        let b = mat(&mut tape, [3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));

        let z = tape.leaf(&Tensor::zeros([3, 3]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).iter().all(|v| *v == 0.0));

        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, [1, 3], &[0.0, 1.0, 20.0], false);
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        // 0.5·(1+tanh(√(2/π)·1.044715)) = 0.841192
        assert!((v[1] - 0.841_192).abs() < 1e-5, "{}", v[1]);
        assert!((v[2] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = mat(&mut tape, [1, 2], &[1.0, 1.0], false);
        let zeros = mat(&mut tape, [1, 2], &[0.0, 0.0], false);

        let c = mat(&mut tape, [1, 2], &[5.0, 5.0], false);
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);

        let x = mat(&mut tape, [1, 2], &[1.0, -1.0], false);
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-9);

        let beta = mat(&mut tape, [1, 2], &[0.3, -0.7], false);
        let x = mat(&mut tape, [1, 2], &[4.0, -9.0], false);
        let y = tape.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.3, -0.7]);

        assert!(matches!(
            tape.layer_norm(x, ones, zeros, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, [2, 2], &[0.0, 3f64.ln(), 7.0, 7.0], false);
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);

        let shifted = mat(
            &mut tape,
            [2, 2],
            &[100.0, 100.0 + 3f64.ln(), -3.0, -3.0],
            false,
        );
        let y2 = tape.softmax_rows(shifted);
        for (a, b) in tape.value(y).iter().zip(tape.value(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_examples() {
        let mut tape = Tape::new();
        let table = mat(&mut tape, [3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let rows = tape.embedding_gather(table, &[0, 0]).unwrap();
        assert_eq!(tape.value(rows), &[1.0, 2.0, 1.0, 2.0]);

        let empty = tape.embedding_gather(table, &[]).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);

        assert!(matches!(
            tape.embedding_gather(table, &[3]),
            Err(Error::Index(_))
        ));

        // gradient of the sum counts occurrences per row
        let mut tape = Tape::new();
        let table = mat(&mut tape, [3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let rows = tape.embedding_gather(table, &[2, 0, 2, 2]).unwrap();
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, [2, 2], &[1.0, -2.0, 0.5, 3.0], true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);

        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = mat(&mut tape, [2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let x = mat(&mut tape, [1, 2], &[1.0, 1.0], true);
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn smoothed_ce_uniform_logits_is_ln_v() {
        let mut tape = Tape::new();
        let logits = mat(&mut tape, [2, 7], &[0.3; 14], false);
        for eps in [0.0, 0.075, 0.5] {
            let l = tape
                .smoothed_cross_entropy(logits, &[Some(3), Some(0)], eps)
                .unwrap();
            assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-12);
        }
        let l = tape
            .smoothed_cross_entropy(logits, &[None, Some(6)], 0.1)
            .unwrap();
        assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-12);
        assert!(tape
            .smoothed_cross_entropy(logits, &[None, None], 0.1)
            .is_err());
    }
}
