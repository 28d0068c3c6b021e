use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Target value that excludes a row from [`Tape::cross_entropy`].
pub const IGNORE_TARGET: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, s: T },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    Gelu { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { x: usize, mask: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T>, count: usize },
    Sum { x: usize },
    Attention(Box<AttentionCache<T>>),
}

struct AttentionCache<T> {
    qkv: usize,
    batch: usize,
    seq: usize,
    heads: usize,
    /// Post-softmax weights, `[batch, heads, seq, seq]`.
    probs: Vec<T>,
    /// Scaled keep-mask applied to `probs`, when dropout was active.
    mask: Option<Vec<T>>,
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Single-owner record of a forward computation.
///
/// Nodes are appended in evaluation order, so the reverse of insertion order
/// is a reverse topological order and [`Tape::backward`] visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn take_or_zeros<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> Vec<T> {
    slot.take().unwrap_or_else(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], idx: usize, contrib: Vec<T>) {
    let node = &mut nodes[idx];
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(g, c)| *g += c),
        None => node.grad = Some(contrib),
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    // -- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2("add_row", x)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(r, &b)| *r += b);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * s);
        self.push(value, Op::Scale { x: x.0, s }, &[x.0])
    }

    /// Normalizes each row of an `m x n` matrix, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let nf = T::lit(n as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + bt[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xs[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (xs[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, outer, len, inner }, &[x.0]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = Tensor::from_fn(self.shape(x).to_vec(), |i| gelu_fwd(self.value(x).data()[i]));
        self.push(value, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Gathers rows of a `vocab x width` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: rows });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Inverted dropout. With `train == false` (or `rate == 0`) this returns
    /// `x` itself and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), rate, rng);
        let value = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * mask[i]);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Mean cross-entropy (nats) of `logits` rows against class `targets`;
    /// rows whose target is [`IGNORE_TARGET`] are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} logits for {} targets", self.shape(logits), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_TARGET && t >= c) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: c });
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); m * c];
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..m {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            if targets[r] != IGNORE_TARGET {
                total += log_z - row[targets[r]];
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::lit(count as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0])
    }

    /// Causal multi-head self-attention over packed projections.
    ///
    /// `qkv` is `[batch * seq, 3 * width]` with queries, keys and values in
    /// consecutive `width`-column blocks; heads split each block evenly. The
    /// result is `[batch * seq, width]`. Dropout, when active, is applied to
    /// the attention weights.
    pub fn causal_attention<R: Rng>(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (rows, cols) = self.dims2("causal_attention", qkv)?;
        if rows != batch * seq || cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{:?} for batch {batch}, seq {seq}, heads {heads}", self.shape(qkv)),
            ));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let width = cols / 3;
        let hd = width / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let src = self.value(qkv).data();
        let tt = seq * seq;
        let mut probs = vec![T::zero(); batch * heads * tt];
        let mut out = vec![T::zero(); rows * width];
        let mut q = vec![T::zero(); seq * hd];
        let mut k = vec![T::zero(); seq * hd];
        let mut v = vec![T::zero(); seq * hd];
        let mut o = vec![T::zero(); seq * hd];
        let mask = (train && dropout > 0.0).then(|| dropout_mask(probs.len(), dropout, rng));
        let mut weights = vec![T::zero(); tt];
        for bi in 0..batch {
            for h in 0..heads {
                gather_head(src, cols, bi * seq, seq, h * hd, hd, &mut q);
                gather_head(src, cols, bi * seq, seq, width + h * hd, hd, &mut k);
                gather_head(src, cols, bi * seq, seq, 2 * width + h * hd, hd, &mut v);
                let p = &mut probs[(bi * heads + h) * tt..][..tt];
                gemm(seq, hd, seq, &q, false, &k, true, T::zero(), p);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let max = row[..=i].iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                    let mut z = T::zero();
                    for s in row[..=i].iter_mut() {
                        *s = (*s * scale - max).exp();
                        z += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s = *s / z;
                    }
                    row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
                }
                let used: &[T] = match &mask {
                    Some(mk) => {
                        let mk = &mk[(bi * heads + h) * tt..][..tt];
                        weights.iter_mut().zip(p.iter().zip(mk)).for_each(|(w, (&p, &m))| *w = p * m);
                        &weights
                    }
                    None => p,
                };
                gemm(seq, seq, hd, used, false, &v, false, T::zero(), &mut o);
                scatter_head(&o, &mut out, width, bi * seq, seq, h * hd, hd);
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionCache {
                qkv: qkv.0,
                batch,
                seq,
                heads,
                probs,
                mask,
            })),
            &[qkv.0],
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Accumulates d`loss`/d(node) into every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("target must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else { continue };
            backprop(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn dropout_mask<T: Real, R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn gather_head<T: Real>(src: &[T], cols: usize, row0: usize, seq: usize, col0: usize, hd: usize, dst: &mut [T]) {
    for t in 0..seq {
        let s = (row0 + t) * cols + col0;
        dst[t * hd..(t + 1) * hd].copy_from_slice(&src[s..s + hd]);
    }
}

fn scatter_head<T: Real>(src: &[T], dst: &mut [T], cols: usize, row0: usize, seq: usize, col0: usize, hd: usize) {
    for t in 0..seq {
        let d = (row0 + t) * cols + col0;
        dst[d..d + hd].copy_from_slice(&src[t * hd..(t + 1) * hd]);
    }
}

fn add_head<T: Real>(src: &[T], dst: &mut [T], cols: usize, row0: usize, seq: usize, col0: usize, hd: usize) {
    for t in 0..seq {
        let d = (row0 + t) * cols + col0;
        dst[d..d + hd].iter_mut().zip(&src[t * hd..(t + 1) * hd]).for_each(|(d, &s)| *d += s);
    }
}

fn backprop<T: Real>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    let needs = |nodes: &[Node<T>], i: usize| nodes[i].needs_grad;
    match op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if needs(nodes, a) {
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, g, false, nodes[b].value.data(), true, T::zero(), &mut da);
                accumulate(nodes, a, da);
            }
            if needs(nodes, b) {
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, nodes[a].value.data(), true, g, false, T::zero(), &mut db);
                accumulate(nodes, b, db);
            }
        }
        &Op::Add { a, b } => {
            if needs(nodes, a) {
                accumulate(nodes, a, g.to_vec());
            }
            if needs(nodes, b) {
                accumulate(nodes, b, g.to_vec());
            }
        }
        &Op::Mul { a, b } => {
            if needs(nodes, a) {
                let da: Vec<T> = g.iter().zip(nodes[b].value.data()).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, a, da);
            }
            if needs(nodes, b) {
                let db: Vec<T> = g.iter().zip(nodes[a].value.data()).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, b, db);
            }
        }
        &Op::AddRow { x, bias } => {
            if needs(nodes, x) {
                accumulate(nodes, x, g.to_vec());
            }
            if needs(nodes, bias) {
                let n = nodes[bias].value.len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                accumulate(nodes, bias, db);
            }
        }
        &Op::Scale { x, s } => {
            if needs(nodes, x) {
                accumulate(nodes, x, g.iter().map(|&v| v * s).collect());
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let n = nodes[gamma].value.len();
            let m = rstd.len();
            if needs(nodes, gamma) || needs(nodes, beta) {
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        dg[c] += g[r * n + c] * xhat[r * n + c];
                        db[c] += g[r * n + c];
                    }
                }
                if needs(nodes, gamma) {
                    accumulate(nodes, gamma, dg);
                }
                if needs(nodes, beta) {
                    accumulate(nodes, beta, db);
                }
            }
            if needs(nodes, x) {
                let gm = nodes[gamma].value.data();
                let nf = T::lit(n as f64);
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..n {
                        let dh = g[r * n + c] * gm[c];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * n + c];
                    }
                    for c in 0..n {
                        let dh = g[r * n + c] * gm[c];
                        dx[r * n + c] = rstd[r] * (dh - sum_dh / nf - xhat[r * n + c] * sum_dh_h / nf);
                    }
                }
                accumulate(nodes, x, dx);
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            if needs(nodes, x) {
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(nodes, x, dx);
            }
        }
        &Op::Gelu { x } => {
            if needs(nodes, x) {
                let xs = nodes[x].value.data();
                let dx = xs.iter().zip(g).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
                accumulate(nodes, x, dx);
            }
        }
        Op::Embedding { table, ids } => {
            let table = *table;
            if needs(nodes, table) {
                let (rows, width) = nodes[table].value.dims2().expect("rank 2 table");
                let mut dt = take_or_zeros(&mut nodes[table].grad, rows * width);
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(d, &v)| *d += v);
                }
                nodes[table].grad = Some(dt);
            }
        }
        Op::Dropout { x, mask } => {
            if needs(nodes, *x) {
                accumulate(nodes, *x, g.iter().zip(mask).map(|(&a, &b)| a * b).collect());
            }
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            let logits = *logits;
            if needs(nodes, logits) && *count > 0 {
                let c = probs.len() / targets.len();
                let scale = g[0] / T::lit(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_TARGET {
                        continue;
                    }
                    for j in 0..c {
                        dl[r * c + j] = probs[r * c + j] * scale;
                    }
                    dl[r * c + t] -= scale;
                }
                accumulate(nodes, logits, dl);
            }
        }
        &Op::Sum { x } => {
            if needs(nodes, x) {
                let n = nodes[x].value.len();
                accumulate(nodes, x, vec![g[0]; n]);
            }
        }
        Op::Attention(cache) => attention_backward(nodes, cache, g),
    }
}

fn attention_backward<T: Real>(nodes: &mut [Node<T>], cache: &AttentionCache<T>, g: &[T]) {
    let AttentionCache {
        qkv,
        batch,
        seq,
        heads,
        probs,
        mask,
    } = cache;
    let (qkv, batch, seq, heads) = (*qkv, *batch, *seq, *heads);
    if !nodes[qkv].needs_grad {
        return;
    }
    let (rows, cols) = nodes[qkv].value.dims2().expect("rank 2 qkv");
    let width = cols / 3;
    let hd = width / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let src = nodes[qkv].value.data();
    let tt = seq * seq;
    let mut dqkv = vec![T::zero(); rows * cols];
    let (mut q, mut k, mut v, mut go) = (vec![T::zero(); seq * hd], vec![T::zero(); seq * hd], vec![T::zero(); seq * hd], vec![T::zero(); seq * hd]);
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); seq * hd], vec![T::zero(); seq * hd], vec![T::zero(); seq * hd]);
    let mut weights = vec![T::zero(); tt];
    let mut dp = vec![T::zero(); tt];
    for bi in 0..batch {
        for h in 0..heads {
            let base = (bi * heads + h) * tt;
            let p = &probs[base..base + tt];
            gather_head(src, cols, bi * seq, seq, h * hd, hd, &mut q);
            gather_head(src, cols, bi * seq, seq, width + h * hd, hd, &mut k);
            gather_head(src, cols, bi * seq, seq, 2 * width + h * hd, hd, &mut v);
            gather_head(g, width, bi * seq, seq, h * hd, hd, &mut go);
            let used: &[T] = match mask {
                Some(mk) => {
                    let mk = &mk[base..base + tt];
                    weights.iter_mut().zip(p.iter().zip(mk)).for_each(|(w, (&p, &m))| *w = p * m);
                    &weights
                }
                None => p,
            };
            // dV = W^T dO ; dW = dO V^T
            gemm(seq, seq, hd, used, true, &go, false, T::zero(), &mut dv);
            gemm(seq, hd, seq, &go, false, &v, true, T::zero(), &mut dp);
            if let Some(mk) = mask {
                dp.iter_mut().zip(&mk[base..base + tt]).for_each(|(d, &m)| *d *= m);
            }
            // softmax backward on the causal rows, folded with the 1/sqrt(hd) scale
            for i in 0..seq {
                let row_p = &p[i * seq..(i + 1) * seq];
                let row_d = &mut dp[i * seq..(i + 1) * seq];
                let dot: T = (0..=i).map(|j| row_p[j] * row_d[j]).sum();
                for j in 0..=i {
                    row_d[j] = row_p[j] * (row_d[j] - dot) * scale;
                }
                row_d[i + 1..].iter_mut().for_each(|d| *d = T::zero());
            }
            gemm(seq, seq, hd, &dp, false, &k, false, T::zero(), &mut dq);
            gemm(seq, seq, hd, &dp, true, &q, false, T::zero(), &mut dk);
            add_head(&dq, &mut dqkv, cols, bi * seq, seq, h * hd, hd);
            add_head(&dk, &mut dqkv, cols, bi * seq, seq, width + h * hd, hd);
            add_head(&dv, &mut dqkv, cols, bi * seq, seq, 2 * width + h * hd, hd);
        }
    }
    accumulate(nodes, qkv, dqkv);
}
