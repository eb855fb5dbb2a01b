//! The autodiff tape: primitives execute eagerly and record themselves; a
//! reverse sweep accumulates exact gradients of a scalar loss into every
//! reachable parameter.
//!
//! A [`Session`] lives for one forward/backward pass. Dropout noise comes
//! from an RNG owned by the session, so a fixed seed makes the whole pass a
//! pure function of its inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Additive pre-softmax penalty that zeroes masked attention weights.
const CAUSAL_MASK_VALUE: f64 = -1e9;

enum Op<S> {
    Leaf { param: Option<usize> },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
    AddRows(Var, Var),
    Embedding { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, rstd: Vec<S> },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<S> },
    CausalMask(Var),
    GatherLast { x: Var, indices: Vec<usize> },
    GatherRows { x: Var, indices: Vec<usize> },
    Exp(Var),
    PowConst(Var, f64),
    SumLast(Var),
    MeanAll(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// One forward/backward pass over a recorded computation.
pub struct Session<S> {
    nodes: Vec<Node<S>>,
    train: bool,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, context: String) -> NnError {
    NnError::Shape { op, context }
}

impl<S: Scalar> Session<S> {
    /// Training-mode session; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        Session {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Evaluation-mode session: dropout is the identity.
    pub fn eval() -> Self {
        Session {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Records a constant input (no gradient export).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    /// Records a parameter leaf; its gradient is exported on backward.
    pub fn param(&mut self, store: &ParamStore<S>, id: super::params::ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id.index()) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x + b` where `b` is a rank-1 bias broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (tx, tb) = (self.val(x), self.val(b));
        let d = match tx.last_dim() {
            Some(d) => d,
            None => return Err(shape_err("add_bias", "input is rank-0".into())),
        };
        if tb.shape() != [d] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match last dim {} of {:?}", tb.shape(), d, tx.shape()),
            ));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NnError> {
        let tx = self.val(x);
        let cs = S::from_f64(c);
        let data = tx.data().iter().map(|&v| v * cs).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NnError> {
        let tx = self.val(x);
        let cs = S::from_f64(c);
        let data = tx.data().iter().map(|&v| v + cs).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddScalar(x)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        mm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Batched `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bsz * m * n];
        for i in 0..bsz {
            mm_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(value, Op::Bmm(a, b)))
    }

    /// Batched `[b, m, d] x [b, n, d]^T -> [b, m, n]` (second factor
    /// transposed in place, as in attention scores `q k^T`).
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", format!("{sa:?} x {sb:?}^T")));
        }
        let (bsz, m, d, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![S::zero(); bsz * m * n];
        for i in 0..bsz {
            mm_nt(
                &ta.data()[i * m * d..(i + 1) * m * d],
                &tb.data()[i * n * d..(i + 1) * n * d],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                d,
                n,
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(value, Op::BmmNt(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let tx = self.val(x);
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({}) -> {:?} ({})", tx.shape(), tx.numel(), shape, numel),
            ));
        }
        let value = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, NnError> {
        let tx = self.val(x);
        let rank = tx.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err(
                "permute",
                format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| tx.shape()[a]).collect();
        let mut out = vec![S::zero(); tx.numel()];
        permute_copy(tx.data(), tx.shape(), axes, &mut out);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec())))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NnError> {
        let tx = self.val(x);
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    /// Joins two tensors along `axis`; all other extents must agree. Either
    /// side may be empty along `axis`.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, NnError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", format!("{sa:?} ++ {sb:?} along axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (la, lb) = (sa[axis], sb[axis]);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&tb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = la + lb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    /// `x + rows` where `rows` is broadcast over the leading batch axis:
    /// `[b, t, e] + [t, e]` (position embeddings).
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var, NnError> {
        let (tx, tr) = (self.val(x), self.val(rows));
        let (sx, sr) = (tx.shape(), tr.shape());
        if sx.len() != 3 || sr.len() != 2 || sx[1] != sr[0] || sx[2] != sr[1] {
            return Err(shape_err("add_rows", format!("{sx:?} + broadcast {sr:?}")));
        }
        let per = tr.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % per])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddRows(x, rows)))
    }

    /// Row lookup: `table[v, e]` gathered at `indices` -> `[len, e]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NnError> {
        let tt = self.val(table);
        let shape = tt.shape();
        if shape.len() != 2 {
            return Err(shape_err("embedding", format!("table must be rank-2, got {shape:?}")));
        }
        let (v, e) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("index {bad} out of {v} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&tt.data()[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![indices.len(), e], out)?;
        Ok(self.push(value, Op::Embedding { table, indices: indices.to_vec() }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine pair `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = match tx.last_dim() {
            Some(d) if d > 0 => d,
            _ => return Err(shape_err("layer_norm", format!("bad input shape {:?}", tx.shape()))),
        };
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs last dim {}", tg.shape(), tb.shape(), d),
            ));
        }
        let rows = tx.numel() / d;
        let eps = S::from_f64(eps);
        let dn = S::from_f64(d as f64);
        let mut out = vec![S::zero(); tx.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / dn;
            let rstd = S::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                out[r * d + j] = tg.data()[j] * xhat + tb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let d = match tx.last_dim() {
            Some(d) if d > 0 => d,
            _ => return Err(shape_err("softmax", format!("bad input shape {:?}", tx.shape()))),
        };
        let rows = tx.numel() / d;
        let mut out = vec![S::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            softmax_row(row, &mut out[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxLast(x)))
    }

    /// Log-softmax over the last axis, stable for large logits; never
    /// produces NaN on finite inputs.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let d = match tx.last_dim() {
            Some(d) if d > 0 => d,
            _ => return Err(shape_err("log_softmax", format!("bad input shape {:?}", tx.shape()))),
        };
        let rows = tx.numel() / d;
        let mut out = vec![S::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..d {
                out[r * d + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmaxLast(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Gelu(x)))
    }

    /// Inverted dropout: keeps with probability `1-p` scaled by `1/(1-p)` in
    /// training mode, identity in eval mode or at `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let n = self.val(x).numel();
        let mask: Vec<S> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let tx = self.val(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Adds a large negative constant above the diagonal of each `[t, t]`
    /// score matrix so position `i` can only attend to positions `<= i`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let shape = tx.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(shape_err("causal_mask", format!("want [b, t, t], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[1]);
        let neg = S::from_f64(CAUSAL_MASK_VALUE);
        let mut data = tx.data().to_vec();
        for bi in 0..b {
            for i in 0..t {
                for j in (i + 1)..t {
                    data[bi * t * t + i * t + j] += neg;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::CausalMask(x)))
    }

    /// Picks one entry per row along the last axis: `[r.., d]` -> `[r..]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var, NnError> {
        let tx = self.val(x);
        let d = match tx.last_dim() {
            Some(d) if d > 0 => d,
            _ => return Err(shape_err("gather_last", format!("bad input shape {:?}", tx.shape()))),
        };
        let rows = tx.numel() / d;
        if indices.len() != rows {
            return Err(shape_err(
                "gather_last",
                format!("{} indices for {} rows", indices.len(), rows),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(shape_err("gather_last", format!("index {bad} out of {d}")));
        }
        let out: Vec<S> = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| tx.data()[r * d + i])
            .collect();
        let shape = tx.shape()[..tx.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GatherLast { x, indices: indices.to_vec() }))
    }

    /// Picks one middle-axis row per leading index: `[r, k, d]` -> `[r, d]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NnError> {
        let tx = self.val(x);
        let shape = tx.shape();
        if shape.len() != 3 {
            return Err(shape_err("gather_rows", format!("want rank-3, got {shape:?}")));
        }
        let (r, k, d) = (shape[0], shape[1], shape[2]);
        if indices.len() != r {
            return Err(shape_err("gather_rows", format!("{} indices for {} rows", indices.len(), r)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {k}")));
        }
        let mut out = Vec::with_capacity(r * d);
        for (ri, &i) in indices.iter().enumerate() {
            out.extend_from_slice(&tx.data()[(ri * k + i) * d..(ri * k + i) * d + d]);
        }
        let value = Tensor::new(vec![r, d], out)?;
        Ok(self.push(value, Op::GatherRows { x, indices: indices.to_vec() }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let data = tx.data().iter().map(|&v| v.exp()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Exp(x)))
    }

    /// `x^e` for a constant exponent; `e` must be 0 or >= 1 so the
    /// derivative stays bounded at `x = 0`.
    pub fn pow_const(&mut self, x: Var, e: f64) -> Result<Var, NnError> {
        if e != 0.0 && e < 1.0 {
            return Err(shape_err("pow_const", format!("exponent {e} must be 0 or >= 1")));
        }
        let tx = self.val(x);
        let es = S::from_f64(e);
        let data = tx.data().iter().map(|&v| v.powf(es)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::PowConst(x, e)))
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let d = match tx.last_dim() {
            Some(d) if d > 0 => d,
            _ => return Err(shape_err("sum_last", format!("bad input shape {:?}", tx.shape()))),
        };
        let rows = tx.numel() / d;
        let out: Vec<S> = (0..rows)
            .map(|r| tx.data()[r * d..(r + 1) * d].iter().copied().sum())
            .collect();
        let shape = tx.shape()[..tx.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumLast(x)))
    }

    /// Mean of every entry; the canonical loss head.
    pub fn mean_all(&mut self, x: Var) -> Result<Var, NnError> {
        let tx = self.val(x);
        let n = tx.numel();
        if n == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let mean = tx.data().iter().copied().sum::<S>() / S::from_f64(n as f64);
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll(x)))
    }

    /// Reverse sweep from a scalar loss, accumulating parameter gradients
    /// into `store` (on top of whatever the buffers already hold).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<(), NnError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        store.accumulate_grad(*p, &g);
                    }
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *b, g.clone());
                    add_grad(&mut grads, *a, g);
                }
                Op::AddBias(x, b) => {
                    let d = self.val(*b).numel();
                    let mut db = Tensor::zeros(&[d]);
                    for (i, &v) in g.data().iter().enumerate() {
                        db.data_mut()[i % d] += v;
                    }
                    add_grad(&mut grads, *b, db);
                    add_grad(&mut grads, *x, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    add_grad(&mut grads, *b, neg);
                    add_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    )?;
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                    )?;
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Scale(x, c) => {
                    let cs = S::from_f64(*c);
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| v * cs).collect(),
                    )?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::AddScalar(x) => add_grad(&mut grads, *x, g),
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let mut da = Tensor::zeros(ta.shape());
                    mm_nt(g.data(), tb.data(), da.data_mut(), m, n, k);
                    let mut db = Tensor::zeros(tb.shape());
                    mm_tn(ta.data(), g.data(), db.data_mut(), m, k, n);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Bmm(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = tb.shape()[2];
                    let mut da = Tensor::zeros(ta.shape());
                    let mut db = Tensor::zeros(tb.shape());
                    for i in 0..bsz {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        mm_nt(
                            gs,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        mm_tn(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            gs,
                            &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::BmmNt(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (bsz, m, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = tb.shape()[1];
                    let mut da = Tensor::zeros(ta.shape());
                    let mut db = Tensor::zeros(tb.shape());
                    for i in 0..bsz {
                        let gs = &g.data()[i * m * n..(i + 1) * m * n];
                        // dA[m,d] = G[m,n] * B[n,d]
                        mm_nn(
                            gs,
                            &tb.data()[i * n * d..(i + 1) * n * d],
                            &mut da.data_mut()[i * m * d..(i + 1) * m * d],
                            m,
                            n,
                            d,
                        );
                        // dB[n,d] = G[m,n]^T * A[m,d]
                        mm_tn(
                            gs,
                            &ta.data()[i * m * d..(i + 1) * m * d],
                            &mut db.data_mut()[i * n * d..(i + 1) * n * d],
                            m,
                            n,
                            d,
                        );
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Reshape(x) => {
                    let dx = Tensor::new(self.val(*x).shape().to_vec(), g.data().to_vec())?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::Permute(x, axes) => {
                    let tx = self.val(*x);
                    let mut dx = Tensor::zeros(tx.shape());
                    permute_gather(g.data(), tx.shape(), axes, dx.data_mut());
                    add_grad(&mut grads, *x, dx);
                }
                Op::Narrow { x, axis, start } => {
                    let tx = self.val(*x);
                    let shape = tx.shape();
                    let len = g.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut dx = Tensor::zeros(shape);
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        let base = (o * shape[*axis] + start) * inner;
                        dx.data_mut()[base..base + len * inner].copy_from_slice(src);
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::Concat { a, b, axis } => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (sa, sb) = (ta.shape(), tb.shape());
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let (la, lb) = (sa[*axis], sb[*axis]);
                    let mut da = Tensor::zeros(sa);
                    let mut db = Tensor::zeros(sb);
                    for o in 0..outer {
                        let base = o * (la + lb) * inner;
                        da.data_mut()[o * la * inner..(o + 1) * la * inner]
                            .copy_from_slice(&g.data()[base..base + la * inner]);
                        db.data_mut()[o * lb * inner..(o + 1) * lb * inner]
                            .copy_from_slice(&g.data()[base + la * inner..base + (la + lb) * inner]);
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::AddRows(x, rows) => {
                    let per = self.val(*rows).numel();
                    let mut dr = Tensor::zeros(self.val(*rows).shape());
                    for (i, &v) in g.data().iter().enumerate() {
                        dr.data_mut()[i % per] += v;
                    }
                    add_grad(&mut grads, *rows, dr);
                    add_grad(&mut grads, *x, g);
                }
                Op::Embedding { table, indices } => {
                    let tt = self.val(*table);
                    let e = tt.shape()[1];
                    let mut dt = Tensor::zeros(tt.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..e {
                            dt.data_mut()[i * e + j] += g.data()[r * e + j];
                        }
                    }
                    add_grad(&mut grads, *table, dt);
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    let (tx, tg) = (self.val(*x), self.val(*gamma));
                    let d = tx.last_dim().unwrap();
                    let rows = tx.numel() / d;
                    let dn = S::from_f64(d as f64);
                    let mut dx = Tensor::zeros(tx.shape());
                    let mut dgamma = Tensor::zeros(&[d]);
                    let mut dbeta = Tensor::zeros(&[d]);
                    for r in 0..rows {
                        let xr = &tx.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * tg.data()[j];
                            dgamma.data_mut()[j] += gr[j] * xhat;
                            dbeta.data_mut()[j] += gr[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let mean_dxhat = sum_dxhat / dn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / dn;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * tg.data()[j];
                            dx.data_mut()[r * d + j] =
                                rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gamma, dgamma);
                    add_grad(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxLast(x) => {
                    let ty = &self.nodes[idx].value;
                    let d = ty.last_dim().unwrap();
                    let rows = ty.numel() / d;
                    let mut dx = Tensor::zeros(ty.shape());
                    for r in 0..rows {
                        let y = &ty.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: S = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..d {
                            dx.data_mut()[r * d + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::LogSoftmaxLast(x) => {
                    let ty = &self.nodes[idx].value;
                    let d = ty.last_dim().unwrap();
                    let rows = ty.numel() / d;
                    let mut dx = Tensor::zeros(ty.shape());
                    for r in 0..rows {
                        let logy = &ty.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let gsum: S = gr.iter().copied().sum();
                        for j in 0..d {
                            dx.data_mut()[r * d + j] = gr[j] - logy[j].exp() * gsum;
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let tx = self.val(*x);
                    let dx = Tensor::new(
                        tx.shape().to_vec(),
                        tx.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| gv * gelu_bwd(xv))
                            .collect(),
                    )?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                    )?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::CausalMask(x) => add_grad(&mut grads, *x, g),
                Op::GatherLast { x, indices } => {
                    let tx = self.val(*x);
                    let d = tx.last_dim().unwrap();
                    let mut dx = Tensor::zeros(tx.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        dx.data_mut()[r * d + i] += g.data()[r];
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let tx = self.val(*x);
                    let (k, d) = (tx.shape()[1], tx.shape()[2]);
                    let mut dx = Tensor::zeros(tx.shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dx.data_mut()[(r * k + i) * d + j] += g.data()[r * d + j];
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let ty = &self.nodes[idx].value;
                    let dx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(ty.data()).map(|(&gv, &yv)| gv * yv).collect(),
                    )?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::PowConst(x, e) => {
                    let tx = self.val(*x);
                    let es = S::from_f64(*e);
                    let em1 = S::from_f64(*e - 1.0);
                    let dx = Tensor::new(
                        tx.shape().to_vec(),
                        tx.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| {
                                if *e == 0.0 {
                                    S::zero()
                                } else {
                                    gv * es * xv.powf(em1)
                                }
                            })
                            .collect(),
                    )?;
                    add_grad(&mut grads, *x, dx);
                }
                Op::SumLast(x) => {
                    let tx = self.val(*x);
                    let d = tx.last_dim().unwrap();
                    let mut dx = Tensor::zeros(tx.shape());
                    for (i, v) in dx.data_mut().iter_mut().enumerate() {
                        *v = g.data()[i / d];
                    }
                    add_grad(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let tx = self.val(*x);
                    let scale = g.item() / S::from_f64(tx.numel() as f64);
                    let dx = Tensor::full(tx.shape(), scale);
                    add_grad(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn add_grad<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, k-outer loop over contiguous rows.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (row-by-row dot products).
fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: S = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m,n] += a[p,m]^T * b[p,n]`, p-outer loop over contiguous rows.
fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], p: usize, m: usize, n: usize) {
    for pp in 0..p {
        let brow = &b[pp * n..(pp + 1) * n];
        for i in 0..m {
            let api = a[pp * m + i];
            if api == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Scatter copy for permute forward: `out[perm(coord)] = in[coord]`.
fn permute_copy<S: Scalar>(input: &[S], in_shape: &[usize], axes: &[usize], out: &mut [S]) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut coord = vec![0usize; rank];
    for (lin, &v) in input.iter().enumerate() {
        let mut rem = lin;
        for i in 0..rank {
            coord[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        let mut out_lin = 0;
        for i in 0..rank {
            out_lin += coord[axes[i]] * out_strides[i];
        }
        out[out_lin] = v;
    }
}

/// Gather copy for permute backward: `out[coord] = grad[perm(coord)]`.
fn permute_gather<S: Scalar>(grad: &[S], in_shape: &[usize], axes: &[usize], out: &mut [S]) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut coord = vec![0usize; rank];
    for (lin, o) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for i in 0..rank {
            coord[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        let mut g_lin = 0;
        for i in 0..rank {
            g_lin += coord[axes[i]] * out_strides[i];
        }
        *o = grad[g_lin];
    }
}
