use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of the packed `[batch * seq_len, d]` inputs to
/// [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq_len: usize,
    pub n_head: usize,
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Matmul { a: Var, b: Var, dims: MatmulDims },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sum { a: Var },
    Mean { a: Var },
    Log { a: Var },
    L1 { pred: Var, target: Var },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is shared across the batch (rank 2).
    shared_b: bool,
    /// `b` is stored as `[n, k]` and used transposed.
    trans_b: bool,
}

struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of tensor operations.
///
/// The lifetime `'a` lets parameters be registered by reference via
/// [`Tape::param`]; the tape must be dropped (or consumed by
/// [`Tape::backward`]) before those parameters can be updated.
pub struct Tape<'a, T: Float> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Deterministic dropout multipliers: `0` for dropped positions and
/// `1 / (1 - p)` for kept ones. Position `i` depends only on `(seed, i)`.
pub fn dropout_mask<T: Float>(seed: u64, len: usize, p: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|i| {
            let u = unit_hash(seed, i as u64);
            if u < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn unit_hash(seed: u64, i: u64) -> f64 {
    // splitmix64 finalizer over a counter
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'a, T: Float> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable tensor by reference.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.borrowed(t, true)
    }

    /// Registers a tensor by reference without copying it.
    pub fn borrowed(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Cow::Borrowed(t), requires_grad, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Cow::Owned(t), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Attention probabilities `[batch, n_head, seq_len, seq_len]` saved by
    /// [`Tape::attention`], if `v` was produced by it.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionShape, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { shape, probs, .. } => Some((shape, probs)),
            _ => None,
        }
    }

    fn push_node(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.push_node(Cow::Owned(value), requires_grad, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(TensorError::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        let bn = bd.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bn))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dims of `a`
    /// when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * factor).collect(),
        )
        .expect("shape preserved");
        self.push(out, &[a], || Op::Scale { a, factor })
    }

    /// Matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared
    /// across all leading rows of `a`) or `[batch, k, n]` matching a rank-3 `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b` stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let dims = match sb.len() {
            2 => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if bk != k {
                    return Err(err());
                }
                MatmulDims {
                    batch: 1,
                    m: ta.numel() / k,
                    k,
                    n,
                    shared_b: true,
                    trans_b,
                }
            }
            3 if sa.len() == 3 && sa[0] == sb[0] => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if bk != k {
                    return Err(err());
                }
                MatmulDims {
                    batch: sa[0],
                    m: sa[1],
                    k,
                    n,
                    shared_b: false,
                    trans_b,
                }
            }
            _ => return Err(err()),
        };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (rsb, csb) = if trans_b { (1, dims.k) } else { (dims.n, 1) };
        let b_stride = if dims.shared_b { 0 } else { dims.k * dims.n };
        for bi in 0..dims.batch {
            T::gemm(
                dims.m,
                dims.k,
                dims.n,
                T::one(),
                &ta.data()[bi * dims.m * dims.k..],
                dims.k,
                1,
                &tb.data()[bi * b_stride..],
                rsb,
                csb,
                T::zero(),
                &mut out[bi * dims.m * dims.n..],
                dims.n,
                1,
            );
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, &[a, b], || Op::Matmul { a, b, dims }))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let out = Tensor::new(shape, transpose_blocks(ta.data(), r, c))?;
        Ok(self.push(out, &[a], || Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, ta.data().to_vec())?;
        Ok(self.push(out, &[a], || Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let tp = self.value(p);
                let block = tp.shape()[axis] * inner;
                data.extend_from_slice(&tp.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(out, &inputs, || Op::Concat { parts, axis }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("{start}..{end} on axis {axis} of {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, &[a], || Op::Slice { a, axis, start }))
    }

    /// Row lookup: `table` is `[rows, d]`, result is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: format!("table shape {:?}, {} ids", tt.shape(), ids.len()),
            });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.push(out, &[table], || Op::Embedding { table, ids }))
    }

    /// Softmax over the last dimension. Rows that are entirely `-inf`
    /// produce all zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(out, &[a], || Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(out, &[a], || Op::LogSoftmax { a })
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`
    /// (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.max(T::zero())).collect(),
        )
        .expect("shape preserved");
        self.push(out, &[a], || Op::Relu { a })
    }

    /// Inverted dropout with a counter-based mask derived from `seed`.
    /// Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("p = {p}"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let ta = self.value(a);
        let mask = dropout_mask::<T>(seed, ta.numel(), p);
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, &[a], || Op::Dropout { a, mask }))
    }

    /// Replaces positions where `mask` is true with `value`. The mask covers
    /// either all of `a` or a suffix of its shape (repeated over leading dims).
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.numel();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(TensorError::Shape {
                op: "masked_fill",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let m = mask.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % m] { value } else { x })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let mask = mask.to_vec();
        Ok(self.push(out, &[a], || Op::MaskedFill { a, mask }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), &[a], || Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().copied().sum::<T>() / T::of(ta.numel() as f64);
        self.push(Tensor::scalar(s), &[a], || Op::Mean { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.ln()).collect(),
        )
        .expect("shape preserved");
        self.push(out, &[a], || Op::Log { a })
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(TensorError::Shape {
                op: "l1_loss",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let s = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / T::of(tp.numel() as f64);
        Ok(self.push(Tensor::scalar(s), &[pred, target], || Op::L1 { pred, target }))
    }

    /// Scaled dot-product multi-head attention over packed
    /// `[batch * seq_len, d]` projections.
    ///
    /// `allow` is `[batch, seq_len, seq_len]`; query `i` may attend to key `j`
    /// only where `allow[b][i][j]` is true. Probabilities are kept on the tape
    /// and can be read with [`Tape::attention_probs`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        allow: &[bool],
    ) -> Result<Var> {
        let tq = self.value(q);
        let AttentionShape {
            batch,
            seq_len: t,
            n_head,
        } = shape;
        let d = tq.last_dim();
        let expect = [batch * t, d];
        for x in [q, k, v] {
            if self.value(x).shape() != expect {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: expect.to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
        }
        if n_head == 0 || !d.is_multiple_of(n_head) || allow.len() != batch * t * t {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("d={d}, n_head={n_head}, mask len {}", allow.len()),
            });
        }
        let dh = d / n_head;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * n_head * t * t];
        let mut out = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            let mask = &allow[b * t * t..(b + 1) * t * t];
            for h in 0..n_head {
                let off = b * t * d + h * dh;
                let p = &mut probs[(b * n_head + h) * t * t..(b * n_head + h + 1) * t * t];
                // scores = scale * Q K^T
                T::gemm(t, dh, t, scale, &qd[off..], d, 1, &kd[off..], 1, d, T::zero(), p, t, 1);
                for (s, &ok) in p.iter_mut().zip(mask) {
                    if !ok {
                        *s = T::neg_infinity();
                    }
                }
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                T::gemm(t, t, dh, T::one(), p, t, 1, &vd[off..], d, 1, T::zero(), &mut out[off..], d, 1);
            }
        }
        let out = Tensor::new(vec![batch * t, d], out)?;
        // probabilities are kept for inspection, gradients or not
        let requires_grad = [q, k, v].iter().any(|x| self.nodes[x.0].requires_grad);
        Ok(self.push_node(
            Cow::Owned(out),
            requires_grad,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    /// Propagates gradients from the scalar `loss` back to every leaf that
    /// requires them. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add { a, b } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, T::one());
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        reduce_broadcast(gb, &g, T::one());
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, T::one());
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        reduce_broadcast(gb, &g, -T::one());
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let bn = vb.len();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (j, x) in ga.iter_mut().enumerate() {
                            *x += g[j] * vb[j % bn];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (j, &gj) in g.iter().enumerate() {
                            gb[j % bn] += gj * va[j];
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, *factor);
                    }
                }
                Op::Matmul { a, b, dims } => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    matmul_backward(&mut grads, nodes, *a, *b, va, vb, &g, dims);
                }
                Op::Transpose { a } => {
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &transpose_blocks(&g, r, c), T::one());
                    }
                }
                Op::Reshape { a } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        axpy(ga, &g, T::one());
                    }
                }
                Op::Concat { parts, axis } => {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let total = s[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let block = nodes[p.0].value.shape()[*axis] * inner;
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + block];
                                axpy(&mut gp[o * block..(o + 1) * block], src, T::one());
                            }
                        }
                        offset += block;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let sa = nodes[a.0].value.shape();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for o in 0..outer {
                            let base = o * sa[*axis] * inner + start * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            axpy(&mut ga[base..base + len * inner], src, T::one());
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = node.value.last_dim();
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::one());
                        }
                    }
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), gar) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                            let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<T>();
                            for j in 0..d {
                                gar[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), gar) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                            let total = gr.iter().copied().sum::<T>();
                            for j in 0..d {
                                gar[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let gv = nodes[gain.0].value.data();
                    if let Some(gg) = slot(&mut grads, nodes, *gain) {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for gr in g.chunks(d) {
                            axpy(gb, gr, T::one());
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let inv_d = T::one() / T::of(d as f64);
                        let mut dh = vec![T::zero(); d];
                        for (r, ((gr, hr), gxr)) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dh[j] = gr[j] * gv[j];
                            }
                            let m1 = dh.iter().copied().sum::<T>() * inv_d;
                            let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                            for j in 0..d {
                                gxr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..ga.len() {
                            if va[j] > T::zero() {
                                ga[j] += g[j];
                            }
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * mask[j];
                        }
                    }
                }
                Op::MaskedFill { a, mask } => {
                    let m = mask.len();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..ga.len() {
                            if !mask[j % m] {
                                ga[j] += g[j];
                            }
                        }
                    }
                }
                Op::Sum { a } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    }
                }
                Op::Mean { a } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let s = g[0] / T::of(ga.len() as f64);
                        for x in ga.iter_mut() {
                            *x += s;
                        }
                    }
                }
                Op::Log { a } => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..ga.len() {
                            ga[j] += g[j] / va[j];
                        }
                    }
                }
                Op::L1 { pred, target } => {
                    let (vp, vt) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                    let s = g[0] / T::of(vp.len() as f64);
                    let sign = |j: usize| {
                        let diff = vp[j] - vt[j];
                        if diff > T::zero() {
                            s
                        } else if diff < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    };
                    if let Some(gp) = slot(&mut grads, nodes, *pred) {
                        for (j, x) in gp.iter_mut().enumerate() {
                            *x += sign(j);
                        }
                    }
                    if let Some(gt) = slot(&mut grads, nodes, *target) {
                        for (j, x) in gt.iter_mut().enumerate() {
                            *x -= sign(j);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => attention_backward(&mut grads, nodes, [*q, *k, *v], shape, probs, &g),
            }
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(nodes)
                .map(|(g, node)| {
                    g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                })
                .collect(),
        })
    }
}

fn slot<'g, T: Float>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn axpy<T: Float>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn reduce_broadcast<T: Float>(dst: &mut [T], src: &[T], alpha: T) {
    let n = dst.len();
    for (j, &s) in src.iter().enumerate() {
        dst[j % n] += alpha * s;
    }
}

fn transpose_blocks<T: Float>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Float>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    a: Var,
    b: Var,
    va: &[T],
    vb: &[T],
    g: &[T],
    dims: &MatmulDims,
) {
    let MatmulDims {
        batch,
        m,
        k,
        n,
        shared_b,
        trans_b,
    } = *dims;
    let b_stride = if shared_b { 0 } else { k * n };
    // b viewed as k x n
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    if let Some(ga) = slot(grads, nodes, a) {
        for bi in 0..batch {
            // dA = dC @ B^T : (m x n) @ (n x k)
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &g[bi * m * n..],
                n,
                1,
                &vb[bi * b_stride..],
                csb,
                rsb,
                T::one(),
                &mut ga[bi * m * k..],
                k,
                1,
            );
        }
    }
    if let Some(gb) = slot(grads, nodes, b) {
        for bi in 0..batch {
            // dB = A^T @ dC : (k x m) @ (m x n), written through b's layout
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &va[bi * m * k..],
                1,
                k,
                &g[bi * m * n..],
                n,
                1,
                T::one(),
                &mut gb[bi * b_stride..],
                rsb,
                csb,
            );
        }
    }
}

fn attention_backward<T: Float>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    qkv: [Var; 3],
    shape: &AttentionShape,
    probs: &[T],
    g: &[T],
) {
    let [q, k, v] = qkv;
    let AttentionShape {
        batch,
        seq_len: t,
        n_head,
    } = *shape;
    let d = nodes[q.0].value.last_dim();
    let dh = d / n_head;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut dq = vec![T::zero(); batch * t * d];
    let mut dk = vec![T::zero(); batch * t * d];
    let mut dv = vec![T::zero(); batch * t * d];
    let mut dp = vec![T::zero(); t * t];
    for b in 0..batch {
        for h in 0..n_head {
            let off = b * t * d + h * dh;
            let p = &probs[(b * n_head + h) * t * t..(b * n_head + h + 1) * t * t];
            // dP = dO V^T
            T::gemm(t, dh, t, T::one(), &g[off..], d, 1, &vd[off..], 1, d, T::zero(), &mut dp, t, 1);
            // dV = P^T dO
            T::gemm(t, t, dh, T::one(), p, 1, t, &g[off..], d, 1, T::one(), &mut dv[off..], d, 1);
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale
            for (pr, dpr) in p.chunks(t).zip(dp.chunks_mut(t)) {
                let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pj) in dpr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dS^T Q
            T::gemm(t, t, dh, T::one(), &dp, t, 1, &kd[off..], d, 1, T::one(), &mut dq[off..], d, 1);
            T::gemm(t, t, dh, T::one(), &dp, 1, t, &qd[off..], d, 1, T::one(), &mut dk[off..], d, 1);
        }
    }
    for (var, src) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gx) = slot(grads, nodes, var) {
            axpy(gx, &src, T::one());
        }
    }
}
