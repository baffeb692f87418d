//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive evaluates eagerly and appends one node to the tape, so the
//! node list is topologically ordered by construction. [`Tape::backward`]
//! walks it in exact reverse order, accumulating gradients into every node
//! that depends on a leaf.

use crate::error::{Result, TensorError};
use crate::scalar::{matmul_into, Scalar};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    Softmax {
        a: NodeId,
    },
    LogSoftmax {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Keeps `tanh(c * (x + k x^3))` for the backward rule.
    Gelu {
        a: NodeId,
        tanh: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MaskedFill {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    GatherRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    PickPerRow {
        a: NodeId,
        cols: Vec<usize>,
    },
    SplitHeads {
        a: NodeId,
        seqs: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        a: NodeId,
        seqs: usize,
        len: usize,
        heads: usize,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        a: NodeId,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Checks that `b` broadcasts onto `a` as a trailing suffix.
fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn matrix_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [m, k] => Ok((*m, *k)),
        _ => Err(TensorError::InvalidShape { shape: t.to_vec(), reason: format!("{op} expects a rank-2 tensor") }),
    }
}

fn batch_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize)> {
    match t {
        [b, m, k] => Ok((*b, *m, *k)),
        _ => Err(TensorError::InvalidShape { shape: t.to_vec(), reason: format!("{op} expects a rank-3 tensor") }),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// `a · b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (r, c) = matrix_dims("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, trans_b, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ`) for rank-3 operands.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ba, m, k) = batch_dims("bmm", self.shape(a))?;
        let (bb, r, c) = batch_dims("bmm", self.shape(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            matmul_into(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let value = Tensor::new([ba, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        suffix_broadcast(op_name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bl = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % bl])).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// `a - b`, with `b` broadcast over the leading axes of `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise `a * b`, with `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let w = src.last_dim();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let w = src.last_dim();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let w = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [w] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.rows();
        let wt = T::of(w as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let xh = (row[j] - mean) * rs;
                xhat[r * w + j] = xh;
                out[r * w + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (c, k, half, two) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5), T::of(2.0));
        let src = self.value(a);
        // tanh through a single exp; saturates correctly when exp overflows.
        let tanh: Vec<T> =
            src.data().iter().map(|&x| T::one() - two / ((two * c * (x + k * x * x * x)).exp() + T::one())).collect();
        let data = src.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { a, tanh }, &[a])
    }

    /// Row lookup `table[ids[r]]`, producing `[ids.len(), width]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, w) = matrix_dims("embedding", self.shape(table))?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, size: rows });
            }
            out.extend_from_slice(&tv[id * w..(id + 1) * w]);
        }
        let value = Tensor::new([ids.len(), w], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Adds [`Scalar::MASK_FILL`] wherever `allowed` is false. `allowed`
    /// covers the trailing axes of `a` and is broadcast over the rest.
    pub fn masked_fill(&mut self, a: NodeId, allowed: &[bool]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let covers_suffix = (0..shape.len()).any(|s| shape[s..].iter().product::<usize>() == allowed.len());
        if !covers_suffix {
            return Err(TensorError::ShapeMismatch { op: "masked_fill", lhs: shape, rhs: vec![allowed.len()] });
        }
        let ml = allowed.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if allowed[i % ml] { x } else { x + T::MASK_FILL })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MaskedFill { a }, &[a]))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        let (n, w) = (src.rows(), src.last_dim());
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, size: n });
            }
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new([rows.len(), w], out)?;
        Ok(self.push(value, Op::GatherRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// Picks `a[r, cols[r]]` for each row `r`, producing `[rows]`.
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        let (n, w) = (src.rows(), src.last_dim());
        if cols.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                lhs: src.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(n);
        for (r, &c) in cols.iter().enumerate() {
            if c >= w {
                return Err(TensorError::IndexOutOfRange { op: "pick_per_row", index: c, size: w });
            }
            out.push(src.row(r)[c]);
        }
        let value = Tensor::new([n], out)?;
        Ok(self.push(value, Op::PickPerRow { a, cols: cols.to_vec() }, &[a]))
    }

    /// `[seqs*len, heads*dh]` → `[seqs*heads, len, dh]`.
    pub fn split_heads(&mut self, a: NodeId, seqs: usize, len: usize, heads: usize) -> Result<NodeId> {
        let (rows, width) = matrix_dims("split_heads", self.shape(a))?;
        if rows != seqs * len || heads == 0 || width % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: self.shape(a).to_vec(),
                rhs: vec![seqs, len, heads],
            });
        }
        let dh = width / heads;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..seqs {
            for l in 0..len {
                let row = &src[(s * len + l) * width..(s * len + l + 1) * width];
                for h in 0..heads {
                    let dst = ((s * heads + h) * len + l) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let value = Tensor::new([seqs * heads, len, dh], out)?;
        Ok(self.push(value, Op::SplitHeads { a, seqs, len, heads }, &[a]))
    }

    /// `[seqs*heads, len, dh]` → `[seqs*len, heads*dh]`.
    pub fn merge_heads(&mut self, a: NodeId, seqs: usize, heads: usize) -> Result<NodeId> {
        let (bh, len, dh) = batch_dims("merge_heads", self.shape(a))?;
        if bh != seqs * heads {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: self.shape(a).to_vec(),
                rhs: vec![seqs, heads],
            });
        }
        let width = heads * dh;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..seqs {
            for h in 0..heads {
                for l in 0..len {
                    let from = ((s * heads + h) * len + l) * dh;
                    let to = (s * len + l) * width + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new([seqs * len, width], out)?;
        Ok(self.push(value, Op::MergeHeads { a, seqs, len, heads }, &[a]))
    }

    /// Column concatenation of `[n,p]` and `[n,q]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, p) = matrix_dims("concat_cols", self.shape(a))?;
        let (nb, q) = matrix_dims("concat_cols", self.shape(b))?;
        if n != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let value = Tensor::new([n, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Back-propagates from a scalar `loss`, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = matrix_dims("matmul", self.shape(*a))?;
                let n = node.value.last_dim();
                if self.needs(*a) {
                    // dA = dC · op(B)ᵀ
                    let buf = grad_buf(grads, *a, self.shape(*a))?;
                    matmul_into(gd, self.value(*b).data(), buf, m, n, k, false, !trans_b, true);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *b, self.shape(*b))?;
                    if *trans_b {
                        // dB = dCᵀ · A, shape [n,k]
                        matmul_into(gd, av, buf, n, m, k, true, false, true);
                    } else {
                        // dB = Aᵀ · dC, shape [k,n]
                        matmul_into(av, gd, buf, k, m, n, true, false, true);
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = batch_dims("bmm", self.shape(*a))?;
                let n = node.value.last_dim();
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let buf = grad_buf(grads, *a, self.shape(*a))?;
                    for s in 0..batch {
                        matmul_into(
                            &gd[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            &mut buf[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !trans_b,
                            true,
                        );
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let buf = grad_buf(grads, *b, self.shape(*b))?;
                    for s in 0..batch {
                        let gs = &gd[s * m * n..(s + 1) * m * n];
                        let asl = &av[s * m * k..(s + 1) * m * k];
                        let bs = &mut buf[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            matmul_into(gs, asl, bs, n, m, k, true, false, true);
                        } else {
                            matmul_into(asl, gs, bs, k, m, n, true, false, true);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.needs(*a) {
                    add_into(grad_buf(grads, *a, self.shape(*a))?, gd);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, self.shape(*b))?;
                    let bl = buf.len();
                    for (j, &x) in gd.iter().enumerate() {
                        buf[j % bl] += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = bv.len();
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, self.shape(*a))?;
                    for (j, &x) in gd.iter().enumerate() {
                        buf[j] += x * bv[j % bl];
                    }
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, self.shape(*b))?;
                    for (j, &x) in gd.iter().enumerate() {
                        buf[j % bl] += x * av[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for (d, &x) in buf.iter_mut().zip(gd) {
                    *d += x * *factor;
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for ((yr, gr), br) in y.chunks(w).zip(gd.chunks(w)).zip(buf.chunks_mut(w)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..w {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for ((yr, gr), br) in y.chunks(w).zip(gd.chunks(w)).zip(buf.chunks_mut(w)) {
                    let total = gr.iter().copied().sum::<T>();
                    for j in 0..w {
                        br[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let w = node.value.last_dim();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let buf = grad_buf(grads, *gamma, &[w])?;
                    for (xr, gr) in xhat.chunks(w).zip(gd.chunks(w)) {
                        for j in 0..w {
                            buf[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let buf = grad_buf(grads, *beta, &[w])?;
                    for gr in gd.chunks(w) {
                        add_into(buf, gr);
                    }
                }
                if self.needs(*x) {
                    let wt = T::of(w as f64);
                    let buf = grad_buf(grads, *x, self.shape(*x))?;
                    let mut dxhat = vec![T::zero(); w];
                    for (r, ((xr, gr), br)) in xhat.chunks(w).zip(gd.chunks(w)).zip(buf.chunks_mut(w)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..w {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= wt;
                        mean_dx /= wt;
                        for j in 0..w {
                            br[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { a, tanh } => {
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                let three = T::of(3.0);
                let xv = self.value(*a).data();
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for j in 0..buf.len() {
                    let x = xv[j];
                    let t = tanh[j];
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    buf[j] += gd[j] * d;
                }
            }
            Op::Embedding { table, ids } => {
                let w = node.value.last_dim();
                let buf = grad_buf(grads, *table, self.shape(*table))?;
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut buf[id * w..(id + 1) * w], &gd[r * w..(r + 1) * w]);
                }
            }
            Op::MaskedFill { a } | Op::Reshape { a } => {
                add_into(grad_buf(grads, *a, self.shape(*a))?, gd);
            }
            Op::Mean { a } => {
                let n = T::of(self.value(*a).len() as f64);
                let d = gd[0] / n;
                for v in grad_buf(grads, *a, self.shape(*a))?.iter_mut() {
                    *v += d;
                }
            }
            Op::Sum { a } => {
                let d = gd[0];
                for v in grad_buf(grads, *a, self.shape(*a))?.iter_mut() {
                    *v += d;
                }
            }
            Op::GatherRows { a, rows } => {
                let w = node.value.last_dim();
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut buf[src * w..(src + 1) * w], &gd[r * w..(r + 1) * w]);
                }
            }
            Op::PickPerRow { a, cols } => {
                let w = self.value(*a).last_dim();
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for (r, &c) in cols.iter().enumerate() {
                    buf[r * w + c] += gd[r];
                }
            }
            Op::SplitHeads { a, seqs, len, heads } => {
                let width = self.value(*a).last_dim();
                let dh = width / heads;
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for s in 0..*seqs {
                    for l in 0..*len {
                        for h in 0..*heads {
                            let from = ((s * heads + h) * len + l) * dh;
                            let to = (s * len + l) * width + h * dh;
                            add_into(&mut buf[to..to + dh], &gd[from..from + dh]);
                        }
                    }
                }
            }
            Op::MergeHeads { a, seqs, len, heads } => {
                let width = node.value.last_dim();
                let dh = width / heads;
                let buf = grad_buf(grads, *a, self.shape(*a))?;
                for s in 0..*seqs {
                    for h in 0..*heads {
                        for l in 0..*len {
                            let to = ((s * heads + h) * len + l) * dh;
                            let from = (s * len + l) * width + h * dh;
                            add_into(&mut buf[to..to + dh], &gd[from..from + dh]);
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let p = self.value(*a).last_dim();
                let q = self.value(*b).last_dim();
                let w = p + q;
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, self.shape(*a))?;
                    for (r, gr) in gd.chunks(w).enumerate() {
                        add_into(&mut buf[r * p..(r + 1) * p], &gr[..p]);
                    }
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, self.shape(*b))?;
                    for (r, gr) in gd.chunks(w).enumerate() {
                        add_into(&mut buf[r * q..(r + 1) * q], &gr[p..]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], id: NodeId, shape: &[usize]) -> Result<&'a mut [T]> {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec())?);
    }
    Ok(slot.as_mut().expect("initialized above").data_mut())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::identity(3).unwrap());
        let x = Tensor::from_fn([3, 4], |j| j as f64 * 0.5 - 1.0).unwrap();
        let xid = tape.constant(x.clone());
        let y = tape.matmul(i, xid).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 4], 2.5).unwrap());
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 4], |j| j as f64).unwrap());
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn([3, 2], |j| j as f32).unwrap());
        let b = tape.leaf(Tensor::from_fn([5], |j| -(j as f32)).unwrap());
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let loss = tape.add(sa, sb).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2, 2]).unwrap());
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2, 2]));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros([4, 5]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![4, 5] });
        assert!(err.to_string().contains("matmul") && err.to_string().contains("[4, 5]"));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(2.0));
        let y = tape.scale(x, 2.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalize_and_masked_entries_vanish(
            values in proptest::collection::vec(-30.0f32..30.0, 16),
            mask in proptest::collection::vec(any::<bool>(), 16),
        ) {
            // Keep at least one visible key per row.
            let mut allowed = mask.clone();
            for r in 0..4 {
                allowed[r * 4 + r] = true;
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new([4, 4], values).unwrap());
            let filled = tape.masked_fill(x, &allowed).unwrap();
            let y = tape.softmax(filled);
            for r in 0..4 {
                let row = tape.value(y).row(r);
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    if !allowed[r * 4 + c] {
                        prop_assert!(row[c] < 1e-12);
                    }
                }
            }
        }
    }
}
