//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node holding its forward value plus whatever it needs for the backward
//! pass, and returns a [`Var`] handle. Because nodes can only reference nodes
//! that already exist, creation order is a topological order, and
//! [`Graph::backward`] simply walks the arena from the loss down to index 0,
//! visiting each node once.
//!
//! ```
//! use grainmoe::autodiff::Graph;
//! use grainmoe::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    LogSumExp {
        a: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        idx: Vec<usize>,
    },
    GatherFlat {
        src: Var,
        pos: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        w: Var,
    },
    ConcatRows(Vec<Var>),
    Rope {
        a: Var,
        table: RopeTable<T>,
    },
}

/// Per-row rotation table for rotary embeddings: `cos`/`sin` have
/// `rows * rot / 2` entries.
struct RopeTable<T> {
    heads: usize,
    d_head: usize,
    rot: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let tail = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .fold(T::zero(), |a, (&u, &v)| a + u * v);
    for (u, v) in cx.zip(cy) {
        for j in 0..8 {
            acc[j] = acc[j] + u[j] * v[j];
        }
    }
    acc.iter().fold(tail, |a, &v| a + v)
}

/// out[m×k] += g[m×n] · b[k×n]^T
fn gemm_nt<T: Real>(out: &mut [T], g: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = out[i * k + p] + dot(grow, brow);
        }
    }
}

/// out[k×n] += a[m×k]^T · g[m×n]
fn gemm_tn<T: Real>(out: &mut [T], a: &[T], g: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (with `shape`) into permuted layout: `out` axis `i` is
/// input axis `perm[i]`. When `scatter` is set, performs the inverse mapping
/// (accumulating `src` laid out in permuted order back into input order).
fn permute_into<T: Real>(src: &[T], shape: &[usize], perm: &[usize], out: &mut [T], scatter: bool) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides_perm: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let total = src.len();
    for o in 0..total {
        let mut in_off = 0;
        for d in 0..rank {
            in_off += idx[d] * src_strides_perm[d];
        }
        if scatter {
            out[in_off] = out[in_off] + src[o];
        } else {
            out[o] = src[in_off];
        }
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, err: Error) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(err)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product. Accepts `[m,k]·[k,n]` or a shared leading batch
    /// dimension `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_err("softmax", format!("axis {axis} for {:?}", x.shape())));
        }
        check_finite(x, Error::NonFiniteLogits)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { a, axis }, &[a]))
    }

    /// Softmax over the last axis of `[.., t, t]` scores where row `i` only
    /// sees columns `j <= i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(shape_err("causal_softmax", format!("{s:?} is not [.., t, t]")));
        }
        check_finite(x, Error::NonFiniteLogits)?;
        let t = s[r - 1];
        let mats = x.len() / (t * t);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for mtx in 0..mats {
            for i in 0..t {
                let row = (mtx * t + i) * t;
                let mut mx = T::neg_infinity();
                for j in 0..=i {
                    mx = mx.max(xd[row + j]);
                }
                let mut z = T::zero();
                for j in 0..=i {
                    let e = (xd[row + j] - mx).exp();
                    out[row + j] = e;
                    z = z + e;
                }
                for j in 0..=i {
                    out[row + j] = out[row + j] / z;
                }
            }
        }
        let v = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(v, Op::CausalSoftmax(a), &[a]))
    }

    /// `log Σ exp` along `axis`; the axis is removed from the result.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_err("log_sum_exp", format!("axis {axis} for {:?}", x.shape())));
        }
        check_finite(x, Error::NonFiniteLogits)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    z = z + (xd[at(j)] - mx).exp();
                }
                out[o * inner + i] = mx + z.ln();
            }
        }
        let v = Tensor::new(reduced_shape(x.shape(), axis), out)?;
        Ok(self.push(v, Op::LogSumExp { a, axis }, &[a]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.len()).unwrap();
        let s: T = x.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Sum along `axis`; the axis is removed from the result.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} for {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[(o * n + j) * inner + i];
                }
            }
        }
        let v = Tensor::new(reduced_shape(x.shape(), axis), out)?;
        Ok(self.push(v, Op::SumAxis { a, axis }, &[a]))
    }

    /// Mean along `axis`; the axis is removed from the result.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(n).unwrap()))
    }

    /// Layer normalization over the last axis with gain `gamma` and bias
    /// `beta` (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mu) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: each entry is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`. The mask is a pure function of
    /// `seed`. With `p == 0` the input handle is returned unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout p must be in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { a, mask }, &[a]))
    }

    /// Mean token cross-entropy of `logits: [n, vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, vocab) = match x.shape() {
            [n, v] => (*n, *v),
            s => return Err(shape_err("cross_entropy", format!("logits {s:?} not rank 2"))),
        };
        if targets.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        check_finite(x, Error::NonFiniteLogits)?;
        let xd = x.data();
        let mut probs = vec![T::zero(); xd.len()];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &xd[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - lse).exp();
            }
            loss = loss + lse - row[targets[r]];
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for {:?}", x.shape())));
        }
        let mut out = vec![T::zero(); x.len()];
        permute_into(x.data(), x.shape(), perm, &mut out, false);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    fn rows_cols(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("{s:?} is not rank 2"))),
        }
    }

    /// `out[r] = src[idx[r]]` for a rank-2 `src`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_cols("gather_rows", src)?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&sd[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// `out = zeros[n_rows, cols]; out[idx[r]] += src[r]`.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols("scatter_add_rows", src)?;
        if idx.len() != rows || idx.iter().any(|&i| i >= n_rows) {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{} indices for {rows} rows into {n_rows}", idx.len()),
            ));
        }
        let sd = self.value(src).data();
        let mut out = vec![T::zero(); n_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                out[i * cols + c] = out[i * cols + c] + sd[r * cols + c];
            }
        }
        let v = Tensor::new(vec![n_rows, cols], out)?;
        Ok(self.push(
            v,
            Op::ScatterAddRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// Picks entries of the flattened `src` at `pos`; result shape `[pos.len()]`.
    pub fn gather_flat(&mut self, src: Var, pos: &[usize]) -> Result<Var> {
        let n = self.value(src).len();
        if pos.is_empty() || pos.iter().any(|&p| p >= n) {
            return Err(shape_err("gather_flat", format!("positions out of 0..{n}")));
        }
        let sd = self.value(src).data();
        let out = pos.iter().map(|&p| sd[p]).collect();
        let v = Tensor::new(vec![pos.len()], out)?;
        Ok(self.push(
            v,
            Op::GatherFlat {
                src,
                pos: pos.to_vec(),
            },
            &[src],
        ))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, cols) = self.rows_cols("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Multiplies row `r` of `x: [n, d]` by `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols("scale_rows", x)?;
        if self.shape(w) != [rows] {
            return Err(shape_err("scale_rows", format!("weights {:?} for {rows} rows", self.shape(w))));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] * wd[r];
            }
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(v, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Rotary position embedding on `x: [n, heads, d_head]`. Row `r` sits at
    /// `positions[r]`; within each head the first `rot` dims are rotated in
    /// adjacent pairs `(2j, 2j+1)` by `position * base^(-2j/rot)` and the
    /// rest pass through untouched.
    pub fn rope(&mut self, a: Var, positions: &[usize], rot: usize, base: f64) -> Result<Var> {
        let (n, heads, d_head) = match self.shape(a) {
            [n, h, d] => (*n, *h, *d),
            s => return Err(shape_err("rope", format!("{s:?} is not [n, heads, d_head]"))),
        };
        if positions.len() != n {
            return Err(shape_err("rope", format!("{} positions for {n} rows", positions.len())));
        }
        if !rot.is_multiple_of(2) || rot > d_head {
            return Err(Error::InvalidConfig(format!(
                "rotated span {rot} must be even and at most d_head = {d_head}"
            )));
        }
        let half = rot / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for j in 0..half {
                let theta = base.powf(-2.0 * j as f64 / rot as f64);
                let ang = p as f64 * theta;
                cos.push(T::from_f64_lossy(ang.cos()));
                sin.push(T::from_f64_lossy(ang.sin()));
            }
        }
        let table = RopeTable {
            heads,
            d_head,
            rot,
            cos,
            sin,
        };
        let mut out = self.value(a).data().to_vec();
        table.apply(&mut out, false);
        let v = Tensor::new(vec![n, heads, d_head], out)?;
        Ok(self.push(v, Op::Rope { a, table }, &[a]))
    }

    /// Runs the backward pass from the one-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Accumulates into the gradient slot of `v` if it wants one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |ga| {
                    let bv = val(*b);
                    for bi in 0..*batch {
                        gemm_nt(
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    let av = val(*a);
                    for bi in 0..*batch {
                        gemm_tn(
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x = *x + gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x = *x + gy * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *c));
            }
            Op::Silu(a) => {
                acc(*a, &mut |ga| {
                    for ((x, &gy), &xv) in ga.iter_mut().zip(g).zip(val(*a)) {
                        let s = sigmoid(xv);
                        *x = *x + gy * s * (T::one() + xv * (T::one() - s));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax(a) => {
                let y = node.value.data();
                let s = node.value.shape();
                let t = s[s.len() - 1];
                acc(*a, &mut |ga| {
                    for row in 0..y.len() / t {
                        let base = row * t;
                        let i = row % t;
                        let dot: T = (0..=i).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..=i {
                            ga[base + j] = ga[base + j] + y[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp { a, axis } => {
                let x = &nodes[a.0].value;
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let lse = node.value.data();
                acc(*a, &mut |ga| {
                    let xd = x.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                ga[at] = ga[at] + g[r] * (xd[at] - lse[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g[0]));
            }
            Op::Mean(a) => {
                let n = T::from_usize(nodes[a.0].value.len()).unwrap();
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g[0] / n));
            }
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let at = (o * n + j) * inner + i;
                                ga[at] = ga[at] + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let rows = xhat.len() / d;
                let gd = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] = gb[c] + g[r * d + c];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let dn = T::from_usize(d).unwrap();
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g[r * d + c] * gd[c];
                            let v = inv_std[r] / dn * (dn * dh - s1 - xhat[r * d + c] * s2);
                            gx[r * d + c] = gx[r * d + c] + v;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |ga| {
                    for ((x, &gy), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x = *x + gy * m;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let scale = g[0] / T::from_usize(n).unwrap();
                acc(*logits, &mut |gl| {
                    for r in 0..n {
                        for c in 0..vocab {
                            let mut d = probs[r * vocab + c];
                            if c == targets[r] {
                                d = d - T::one();
                            }
                            gl[r * vocab + c] = gl[r * vocab + c] + scale * d;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            Op::Permute { a, perm } => {
                let in_shape = nodes[a.0].value.shape();
                acc(*a, &mut |ga| permute_into(g, in_shape, perm, ga, true));
            }
            Op::GatherRows { src, idx } => {
                let cols = node.value.shape()[1];
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gs[i * cols + c] = gs[i * cols + c] + g[r * cols + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, idx } => {
                let cols = node.value.shape()[1];
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gs[r * cols + c] = gs[r * cols + c] + g[i * cols + c];
                        }
                    }
                });
            }
            Op::GatherFlat { src, pos } => {
                acc(*src, &mut |gs| {
                    for (k, &p) in pos.iter().enumerate() {
                        gs[p] = gs[p] + g[k];
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let cols = node.value.shape()[1];
                let rows = node.value.shape()[0];
                acc(*x, &mut |gx| {
                    let wd = val(*w);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + g[r * cols + c] * wd[r];
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    let xd = val(*x);
                    for r in 0..rows {
                        let mut s = T::zero();
                        for c in 0..cols {
                            s = s + g[r * cols + c] * xd[r * cols + c];
                        }
                        gw[r] = gw[r] + s;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, &y)| *x = *x + y)
                    });
                    off += n;
                }
            }
            Op::Rope { a, table } => {
                acc(*a, &mut |ga| {
                    let mut back = g.to_vec();
                    table.apply(&mut back, true);
                    ga.iter_mut().zip(&back).for_each(|(x, &y)| *x = *x + y);
                });
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// SwiGLU feed-forward on row vectors: `x: [n, d]`, `w_gate, w_up: [d, h]`,
    /// `w_down: [h, d]`, returning `(silu(x·w_gate) ⊙ (x·w_up))·w_down`.
    pub fn swiglu(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let gate = self.matmul(x, w_gate)?;
        let up = self.matmul(x, w_up)?;
        let act = self.silu(gate);
        let hidden = self.mul(act, up)?;
        self.matmul(hidden, w_down)
    }
}

impl<T: Real> RopeTable<T> {
    /// Rotates `buf` in place; `inverse` rotates by the negated angle.
    fn apply(&self, buf: &mut [T], inverse: bool) {
        let half = self.rot / 2;
        let rows = buf.len() / (self.heads * self.d_head);
        for r in 0..rows {
            for h in 0..self.heads {
                let base = (r * self.heads + h) * self.d_head;
                for j in 0..half {
                    let c = self.cos[r * half + j];
                    let mut s = self.sin[r * half + j];
                    if inverse {
                        s = -s;
                    }
                    let x0 = buf[base + 2 * j];
                    let x1 = buf[base + 2 * j + 1];
                    buf[base + 2 * j] = x0 * c - x1 * s;
                    buf[base + 2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Top-`k` entries of `scores`, sorted by value descending with ties going
/// to the lower index. The selection itself carries no gradient.
pub fn topk_select<T: Real>(scores: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let n = scores.len();
    if k > n {
        return Err(Error::KExceedsExperts { k, n });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("top-k needs k >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    let values = order.iter().map(|&i| scores[i]).collect();
    Ok((order, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        for &v in g.value(s).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let b = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = g.softmax(b, 0).unwrap();
        assert_abs_diff_eq!(g.value(s).data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(s).data()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        // e^2, e^1, e^0 normalised; computed independently of the op.
        let z = 2f64.exp() + 1f64.exp() + 1.0;
        let expected = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
        assert_abs_diff_eq!(expected[0], 0.66524, epsilon = 5e-6);
        assert_abs_diff_eq!(expected[1], 0.24473, epsilon = 5e-6);
        assert_abs_diff_eq!(expected[2], 0.09003, epsilon = 5e-6);
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[102.0, 101.0, 100.0]));
        let s = g.softmax(a, 0).unwrap();
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, f64::NAN]));
        let err = g.softmax(a, 0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite logits");
        let b = g.constant(t(&[2], &[f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(b, 0), Err(Error::NonFiniteLogits)));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let s = g.softmax(a, 0).unwrap();
        for &v in g.value(s).data() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn topk_examples() {
        let (i, v) = topk_select(&[0.1, 0.5, 0.3, 0.2], 2).unwrap();
        assert_eq!(i, vec![1, 2]);
        assert_eq!(v, vec![0.5, 0.3]);
        let (i, _) = topk_select(&[0.4, 0.4, 0.4], 2).unwrap();
        assert_eq!(i, vec![0, 1]);
        let (i, v) = topk_select(&[0.2, 0.9, 0.1, 0.5], 4).unwrap();
        assert_eq!(i, vec![1, 3, 0, 2]);
        assert_eq!(v, vec![0.9, 0.5, 0.2, 0.1]);
        let err = topk_select(&[0.1, 0.2], 3).unwrap_err();
        assert!(err.to_string().starts_with("k exceeds expert count"));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0f64));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn dropout_identity_and_reproducible() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(vec![64], 1.0));
        assert_eq!(g.dropout(x, 0.0, 9).unwrap(), x);
        let a = g.dropout(x, 0.25, 9).unwrap();
        let b = g.dropout(x, 0.25, 9).unwrap();
        let c = g.dropout(x, 0.25, 10).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        for &v in g.value(a).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6);
        }
        assert!(g.dropout(x, 1.0, 0).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[5.0, 7.0, 0.0, 0.0]));
        let s = g.causal_softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn permute_roundtrip_values() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(g.value(p).data()[0..3], [0.0, 4.0, 8.0]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
        assert!(g.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let r = g.rope(x, &[0], 4, 10000.0).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(g.rope(x, &[0], 3, 10000.0).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).is_err());
        assert!(g.cross_entropy(a, &[0, 5]).is_err());
    }
}
