//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order; [`Graph::backward`] walks it in reverse.
//! Leaf nodes bound from a [`ParamStore`] remember their parameter name so
//! their gradients can be written back with [`Graph::write_param_grads`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Input shape is a suffix of the output shape.
    Suffix(usize),
    /// Explicit output-index → input-index map.
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_width: usize,
        offset: usize,
        width: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        row: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        self.push(value, op)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let mut t = t;
        t.requires_grad = requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Binds a named parameter as a leaf. Binding the same name twice returns
    /// the same node. The leaf requires grad iff the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let t = Tensor::from_parts(p.shape().to_vec(), p.data().to_vec())
            .with_requires_grad(p.requires_grad);
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clears every stored gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Adds the gradients of bound parameter leaves into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for n in &self.nodes {
            if let (Some(name), Some(g)) = (&n.param, &n.value.grad) {
                store
                    .get_mut(name)
                    .ok_or_else(|| TensorError::UnknownParam(name.clone()))?
                    .accumulate_grad(g);
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise and broadcasting ops
    // ------------------------------------------------------------------

    fn broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Same));
        }
        let rank = sa.len().max(sb.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + sa.len() >= rank { sa[i + sa.len() - rank] } else { 1 };
            let db = if i + sb.len() >= rank { sb[i + sb.len() - rank] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: sa.to_vec(),
                        rhs: sb.to_vec(),
                    })
                }
            };
        }
        Ok((out.clone(), bcast_for(&out, sa), bcast_for(&out, sb)))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var, Bcast, Bcast) -> Op,
    ) -> Result<Var> {
        let (shape, ba, bb) = self.broadcast(op, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect(),
            _ => (0..numel(&shape))
                .map(|i| f(da[ba.index(i)], db[bb.index(i)]))
                .collect(),
        };
        Ok(self.push_op(shape, data, mk(a, b, ba, bb), &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Multiplies by a precomputed mask whose kept entries equal `1/(1-p)`.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Op::Dropout { x, mask }, &[x]))
    }

    /// Train-mode inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        let mask = dropout_mask(self.value(x).numel(), p, rng)?;
        self.dropout_with_mask(x, mask)
    }

    // ------------------------------------------------------------------
    // Shape ops
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape,
                reason: format!("invalid axis order {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.data(x), &shape, axes);
        Ok(self.push_op(out_shape, data, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (v, w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(*v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        ))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_width = shape[axis] * inner;
        let offset = start * inner;
        let width = (end - start) * inner;
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            data.extend_from_slice(&src[o * in_width + offset..o * in_width + offset + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.push_op(
            out_shape,
            data,
            Op::Slice {
                x,
                outer,
                in_width,
                offset,
                width,
            },
            &[x],
        ))
    }

    /// Row lookup: treats `table` as `[rows, ...]` and stacks the selected rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape,
                reason: "table must have rank >= 1".into(),
            });
        }
        let rows = shape[0];
        let row: usize = shape[1..].iter().product();
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * row);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, rows });
            }
            data.extend_from_slice(&src[id * row..(id + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = ids.len();
        Ok(self.push_op(
            out_shape,
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                row,
            },
            &[table],
        ))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `[..., m, k] x [k, n]` (shared right operand) or
    /// `[..., m, k] x [..., k, n]` (matching batch dimensions).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![0.0; batch * m * n];
        if shared_rhs {
            gemm_nn(da, db, &mut data, batch * m, k, n);
        } else {
            for bi in 0..batch {
                gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push_op(
            shape,
            data,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            reason: "rank must be at least 1".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::InvalidShape {
                op,
                shape: self.shape(x).to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis("softmax", x)?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Op::Softmax(x), &[x]))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis("log_softmax", x)?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Op::LogSoftmax(x), &[x]))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.last_axis("l2_normalize", x)?;
        let mut data = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Pairwise cosine similarity of the rows of `a` `[n, d]` and `b` `[m, d]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: sa,
                rhs: sb,
            });
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_op(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push_op(vec![], vec![s], Op::Mean(x), &[x])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push_op(
            out_shape,
            data,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are added to whatever every node already holds, so calling
    /// this twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        let numel_of = |v: Var| self.nodes[v.0].value.numel();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel_of(v)]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ba, bb) | Op::Sub(a, b, ba, bb) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    send(*a, &mut |s| reduce_into(s, g, ba, 1.0));
                }
                if rg(*b) {
                    send(*b, &mut |s| reduce_into(s, g, bb, sign));
                }
            }
            Op::Mul(a, b, ba, bb) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    send(*a, &mut |s| {
                        for (k, gv) in g.iter().enumerate() {
                            s[ba.index(k)] += gv * db[bb.index(k)];
                        }
                    });
                }
                if rg(*b) {
                    send(*b, &mut |s| {
                        for (k, gv) in g.iter().enumerate() {
                            s[bb.index(k)] += gv * da[ba.index(k)];
                        }
                    });
                }
            }
            Op::Scale(x, c) => send(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)
            }),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    send(*a, &mut |s| {
                        if *shared_rhs {
                            gemm_nt(g, db, s, batch * m, n, k);
                        } else {
                            for bi in 0..batch {
                                gemm_nt(
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &db[bi * k * n..(bi + 1) * k * n],
                                    &mut s[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                    });
                }
                if rg(*b) {
                    send(*b, &mut |s| {
                        if *shared_rhs {
                            gemm_tn(da, g, s, batch * m, k, n);
                        } else {
                            for bi in 0..batch {
                                gemm_tn(
                                    &da[bi * m * k..(bi + 1) * m * k],
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &mut s[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                    });
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                send(*x, &mut |s| {
                    s.iter_mut().zip(&back).for_each(|(a, b)| *a += b)
                });
            }
            Op::Reshape(x) => send(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            }),
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (v, &w) in inputs.iter().zip(widths) {
                    if rg(*v) {
                        send(*v, &mut |s| {
                            for o in 0..*outer {
                                let src = &g[o * row + off..o * row + off + w];
                                s[o * w..(o + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::Slice {
                x,
                outer,
                in_width,
                offset,
                width,
            } => send(*x, &mut |s| {
                for o in 0..*outer {
                    let dst = &mut s[o * in_width + offset..o * in_width + offset + width];
                    dst.iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
            }),
            Op::Gather { table, ids, row } => send(*table, &mut |s| {
                for (r, &id) in ids.iter().enumerate() {
                    s[id * row..(id + 1) * row]
                        .iter_mut()
                        .zip(&g[r * row..(r + 1) * row])
                        .for_each(|(a, b)| *a += b);
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                if rg(*gamma) {
                    send(*gamma, &mut |s| {
                        for (r, row) in g.chunks(d).enumerate() {
                            for j in 0..d {
                                s[j] += row[j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if rg(*beta) {
                    send(*beta, &mut |s| {
                        for row in g.chunks(d) {
                            s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
                if rg(*x) {
                    send(*x, &mut |s| {
                        for (r, row) in g.chunks(d).enumerate() {
                            let h = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = row[j] * gm[j];
                                mean_dh += dh;
                                mean_dh_h += dh * h[j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = row[j] * gm[j];
                                s[r * d + j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let xs = self.data(*x);
                send(*x, &mut |s| {
                    for ((sv, &v), gv) in s.iter_mut().zip(xs).zip(g) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *sv += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Exp(x) => send(*x, &mut |s| {
                for ((sv, o), gv) in s.iter_mut().zip(out).zip(g) {
                    *sv += gv * o;
                }
            }),
            Op::Log(x) => {
                let xs = self.data(*x);
                send(*x, &mut |s| {
                    for ((sv, v), gv) in s.iter_mut().zip(xs).zip(g) {
                        *sv += gv / v;
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                send(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d))
                    {
                        let dotp: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().unwrap();
                send(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d))
                    {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..d {
                            srow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Sum(x) => send(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let c = g[0] / numel_of(*x).max(1) as f64;
                send(*x, &mut |s| s.iter_mut().for_each(|v| *v += c));
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => send(*x, &mut |s| {
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for i in 0..*inner {
                            s[base + i] += g[o * inner + i];
                        }
                    }
                }
            }),
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                send(*x, &mut |s| {
                    for (r, ((srow, yrow), grow)) in s
                        .chunks_mut(d)
                        .zip(out.chunks(d))
                        .zip(g.chunks(d))
                        .enumerate()
                    {
                        let dotp: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            srow[j] += (grow[j] - yrow[j] * dotp) / norms[r];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => send(*x, &mut |s| {
                for ((sv, m), gv) in s.iter_mut().zip(mask).zip(g) {
                    *sv += gv * m;
                }
            }),
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidHyperparameter(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    if p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

fn bcast_for(out: &[usize], input: &[usize]) -> Bcast {
    if out == input {
        return Bcast::Same;
    }
    let n = numel(input);
    if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
        return Bcast::Suffix(n.max(1));
    }
    // General case: strides of the input aligned to the output, 0 on broadcast axes.
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        if input[i] != 1 {
            strides[oi] = acc;
        }
        acc *= input[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(map)
}

fn reduce_into(dst: &mut [f64], g: &[f64], b: &Bcast, sign: f64) {
    match b {
        Bcast::Same => dst.iter_mut().zip(g).for_each(|(a, v)| *a += sign * v),
        _ => {
            for (k, v) in g.iter().enumerate() {
                dst[b.index(k)] += sign * v;
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // Innermost output axis is copied in a tight loop.
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    while out.len() < total {
        for i in 0..inner_len {
            out.push(src[pos + i * inner_stride]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
