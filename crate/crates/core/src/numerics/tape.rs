//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates adjoints into each input that leads back
//! to a `requires_grad` leaf.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse op family, used to target the fault-injection hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Scale,
    MulConst,
    Relu,
    Softmax,
    LayerNorm,
    Cosine,
    NormalizeRows,
    SliceCols,
    ConcatCols,
    ConcatRows,
    Sum,
    Gather,
    Sparse,
}

/// Deliberate adjoint corruption for negative-control tests of the
/// gradient checker. Every input adjoint produced by ops of `kind` is scaled
/// by `factor`.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub kind: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Cosine {
        u: Var,
        v: Var,
        eps: T,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    /// Linear map given as `(input index, output index, coefficient)` triples;
    /// used by selection-based ops (max pooling, hinge routing).
    Sparse {
        x: Var,
        routes: Vec<(usize, usize, T)>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sparse { .. } => OpKind::Sparse,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
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

    /// Gradient for `v`, or zeros of `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

/// Records ops for one loss evaluation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

fn two_d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent");
        value.set_requires_grad(needs);
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = two_d("transpose", self.shape(a))?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs))
    }

    /// Adds the vector `b` to every row of the 2-D `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = two_d("add_row", self.shape(x))?;
        if self.value(b).numel() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bd).for_each(|(o, &bb)| *o = *o + bb);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(x, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("same numel"),
            Op::Scale(a, c),
            needs,
        )
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(&c)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(a, c), needs))
    }

    /// Zeroes the rows of a 2-D tensor where `keep[i]` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = two_d("mask_rows", self.shape(x))?;
        if keep.len() != r {
            return Err(Error::shape("mask_rows", self.shape(x), &[keep.len()]));
        }
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let mut m = Vec::with_capacity(r * c);
        for &k in keep {
            let v = if k { T::one() } else { T::zero() };
            m.extend(std::iter::repeat(v).take(c));
        }
        self.mul_const(x, m)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("same numel"),
            Op::Relu(a),
            needs,
        )
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() >= rate {
                    keep_scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(data[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (data[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[1]))?;
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let data = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::lit(d as f64);
        let rows = data.len() / d;
        let mut xhat = vec![T::zero(); data.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// `uᵀv / (max(‖u‖, eps) · max(‖v‖, eps))` as a scalar.
    pub fn cosine(&mut self, u: Var, v: Var, eps: T) -> Result<Var> {
        if self.value(u).numel() != self.value(v).numel() || self.value(u).numel() == 0 {
            return Err(Error::shape("cosine", self.shape(u), self.shape(v)));
        }
        let c = cosine_raw(self.value(u).data(), self.value(v).data(), eps);
        let needs = self.needs(u) || self.needs(v);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { u, v, eps }, needs))
    }

    /// Divides every row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (r, c) = two_d("normalize_rows", self.shape(x))?;
        let data = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let norm = l2(row);
            norms.push(norm);
            let denom = norm.max(eps);
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::NormalizeRows { x, norms, eps },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = two_d("slice_cols", self.shape(x))?;
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&data[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (r, _) = two_d("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = two_d("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, c) = two_d("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = two_d("concat_rows", self.shape(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .copied()
            .fold(T::zero(), |a, v| a + v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// `Σ x ⊙ w` for a constant weight vector.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let p = self.mul_const(x, w)?;
        Ok(self.sum(p))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = two_d("gather_rows", self.shape(table))?;
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Vocabulary { id, size: r });
            }
            out.extend_from_slice(&data[id * c..(id + 1) * c]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Records `out[o] = Σ coef · x[i]` over `routes`, with output `shape`.
    pub fn sparse_linear(
        &mut self,
        x: Var,
        shape: Vec<usize>,
        routes: Vec<(usize, usize, T)>,
    ) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let xn = self.value(x).numel();
        let data = self.value(x).data();
        let mut out = vec![T::zero(); numel];
        for &(i, o, c) in &routes {
            if i >= xn || o >= numel {
                return Err(Error::shape("sparse_linear", &[xn], &[numel]));
            }
            out[o] = out[o] + c * data[i];
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sparse { x, routes }, needs))
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let cv = self.constant(c);
        self.add(x, cv)
    }

    /// Computes adjoints of the scalar `loss` with respect to every node that
    /// leads back to a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let factor = match self.fault {
            Some(f) if f.kind == node.op.kind() => Some(T::lit(f.factor)),
            _ => None,
        };
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let contrib = match factor {
                Some(f) => contrib.into_iter().map(|c| c * f).collect(),
                None => contrib,
            };
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contrib)
                    .for_each(|(e, &c)| *e = *e + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.to_vec());
                let c = self.value(*b).numel();
                let mut gb = vec![T::zero(); c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                }
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::MulConst(a, m) => acc(*a, g.iter().zip(m).map(|(&v, &w)| v * w).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let mut dot = T::zero();
                        for k in 0..*len {
                            dot = dot + g[at(k)] * y[at(k)];
                        }
                        for k in 0..*len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let n = T::lit(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = T::zero();
                    let mut mean_gh = T::zero();
                    for j in 0..d {
                        let gg = gr[j] * gv[j];
                        mean_g = mean_g + gg;
                        mean_gh = mean_gh + gg * hr[j];
                        dgain[j] = dgain[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    mean_g = mean_g / n;
                    mean_gh = mean_gh / n;
                    for j in 0..d {
                        let gg = gr[j] * gv[j];
                        dx[r * d + j] = is * (gg - mean_g - hr[j] * mean_gh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Cosine { u, v, eps } => {
                let ud = self.value(*u).data();
                let vd = self.value(*v).data();
                let nu = l2(ud);
                let nv = l2(vd);
                let du_ = nu.max(*eps);
                let dv_ = nv.max(*eps);
                let c = out.item();
                let go = g[0];
                let denom = du_ * dv_;
                let grad_of = |a: &[T], b: &[T], na: T| -> Vec<T> {
                    a.iter()
                        .zip(b)
                        .map(|(&ai, &bi)| {
                            let mut d = bi / denom;
                            if na > *eps {
                                d = d - c * ai / (na * na);
                            }
                            d * go
                        })
                        .collect()
                };
                acc(*u, grad_of(ud, vd, nu));
                acc(*v, grad_of(vd, ud, nv));
            }
            Op::NormalizeRows { x, norms, eps } => {
                let c = self.shape(*x)[1];
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    if norm > *eps {
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |a, (&yy, &gg)| a + yy * gg);
                        for j in 0..c {
                            dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / *eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = out.cols();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    acc(p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Gather { table, ids } => {
                let c = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] = dt[id * c + j] + g[row * c + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Sparse { x, routes } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for &(i, o, c) in routes {
                    dx[i] = dx[i] + c * g[o];
                }
                acc(*x, dx);
            }
        }
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
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
    out
}

pub(crate) fn transpose_raw<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn l2<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
}

pub(crate) fn cosine_raw<T: Real>(u: &[T], v: &[T], eps: T) -> T {
    let dot = u.iter().zip(v).fold(T::zero(), |a, (&x, &y)| a + x * y);
    dot / (l2(u).max(eps) * l2(v).max(eps))
}
