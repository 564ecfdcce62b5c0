//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append a node per result; [`Tape::backward`] walks the records
//! in exact reverse execution order and accumulates adjoints, so gradients of
//! tensors feeding several consumers add up instead of overwriting, and the
//! traversal order is deterministic.
//!
//! A tape and its variables are confined to one thread; run independent model
//! replicas on independent tapes if parallelism is needed.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: F },
    AddConst { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Abs { a: Var },
    Ln { a: Var },
    Pick { a: Var, index: usize },
    Sum { a: Var },
    MaskedSoftmax { a: Var, mask: Vec<bool> },
    Lookup { table: Var, ids: Vec<usize> },
    Row { a: Var, index: usize },
    StackRows { rows: Vec<Var> },
    Concat { parts: Vec<Var> },
    WeightedRowSum { weights: Var, rows: Var },
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    ops: Vec<Op<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// backward will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t.shape, t.data, t.requires_grad, Op::Leaf)
    }

    /// Non-differentiable scalar constant.
    pub fn scalar(&mut self, value: F) -> Var {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    /// Scalar payload of a single-element variable.
    pub fn item(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated by the last `backward`, if this node got one.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    /// Copy a variable (with its gradient when present) back out of the tape.
    pub fn extract(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: self.grad(v).map(|g| g.to_vec()),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
        });
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ---- arithmetic ops ----

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let (m, k) = match ash {
            [m, k] => (*m, *k),
            _ => return Err(self.dim_err("matmul", a, b)),
        };
        let (n, vector_rhs) = match bsh {
            [kb, n] if *kb == k => (*n, false),
            [kb] if *kb == k => (1, true),
            _ => return Err(self.dim_err("matmul", a, b)),
        };
        let mut out = vec![F::zero(); m * n];
        matmul_kernel(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let shape = if vector_rhs { vec![m] } else { vec![m, n] };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, req, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product. One side may be a single-element tensor, which is
    /// broadcast over the other (the alpha-times-vector case).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        if self.nodes[a.0].shape != self.nodes[b.0].shape && la != 1 && lb != 1 {
            return Err(self.dim_err("mul", a, b));
        }
        let out: Vec<F> = if la == lb {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x * y)
                .collect()
        } else if la == 1 {
            let s = self.nodes[a.0].data[0];
            self.nodes[b.0].data.iter().map(|&y| s * y).collect()
        } else {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|&x| x * s).collect()
        };
        let shape = if la >= lb {
            self.nodes[a.0].shape.clone()
        } else {
            self.nodes[b.0].shape.clone()
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, req, Op::Mul { a, b }))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.dim_err(name, a, b));
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, req, op))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        self.map(a, |x| x * k, Op::Scale { a, k })
    }

    pub fn add_const(&mut self, a: Var, k: F) -> Var {
        self.map(a, |x| x + k, Op::AddConst { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs { a })
    }

    /// Natural log, floored at the smallest positive value of `F` so a
    /// zero probability yields a large finite loss instead of -inf.
    pub fn ln(&mut self, a: Var) -> Var {
        let floor = F::min_positive_value();
        self.map(a, |x| x.max(floor).ln(), Op::Ln { a })
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(shape, out, req, op)
    }

    /// Single element of a 1-d tensor, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if index >= n {
            return Err(Error::Index {
                what: "pick",
                index,
                bound: n,
            });
        }
        let v = self.nodes[a.0].data[index];
        let req = self.requires(a);
        Ok(self.push(vec![1], vec![v], req, Op::Pick { a, index }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        let req = self.requires(a);
        self.push(vec![1], vec![acc], req, Op::Sum { a })
    }

    /// Softmax over a 1-d tensor with masked positions pinned to exactly 0.
    /// Max-subtraction keeps the exponentials in range.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = &self.nodes[a.0].data;
        if self.nodes[a.0].shape.len() != 1 || mask.len() != x.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut max = F::neg_infinity();
        for (i, &xi) in x.iter().enumerate() {
            if mask[i] && xi > max {
                max = xi;
            }
        }
        if max == F::neg_infinity() {
            return Err(Error::AllMasked);
        }
        let mut out = vec![F::zero(); x.len()];
        let mut denom = F::zero();
        for (i, &xi) in x.iter().enumerate() {
            if mask[i] {
                let e = (xi - max).exp();
                out[i] = e;
                denom += e;
            }
        }
        for o in &mut out {
            *o = *o / denom;
        }
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        Ok(self.push(
            shape,
            out,
            req,
            Op::MaskedSoftmax {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Gather rows of a `[V,d]` table: ids of length n give `[n,d]`.
    /// Backward scatters into the gathered rows only.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        let (v, d) = match shape.as_slice() {
            [v, d] => (*v, *d),
            _ => {
                return Err(Error::Dimension {
                    op: "lookup",
                    lhs: shape,
                    rhs: vec![ids.len()],
                })
            }
        };
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "lookup id",
                    index: id,
                    bound: v,
                });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            req,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Single row of a 2-d tensor as a 1-d tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (r, c) = match self.nodes[a.0].shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Dimension {
                    op: "row",
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: vec![index],
                })
            }
        };
        if index >= r {
            return Err(Error::Index {
                what: "row",
                index,
                bound: r,
            });
        }
        let data = self.nodes[a.0].data[index * c..(index + 1) * c].to_vec();
        let req = self.requires(a);
        Ok(self.push(vec![c], data, req, Op::Row { a, index }))
    }

    /// Stack n same-length vectors into an `[n,d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("stack_rows"));
        }
        let d = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut req = false;
        for &r in rows {
            if self.nodes[r.0].shape.len() != 1 || self.nodes[r.0].data.len() != d {
                return Err(self.dim_err("stack_rows", rows[0], r));
            }
            data.extend_from_slice(&self.nodes[r.0].data);
            req |= self.requires(r);
        }
        Ok(self.push(
            vec![rows.len(), d],
            data,
            req,
            Op::StackRows { rows: rows.to_vec() },
        ))
    }

    /// Concatenate 1-d tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        let mut req = false;
        for &p in parts {
            if self.nodes[p.0].shape.len() != 1 {
                return Err(self.dim_err("concat", parts[0], p));
            }
            data.extend_from_slice(&self.nodes[p.0].data);
            req |= self.requires(p);
        }
        let n = data.len();
        Ok(self.push(
            vec![n],
            data,
            req,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// `weights[l] . rows[l,d] -> [d]`: the attention-weighted context sum.
    pub fn weighted_row_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let l = match self.nodes[weights.0].shape.as_slice() {
            [l] => *l,
            _ => return Err(self.dim_err("weighted_row_sum", weights, rows)),
        };
        let (lr, d) = match self.nodes[rows.0].shape.as_slice() {
            [lr, d] => (*lr, *d),
            _ => return Err(self.dim_err("weighted_row_sum", weights, rows)),
        };
        if l != lr {
            return Err(self.dim_err("weighted_row_sum", weights, rows));
        }
        let w = &self.nodes[weights.0].data;
        let m = &self.nodes[rows.0].data;
        let mut out = vec![F::zero(); d];
        for i in 0..l {
            let wi = w[i];
            for (o, &x) in out.iter_mut().zip(&m[i * d..(i + 1) * d]) {
                *o += wi * x;
            }
        }
        let req = self.requires(weights) || self.requires(rows);
        Ok(self.push(vec![d], out, req, Op::WeightedRowSum { weights, rows }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate in recording
    /// order reversed; call `grad` afterwards to read them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::config(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), Vec::new());
        self.grads[root.0] = vec![F::one()];

        for i in (0..=root.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            // Inputs always precede outputs on the tape, so split at i.
            let (lower, upper) = self.grads.split_at_mut(i);
            let gout = &upper[0];
            propagate(&self.nodes, &self.ops[i], i, gout, lower);
        }
        Ok(())
    }
}

fn matmul_kernel<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn ensure<F: Real>(slot: &mut Vec<F>, len: usize) -> &mut [F] {
    if slot.is_empty() {
        slot.resize(len, F::zero());
    }
    slot.as_mut_slice()
}

/// Adjoint rules for one recorded op. `gout` is dL/d(out); contributions are
/// accumulated into the input slots of `lower` (all inputs have index < out).
fn propagate<F: Real>(nodes: &[Node<F>], op: &Op<F>, out: usize, gout: &[F], lower: &mut [Vec<F>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = if nodes[b.0].shape.len() == 2 {
                nodes[b.0].shape[1]
            } else {
                1
            };
            if nodes[a.0].requires_grad {
                let bdat = &nodes[b.0].data;
                let ga = ensure(&mut lower[a.0], m * k);
                // dA = G . B^T
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    let garow = &mut ga[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let brow = &bdat[kk * n..(kk + 1) * n];
                        let mut acc = F::zero();
                        for (&g, &bv) in grow.iter().zip(brow) {
                            acc += g * bv;
                        }
                        garow[kk] += acc;
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let adat = &nodes[a.0].data;
                let gb = ensure(&mut lower[b.0], k * n);
                // dB = A^T . G
                for i in 0..m {
                    let arow = &adat[i * k..(i + 1) * k];
                    let grow = &gout[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        let gbrow = &mut gb[kk * n..(kk + 1) * n];
                        for (gbv, &g) in gbrow.iter_mut().zip(grow) {
                            *gbv += av * g;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if nodes[v.0].requires_grad {
                    let g = ensure(&mut lower[v.0], gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[a.0].requires_grad {
                let g = ensure(&mut lower[a.0], gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            if nodes[b.0].requires_grad {
                let g = ensure(&mut lower[b.0], gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi -= go;
                }
            }
        }
        Op::Mul { a, b } => {
            let (la, lb) = (nodes[a.0].data.len(), nodes[b.0].data.len());
            if la == lb {
                if nodes[a.0].requires_grad {
                    let bd = &nodes[b.0].data;
                    let g = ensure(&mut lower[a.0], la);
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bd) {
                        *gi += go * bv;
                    }
                }
                if nodes[b.0].requires_grad {
                    let ad = &nodes[a.0].data;
                    let g = ensure(&mut lower[b.0], lb);
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ad) {
                        *gi += go * av;
                    }
                }
            } else {
                // One side is a broadcast scalar.
                let (s, t) = if la == 1 { (a, b) } else { (b, a) };
                if nodes[s.0].requires_grad {
                    let td = &nodes[t.0].data;
                    let mut acc = F::zero();
                    for (&go, &tv) in gout.iter().zip(td) {
                        acc += go * tv;
                    }
                    let g = ensure(&mut lower[s.0], 1);
                    g[0] += acc;
                }
                if nodes[t.0].requires_grad {
                    let sv = nodes[s.0].data[0];
                    let g = ensure(&mut lower[t.0], nodes[t.0].data.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * sv;
                    }
                }
            }
        }
        Op::Scale { a, k } => {
            if nodes[a.0].requires_grad {
                let g = ensure(&mut lower[a.0], gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * *k;
                }
            }
        }
        Op::AddConst { a } => {
            if nodes[a.0].requires_grad {
                let g = ensure(&mut lower[a.0], gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
        }
        Op::Sigmoid { a } => {
            if nodes[a.0].requires_grad {
                let y = &nodes[out].data;
                let g = ensure(&mut lower[a.0], gout.len());
                for ((gi, &go), &yi) in g.iter_mut().zip(gout).zip(y) {
                    *gi += go * yi * (F::one() - yi);
                }
            }
        }
        Op::Tanh { a } => {
            if nodes[a.0].requires_grad {
                let y = &nodes[out].data;
                let g = ensure(&mut lower[a.0], gout.len());
                for ((gi, &go), &yi) in g.iter_mut().zip(gout).zip(y) {
                    *gi += go * (F::one() - yi * yi);
                }
            }
        }
        Op::Abs { a } => {
            if nodes[a.0].requires_grad {
                let x = &nodes[a.0].data;
                let g = ensure(&mut lower[a.0], gout.len());
                for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                    let s = if xi > F::zero() {
                        F::one()
                    } else if xi < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    *gi += go * s;
                }
            }
        }
        Op::Ln { a } => {
            if nodes[a.0].requires_grad {
                let floor = F::min_positive_value();
                let x = &nodes[a.0].data;
                let g = ensure(&mut lower[a.0], gout.len());
                for ((gi, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                    if xi >= floor {
                        *gi += go / xi;
                    }
                }
            }
        }
        Op::Pick { a, index } => {
            if nodes[a.0].requires_grad {
                let g = ensure(&mut lower[a.0], nodes[a.0].data.len());
                g[*index] += gout[0];
            }
        }
        Op::Sum { a } => {
            if nodes[a.0].requires_grad {
                let g = ensure(&mut lower[a.0], nodes[a.0].data.len());
                let go = gout[0];
                for gi in g.iter_mut() {
                    *gi += go;
                }
            }
        }
        Op::MaskedSoftmax { a, mask } => {
            if nodes[a.0].requires_grad {
                let p = &nodes[out].data;
                let mut dot = F::zero();
                for (&pi, &go) in p.iter().zip(gout) {
                    dot += pi * go;
                }
                let g = ensure(&mut lower[a.0], gout.len());
                for i in 0..p.len() {
                    if mask[i] {
                        g[i] += p[i] * (gout[i] - dot);
                    }
                }
            }
        }
        Op::Lookup { table, ids } => {
            if nodes[table.0].requires_grad {
                let d = nodes[table.0].shape[1];
                let g = ensure(&mut lower[table.0], nodes[table.0].data.len());
                for (pos, &id) in ids.iter().enumerate() {
                    let grow = &gout[pos * d..(pos + 1) * d];
                    let trow = &mut g[id * d..(id + 1) * d];
                    for (t, &go) in trow.iter_mut().zip(grow) {
                        *t += go;
                    }
                }
            }
        }
        Op::Row { a, index } => {
            if nodes[a.0].requires_grad {
                let c = nodes[a.0].shape[1];
                let g = ensure(&mut lower[a.0], nodes[a.0].data.len());
                let grow = &mut g[index * c..(index + 1) * c];
                for (t, &go) in grow.iter_mut().zip(gout) {
                    *t += go;
                }
            }
        }
        Op::StackRows { rows } => {
            let d = nodes[out].shape[1];
            for (pos, r) in rows.iter().enumerate() {
                if nodes[r.0].requires_grad {
                    let grow = &gout[pos * d..(pos + 1) * d];
                    let g = ensure(&mut lower[r.0], d);
                    for (t, &go) in g.iter_mut().zip(grow) {
                        *t += go;
                    }
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].data.len();
                if nodes[p.0].requires_grad {
                    let gpart = &gout[offset..offset + len];
                    let g = ensure(&mut lower[p.0], len);
                    for (t, &go) in g.iter_mut().zip(gpart) {
                        *t += go;
                    }
                }
                offset += len;
            }
        }
        Op::WeightedRowSum { weights, rows } => {
            let l = nodes[weights.0].data.len();
            let d = nodes[out].data.len();
            if nodes[weights.0].requires_grad {
                let m = &nodes[rows.0].data;
                let g = ensure(&mut lower[weights.0], l);
                for i in 0..l {
                    let mut acc = F::zero();
                    for (&go, &x) in gout.iter().zip(&m[i * d..(i + 1) * d]) {
                        acc += go * x;
                    }
                    g[i] += acc;
                }
            }
            if nodes[rows.0].requires_grad {
                let w = &nodes[weights.0].data;
                let g = ensure(&mut lower[rows.0], l * d);
                for i in 0..l {
                    let wi = w[i];
                    let grow = &mut g[i * d..(i + 1) * d];
                    for (t, &go) in grow.iter_mut().zip(gout) {
                        *t += wi * go;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape.leaf(t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_selection() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(vec![1, 2], vec![1.0, 0.0]));
        let b = tape.leaf(t64(vec![2, 1], vec![0.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(t64(vec![2, 2], vec![0.0; 4]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half_and_tanh_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![4]));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert!(tape.value(s).iter().all(|&v| v == 0.5));
        assert!(tape.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![3]));
        let p = tape.masked_softmax(z, &[true; 3]).unwrap();
        for &v in tape.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.leaf(Tensor::vector(vec![0.0, (2.0f64).ln()]));
        let p = tape.masked_softmax(x, &[true, true]).unwrap();
        let out = tape.value(p);
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_respects_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![5.0, 1.0, 9.0]));
        let p = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let out = tape.value(p);
        // Direct two-term computation over the unmasked pair.
        let e0 = (5.0f64 - 5.0).exp();
        let e1 = (1.0f64 - 5.0).exp();
        assert!((out[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((out[1] - e1 / (e0 + e1)).abs() < 1e-15);
        assert_eq!(out[2], 0.0);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.masked_softmax(x, &[false, false]),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn softmax_shift_invariance_is_exact() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let shifted = tape.add_const(x, 7.25);
        let p1 = tape.masked_softmax(x, &[true; 4]).unwrap();
        let p2 = tape.masked_softmax(shifted, &[true; 4]).unwrap();
        assert_eq!(tape.value(p1), tape.value(p2));
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        // y = x + x must match y = 2x gradient-for-gradient.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]).with_grad());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g_dup = tape.grad(x).unwrap().to_vec();

        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(Tensor::vector(vec![1.5, -2.0]).with_grad());
        let y2 = tape2.scale(x2, 2.0);
        let s2 = tape2.sum(y2);
        tape2.backward(s2).unwrap();
        assert_eq!(g_dup, tape2.grad(x2).unwrap());
    }

    #[test]
    fn lookup_repeats_rows_and_scatters_gradients() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t64(vec![4, 2], (0..8).map(f64::from).collect()).with_grad());
        let rows = tape.lookup(table, &[0, 0]).unwrap();
        assert_eq!(tape.value(rows), &[0.0, 1.0, 0.0, 1.0]);

        let picked = tape.lookup(table, &[3]).unwrap();
        let s = tape.sum(picked);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn lookup_rejects_out_of_range_id() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t64(vec![2, 2], vec![0.0; 4]));
        match tape.lookup(table, &[5]) {
            Err(Error::Index { index, bound, .. }) => {
                assert_eq!(index, 5);
                assert_eq!(bound, 2);
            }
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn weighted_row_sum_selects_and_mixes() {
        let mut tape = Tape::<f64>::new();
        let rows = tape.leaf(t64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let onehot = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let picked = tape.weighted_row_sum(onehot, rows).unwrap();
        assert_eq!(tape.value(picked), &[3.0, 4.0]);

        let w = tape.leaf(Tensor::vector(vec![0.25, 0.5, 0.25]));
        let mixed = tape.weighted_row_sum(w, rows).unwrap();
        assert_eq!(tape.value(mixed), &[0.25 * 1.0 + 0.5 * 3.0 + 0.25 * 5.0, 0.25 * 2.0 + 0.5 * 4.0 + 0.25 * 6.0]);
    }

    #[test]
    fn ln_floors_at_min_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.ln(x);
        assert!(tape.value(y)[0].is_finite());
        assert_eq!(tape.value(y)[0], f64::MIN_POSITIVE.ln());
    }
}
