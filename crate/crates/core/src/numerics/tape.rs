use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::{gelu, gelu_grad, layer_norm_rows, matmul_dims, softmax_in_place, RopeTable};
use super::{axis_split, Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, inv_std: Vec<T> },
    Gelu(usize),
    Silu(usize),
    Rope { x: usize, table: Rc<RopeTable<T>> },
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    Concat(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of a scalar with respect to every recorded value that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let needs_grad = tensor.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &str) -> Result<Var<'_, T>> {
        value.check_finite(name)?;
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node { value: value.with_requires_grad(needs_grad), op, needs_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar, got dims {:?}",
                nodes[loss.id].value.dims()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, delta: Vec<T>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| nodes[i].value.data();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|&x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    acc(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
                Op::AddRow(a, b) => {
                    let width = nodes[*b].value.numel();
                    let mut gb = vec![T::zero(); width];
                    for row in g.chunks(width) {
                        gb.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::MulRow(a, s) => {
                    let sv = val(*s);
                    let av = val(*a);
                    let width = sv.len();
                    let mut gs = vec![T::zero(); width];
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, arow) in g.chunks(width).zip(av.chunks(width)) {
                        for j in 0..width {
                            ga.push(grow[j] * sv[j]);
                            gs[j] += grow[j] * arow[j];
                        }
                    }
                    acc(*a, ga);
                    acc(*s, gs);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
                Op::AddScalar(a) => acc(*a, g),
                Op::Bmm { a, b, batch, m, k, n, transpose_b } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].needs_grad {
                        let mut ga = vec![T::zero(); batch * m * k];
                        for i in 0..*batch {
                            let gb_ = &g[i * m * n..(i + 1) * m * n];
                            let bb = &bv[i * k * n..(i + 1) * k * n];
                            let b_strides = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                            T::gemm(m, n, k, gb_, (n as isize, 1), bb, b_strides, T::zero(), &mut ga[i * m * k..(i + 1) * m * k], k as isize);
                        }
                        acc(*a, ga);
                    }
                    if nodes[*b].needs_grad {
                        let mut gbv = vec![T::zero(); batch * k * n];
                        for i in 0..*batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let out = &mut gbv[i * k * n..(i + 1) * k * n];
                            if *transpose_b {
                                T::gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), T::zero(), out, k as isize);
                            } else {
                                T::gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), T::zero(), out, n as isize);
                            }
                        }
                        acc(*b, gbv);
                    }
                }
                Op::Softmax { x, outer, len, inner } => {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let width = y.len() / inv_std.len();
                    let w = T::of(width as f64);
                    let mut dx = Vec::with_capacity(y.len());
                    for ((grow, yrow), &inv) in g.chunks(width).zip(y.chunks(width)).zip(inv_std) {
                        let mean_g = grow.iter().copied().sum::<T>() / w;
                        let mean_gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / w;
                        dx.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| inv * (gi - mean_g - yi * mean_gy)));
                    }
                    acc(*x, dx);
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    acc(*x, g.iter().zip(xv).map(|(&g, &x)| g * gelu_grad(x)).collect());
                }
                Op::Silu(x) => {
                    let xv = val(*x);
                    acc(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&g, &x)| {
                                let s = T::one() / (T::one() + (-x).exp());
                                g * s * (T::one() + x * (T::one() - s))
                            })
                            .collect(),
                    );
                }
                Op::Rope { x, table } => {
                    let mut dx = g;
                    table.rotate(&mut dx, true);
                    acc(*x, dx);
                }
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let gt = Tensor::new(node.value.dims(), g)?;
                    acc(*x, gt.permute(&inverse)?.into_data());
                }
                Op::Reshape(x) => acc(*x, g),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        acc(p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = &nodes[*x].value;
                    let row = src.numel() / src.dims()[0];
                    let mut dx = vec![T::zero(); src.numel()];
                    dx[start * row..start * row + g.len()].copy_from_slice(&g);
                    acc(*x, dx);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.numel()]),
                Op::Mean(x) => {
                    let n = nodes[*x].value.numel();
                    acc(*x, vec![g[0] / T::of(n as f64); n]);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.dims(), g).expect("grad dims")))
            .collect();
        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract_err!("vars from different tapes"))
        }
    }

    fn binary(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        self.same_tape(&other)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            a.zip_map(&b, f)?
        };
        self.tape.push(out, op, &[self.id, other.id], name)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_op(self, row: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        self.same_tape(&row)?;
        let out = {
            let (a, r) = (self.value(), row.value());
            let width = r.numel();
            if a.dims().last() != Some(&width) {
                return Err(shape_err!("{name}: row of {width} against {:?}", a.dims()));
            }
            let mut out = a.clone();
            for chunk in out.data_mut().chunks_mut(width) {
                chunk.iter_mut().zip(r.data()).for_each(|(x, &y)| *x = f(*x, y));
            }
            out
        };
        self.tape.push(out, op, &[self.id, row.id], name)
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(self, row: Var<'t, T>) -> Result<Self> {
        self.row_op(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row (last axis) elementwise by a vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Self> {
        self.row_op(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let out = self.value().map(|x| x * c);
        self.tape.push(out, Op::Scale(self.id, c), &[self.id], "scale")
    }

    pub fn add_scalar(self, c: T) -> Result<Self> {
        let out = self.value().map(|x| x + c);
        self.tape.push(out, Op::AddScalar(self.id), &[self.id], "add_scalar")
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other)?;
        let (m, k, n) = matmul_dims(&self.dims(), &other.dims())?;
        self.bmm_impl(other, 1, m, k, n, false, &[m, n])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// when `transpose_b` is set.
    pub fn bmm(self, other: Var<'t, T>, transpose_b: bool) -> Result<Self> {
        self.same_tape(&other)?;
        let (ad, bd) = (self.dims(), other.dims());
        let (batch, m, k, n) = match (&ad[..], &bd[..]) {
            ([b1, m, k], [b2, x, y]) if b1 == b2 => {
                let (k2, n) = if transpose_b { (*y, *x) } else { (*x, *y) };
                if *k != k2 {
                    return Err(shape_err!("bmm {ad:?} x {bd:?} (transpose_b={transpose_b})"));
                }
                (*b1, *m, *k, n)
            }
            _ => return Err(shape_err!("bmm {ad:?} x {bd:?}")),
        };
        self.bmm_impl(other, batch, m, k, n, transpose_b, &[batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(
        self,
        other: Var<'t, T>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        out_dims: &[usize],
    ) -> Result<Self> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let mut out = vec![T::zero(); batch * m * n];
            let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &b.data()[i * k * n..(i + 1) * k * n],
                    b_strides,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                );
            }
            Tensor::new(out_dims, out)?
        };
        let op = Op::Bmm { a: self.id, b: other.id, batch, m, k, n, transpose_b };
        self.tape.push(out, op, &[self.id, other.id], "matmul")
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.dims(), axis)?;
        let mut out = self.value().clone();
        softmax_in_place(out.data_mut(), outer, len, inner);
        self.tape.push(out, Op::Softmax { x: self.id, outer, len, inner }, &[self.id], "softmax")
    }

    /// Normalizes each row over the last axis (no affine part).
    pub fn layer_norm(self, eps: T) -> Result<Self> {
        let (out, inv_std) = layer_norm_rows(&self.value(), eps);
        self.tape.push(out, Op::LayerNorm { x: self.id, inv_std }, &[self.id], "layer_norm")
    }

    pub fn gelu(self) -> Result<Self> {
        let out = self.value().map(gelu);
        self.tape.push(out, Op::Gelu(self.id), &[self.id], "gelu")
    }

    pub fn silu(self) -> Result<Self> {
        let out = self.value().map(|x| x / (T::one() + (-x).exp()));
        self.tape.push(out, Op::Silu(self.id), &[self.id], "silu")
    }

    /// Rotary embedding on a `[tokens, ..., head_dim]` value.
    pub fn rope(self, table: &Rc<RopeTable<T>>) -> Result<Self> {
        let out = table.apply(&self.value())?;
        self.tape.push(out, Op::Rope { x: self.id, table: Rc::clone(table) }, &[self.id], "rope")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let out = self.value().permute(perm)?;
        self.tape.push(out, Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id], "permute")
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let out = self.value().clone().reshape(dims)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Concatenates along axis 0; trailing dims must agree.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = *parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let (out, ids) = {
            let tail = first.dims()[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            let mut ids = Vec::with_capacity(parts.len());
            for p in parts {
                first.same_tape(p)?;
                let v = p.value();
                if v.dims()[1..] != tail[..] {
                    return Err(shape_err!("concat {:?} with trailing {tail:?}", v.dims()));
                }
                rows += v.dims()[0];
                data.extend_from_slice(v.data());
                ids.push(p.id);
            }
            let mut dims = vec![rows];
            dims.extend(tail);
            (Tensor::new(&dims, data)?, ids)
        };
        first.tape.push(out, Op::Concat(ids.clone()), &ids, "concat")
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let out = {
            let v = self.value();
            let rows = v.dims()[0];
            if len == 0 || start + len > rows {
                return Err(shape_err!("slice [{start}, {}) of {rows} rows", start + len));
            }
            let row = v.numel() / rows;
            let mut dims = v.dims().to_vec();
            dims[0] = len;
            Tensor::new(&dims, v.data()[start * row..(start + len) * row].to_vec())?
        };
        self.tape.push(out, Op::SliceRows { x: self.id, start }, &[self.id], "slice_rows")
    }

    pub fn sum(self) -> Result<Self> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Self> {
        let out = {
            let v = self.value();
            Tensor::scalar(v.sum() / T::of(v.numel() as f64))
        };
        self.tape.push(out, Op::Mean(self.id), &[self.id], "mean")
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Self> {
        self.matmul(w)?.add_row(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = x.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = x.add(x).unwrap().mul(x).unwrap().sum().unwrap(); // 2x^2
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[f64::MAX]));
        assert!(x.add(x).is_err());
    }
}
