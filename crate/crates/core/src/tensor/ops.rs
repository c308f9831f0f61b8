//! Elementwise, linear-algebra, reduction and activation operations.

use std::cell::Cell;

use super::tape::{BackwardCtx, GradFn, Tape, Var};
use super::{gemm, strides, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

thread_local! {
    static SIGMOID_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the sigmoid gradient rule on the current thread. Exists so
/// tests can confirm the gradient checker notices a broken rule.
#[doc(hidden)]
pub fn set_sigmoid_gradient_fault(on: bool) {
    SIGMOID_FAULT.with(|f| f.set(on));
}

pub(crate) fn sigmoid_fault() -> bool {
    SIGMOID_FAULT.with(|f| f.get())
}

/// Calls `f(off_a, off_b)` for every multi-index of `shape` in row-major order,
/// where each offset is the dot product of the index with the given strides.
pub(crate) fn walk(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    walk_rows(shape, sa, sb, |oa, ob, len, la, lb| {
        for t in 0..len {
            f(oa + t * la, ob + t * lb);
        }
    });
}

/// Row-wise form of [`walk`]: `f(off_a, off_b, len, step_a, step_b)` covers
/// `len` consecutive multi-indices along the innermost (merged) axis.
pub(crate) fn walk_rows(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    // merge axes that are laid out contiguously for both operands
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(shape.len());
    for ((&n, &a), &b) in shape.iter().zip(sa).zip(sb) {
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(last) if last.1 == a * n && last.2 == b * n => {
                *last = (last.0 * n, a, b);
            }
            _ => dims.push((n, a, b)),
        }
    }
    let Some(&(len, la, lb)) = dims.last() else {
        f(0, 0, 1, 0, 0);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        f(oa, ob, len, la, lb);
        let mut ax = outer.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            let (n, a, b) = outer[ax];
            idx[ax] += 1;
            oa += a;
            ob += b;
            if idx[ax] < n {
                break;
            }
            oa -= a * n;
            ob -= b * n;
            idx[ax] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along expanded axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

struct Binary {
    kind: BinaryKind,
}

impl<T: Real> GradFn<T> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let out = g.shape();
        let mut ga = ctx.needs(0).then(|| Tensor::zeros_like(a));
        let mut gb = ctx.needs(1).then(|| Tensor::zeros_like(b));
        let gd = g.data();
        if a.shape() == out && b.shape() == out {
            if let Some(ga) = ga.as_mut() {
                for (i, d) in ga.data_mut().iter_mut().enumerate() {
                    *d = match self.kind {
                        BinaryKind::Mul => gd[i] * b.data()[i],
                        _ => gd[i],
                    };
                }
            }
            if let Some(gb) = gb.as_mut() {
                for (i, d) in gb.data_mut().iter_mut().enumerate() {
                    *d = match self.kind {
                        BinaryKind::Add => gd[i],
                        BinaryKind::Sub => -gd[i],
                        BinaryKind::Mul => gd[i] * a.data()[i],
                    };
                }
            }
            return Ok(vec![ga, gb]);
        }
        let sa = broadcast_strides(a.shape(), out);
        let sb = broadcast_strides(b.shape(), out);
        let (ad, bd) = (a.data(), b.data());
        let kind = self.kind;
        let mut o = 0;
        walk_rows(out, &sa, &sb, |oa, ob, len, la, lb| {
            let grow = &gd[o..o + len];
            o += len;
            if let Some(ga) = ga.as_mut() {
                let gad = ga.data_mut();
                for (t, &gv) in grow.iter().enumerate() {
                    let v = &mut gad[oa + t * la];
                    *v = *v + match kind {
                        BinaryKind::Mul => gv * bd[ob + t * lb],
                        _ => gv,
                    };
                }
            }
            if let Some(gb) = gb.as_mut() {
                let gbd = gb.data_mut();
                if lb == 0 {
                    let mut acc = gbd[ob];
                    for (t, &gv) in grow.iter().enumerate() {
                        acc = acc + match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * ad[oa + t * la],
                        };
                    }
                    gbd[ob] = acc;
                } else {
                    for (t, &gv) in grow.iter().enumerate() {
                        let v = &mut gbd[ob + t * lb];
                        *v = *v + match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * ad[oa + t * la],
                        };
                    }
                }
            }
        });
        Ok(vec![ga, gb])
    }
}

struct Scale<T> {
    factor: T,
}

impl<T: Real> GradFn<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.map(|v| v * self.factor))])
    }
}

struct Matmul;

fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

impl<T: Real> GradFn<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let ga = if ctx.needs(0) {
            let bt = transpose(k, n, b.data());
            let mut out = vec![T::zero(); m * k];
            gemm(m, n, k, g.data(), &bt, &mut out);
            Some(Tensor::new(a.shape(), out)?)
        } else {
            None
        };
        let gb = if ctx.needs(1) {
            let at = transpose(m, k, a.data());
            let mut out = vec![T::zero(); k * n];
            gemm(k, m, n, &at, g.data(), &mut out);
            Some(Tensor::new(b.shape(), out)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

struct Reduce {
    kind: ReduceKind,
    out_strides: Vec<usize>,
    count: usize,
    argmax: Vec<usize>,
}

impl<T: Real> GradFn<T> for Reduce {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "reduce_sum",
            ReduceKind::Mean => "reduce_mean",
            ReduceKind::Max => "reduce_max",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.input(0);
        let mut gx = Tensor::zeros_like(x);
        let gd = g.data();
        match self.kind {
            ReduceKind::Max => {
                for (o, &i) in self.argmax.iter().enumerate() {
                    gx.data_mut()[i] = gx.data()[i] + gd[o];
                }
            }
            kind => {
                let scale = if kind == ReduceKind::Mean {
                    T::one() / T::of(self.count as f64)
                } else {
                    T::one()
                };
                let xs = strides(x.shape());
                let out = gx.data_mut();
                walk(x.shape(), &xs, &self.out_strides, |i, o| {
                    out[i] = gd[o] * scale;
                });
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct Reshape;

impl<T: Real> GradFn<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone().reshape(ctx.input(0).shape())?)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

impl<T: Real> GradFn<T> for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = ctx.output().data();
        let mut gx = g.clone();
        let sign = if *self == Unary::Sigmoid && sigmoid_fault() {
            -T::one()
        } else {
            T::one()
        };
        for (d, &yv) in gx.data_mut().iter_mut().zip(y) {
            *d = *d * match self {
                Unary::Relu => {
                    if yv > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Unary::Sigmoid => sign * yv * (T::one() - yv),
                Unary::Tanh => T::one() - yv * yv,
            };
        }
        Ok(vec![Some(gx)])
    }
}

/// Softmax over contiguous groups of `group` elements.
struct GroupSoftmax {
    group: usize,
    log: bool,
}

impl<T: Real> GradFn<T> for GroupSoftmax {
    fn name(&self) -> &'static str {
        if self.log {
            "log_softmax"
        } else {
            "softmax_spatial"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = ctx.output().data();
        let mut gx = Tensor::zeros_like(g);
        for ((gx, gy), y) in gx
            .data_mut()
            .chunks_mut(self.group)
            .zip(g.data().chunks(self.group))
            .zip(y.chunks(self.group))
        {
            if self.log {
                let total: T = gy.iter().copied().sum();
                for i in 0..gx.len() {
                    gx[i] = gy[i] - y[i].exp() * total;
                }
            } else {
                let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for i in 0..gx.len() {
                    gx[i] = y[i] * (gy[i] - dot);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

struct Pick {
    index: Vec<usize>,
    classes: usize,
}

impl<T: Real> GradFn<T> for Pick {
    fn name(&self) -> &'static str {
        "pick"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = Tensor::zeros_like(ctx.input(0));
        for (n, &k) in self.index.iter().enumerate() {
            gx.data_mut()[n * self.classes + k] = g.data()[n];
        }
        Ok(vec![Some(gx)])
    }
}

impl<T: Real> Tape<T> {
    /// Elementwise `a (op) b` with singleton-axis broadcasting on either side.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let (ad, bd) = (av.data(), bv.data());
            walk_rows(&out_shape, &sa, &sb, |oa, ob, len, la, lb| match (la, lb) {
                (1, 0) => data.extend(ad[oa..oa + len].iter().map(|&x| f(x, bd[ob]))),
                (0, 1) => data.extend(bd[ob..ob + len].iter().map(|&y| f(ad[oa], y))),
                (1, 1) => data.extend(ad[oa..oa + len].iter().zip(&bd[ob..ob + len]).map(|(&x, &y)| f(x, y))),
                _ => data.extend((0..len).map(|t| f(ad[oa + t * la], bd[ob + t * lb]))),
            });
            data
        };
        let value = Tensor::new(&out_shape, data)?;
        self.push(value, vec![a, b], Box::new(Binary { kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, vec![a], Box::new(Scale { factor }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul needs [m,k]·[k,n], got {:?}·{:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), bv.data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, vec![a, b], Box::new(Matmul))
    }

    /// Reduces over `axes`, removing them from the shape. Max records the
    /// lowest flat index among tied maxima for the backward pass.
    pub fn reduce(&mut self, a: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let x = self.value(a);
        if axes.is_empty() {
            return Err(Error::Domain("empty reduction axis list".into()));
        }
        let rank = x.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Shape(format!(
                    "axis {ax} out of range for shape {:?}",
                    x.shape()
                )));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&i| !reduced[i])
            .map(|i| x.shape()[i])
            .collect();
        let out_compact = strides(&out_shape);
        let mut out_strides = vec![0; rank];
        let mut j = 0;
        for i in 0..rank {
            if !reduced[i] {
                out_strides[i] = out_compact[j];
                j += 1;
            }
        }
        let n_out: usize = out_shape.iter().product();
        let count = x.len() / n_out;
        let xs = strides(x.shape());
        let xd = x.data();
        let mut out = vec![T::zero(); n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                walk(x.shape(), &xs, &out_strides, |i, o| out[o] = out[o] + xd[i]);
                if kind == ReduceKind::Mean {
                    let c = T::of(count as f64);
                    for v in &mut out {
                        *v = *v / c;
                    }
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; n_out];
                walk(x.shape(), &xs, &out_strides, |i, o| {
                    if argmax[o] == usize::MAX || xd[i] > out[o] {
                        out[o] = xd[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(
            value,
            vec![a],
            Box::new(Reduce {
                kind,
                out_strides,
                count,
                argmax,
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(a, &axes, ReduceKind::Sum)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(a, &axes, ReduceKind::Mean)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, vec![a], Box::new(Reshape))
    }

    fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        let value = self.value(a).map(|v| match op {
            Unary::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Tanh => v.tanh(),
        });
        self.push(value, vec![a], Box::new(op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    fn group_softmax(&mut self, a: Var, group: usize, log: bool) -> Result<Var> {
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(group) {
            let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = chunk.iter().map(|&v| (v - m).exp()).sum();
            if log {
                let lse = total.ln();
                for v in chunk.iter_mut() {
                    *v = *v - m - lse;
                }
            } else {
                for v in chunk.iter_mut() {
                    *v = (*v - m).exp() / total;
                }
            }
        }
        self.push(out, vec![a], Box::new(GroupSoftmax { group, log }))
    }

    /// Softmax over the last two axes (the spatial positions) of each leading index.
    pub fn softmax_spatial(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "softmax_spatial needs at least 2 axes, got {shape:?}"
            )));
        }
        let group = shape[shape.len() - 2] * shape[shape.len() - 1];
        self.group_softmax(a, group, false)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let Some(&group) = shape.last() else {
            return Err(Error::Shape("log_softmax of a scalar".into()));
        };
        self.group_softmax(a, group, true)
    }

    /// `out[n] = a[n, index[n]]` for `a` of shape `[N, K]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || x.shape()[0] != index.len() {
            return Err(Error::Shape(format!(
                "pick needs [N,K] with N = {} indices, got {:?}",
                index.len(),
                x.shape()
            )));
        }
        let classes = x.shape()[1];
        if let Some(&bad) = index.iter().find(|&&k| k >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(n, &k)| x.data()[n * classes + k])
            .collect();
        let value = Tensor::new(&[index.len()], data)?;
        self.push(
            value,
            vec![a],
            Box::new(Pick {
                index: index.to_vec(),
                classes,
            }),
        )
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }
}
