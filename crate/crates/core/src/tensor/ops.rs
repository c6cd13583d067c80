//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::tape::{BackwardFn, Var};
use super::Scalar;
use crate::error::{Error, Result};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<T: Scalar>(op: &str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

/// For every flat index of `out`, the flat index into a tensor of shape `src`
/// broadcast against it (numpy rules, right-aligned).
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut padded = vec![1usize; nd - src.len()];
    padded.extend_from_slice(src);
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..nd).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d + a.len() >= nd { a[d + a.len() - nd] } else { 1 };
        let db = if d + b.len() >= nd { b[d + b.len() - nd] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Sums `g` (laid out like the broadcast output) back onto a source of `len` elements.
fn reduce_to<T: Scalar>(
    g: &[T],
    local: impl Fn(usize) -> T,
    map: Option<&[usize]>,
    len: usize,
) -> Vec<T> {
    match map {
        None => g.iter().enumerate().map(|(i, &gi)| gi * local(i)).collect(),
        Some(map) => {
            let mut out = vec![T::zero(); len];
            for (i, &gi) in g.iter().enumerate() {
                out[map[i]] += gi * local(i);
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

// Fallible ops return `Result`, so they cannot be the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.value(), other.value());
        let map_a = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
        let map_b = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
        let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
        let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
        let n = numel(&out_shape);
        let value: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (va[ia(i)], vb[ib(i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let (len_a, len_b) = (va.len(), vb.len());
        let backward: BackwardFn<T> = Box::new(move |g, mask| {
            let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
            let ga = mask[0].then(|| {
                reduce_to(
                    g,
                    |i| match kind {
                        Binary::Add | Binary::Sub => T::one(),
                        Binary::Mul => vb[ib(i)],
                        Binary::Div => T::one() / vb[ib(i)],
                    },
                    map_a.as_deref(),
                    len_a,
                )
            });
            let gb = mask[1].then(|| {
                reduce_to(
                    g,
                    |i| match kind {
                        Binary::Add => T::one(),
                        Binary::Sub => -T::one(),
                        Binary::Mul => va[ia(i)],
                        Binary::Div => {
                            let y = vb[ib(i)];
                            -va[ia(i)] / (y * y)
                        }
                    },
                    map_b.as_deref(),
                    len_b,
                )
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(out_shape, value, &[self, other], backward))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` expressed from input and output.
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y: Rc<Vec<T>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let y_saved = Rc::clone(&y);
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y_saved.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        });
        let y = Rc::try_unwrap(y).unwrap_or_else(|rc| rc.as_ref().clone());
        self.tape.push(self.shape(), y, &[self], backward)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        let two = T::from_f64_lossy(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        let half = T::from_f64_lossy(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(self, floor: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { T::one() } else { T::zero() },
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64_lossy(0.044715);
        let half = T::from_f64_lossy(0.5);
        let three = T::from_f64_lossy(3.0);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        let value = self.value().as_ref().clone();
        let backward: BackwardFn<T> = Box::new(|g, _| vec![Some(g.to_vec())]);
        Ok(self.tape.push(shape.to_vec(), value, &[self], backward))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let mut in_strides = vec![1usize; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; nd];
        let mut offset = 0usize;
        for _ in 0..total {
            src.push(offset);
            for d in (0..nd).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let x = self.value();
        let value = src.iter().map(|&s| x[s]).collect();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = vec![T::zero(); total];
            for (i, &s) in src.iter().enumerate() {
                out[s] = g[i];
            }
            vec![Some(out)]
        });
        Ok(self.tape.push(out_shape, value, &[self], backward))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least 2 axes".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = x.len();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        });
        Ok(self.tape.push(out_shape, value, &[self], backward))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tape = first.tape;
        let base_shape = first.shape();
        if axis >= base_shape.len() {
            return Err(Error::Dimension(format!("concat axis {axis} out of range")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!(
                    "cannot concat {s:?} with {base_shape:?} along axis {axis}"
                )));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let total_len: usize = lens.iter().sum();
        let values: Vec<Rc<Vec<T>>> = parts.iter().map(|p| p.value()).collect();
        let mut value = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                value.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total_len;
        let backward: BackwardFn<T> = Box::new(move |g, mask| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                if mask[k] {
                    let mut gk = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let start = (o * total_len + offset) * inner;
                        gk.extend_from_slice(&g[start..start + l * inner]);
                    }
                    grads.push(Some(gk));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        });
        Ok(tape.push(out_shape, value, parts, backward))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.len();
        let s = x.iter().copied().sum();
        let backward: BackwardFn<T> = Box::new(move |g, _| vec![Some(vec![g[0]; n])]);
        self.tape.push(vec![1], vec![s], &[self], backward)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.numel()).expect("size");
        self.sum().scale(T::one() / n)
    }

    /// Sum along `axis`; the axis is kept with length 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let acc = &mut value[o * inner..(o + 1) * inner];
                acc.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(out)]
        });
        Ok(self.tape.push(out_shape, value, &[self], backward))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("axis {axis} out of range for {shape:?}")))?;
        Ok(self
            .sum_axis(axis, keepdim)?
            .scale(T::one() / T::from_usize(n).expect("size")))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, &a, false, &b, false, &mut value, T::zero());
        let backward: BackwardFn<T> = Box::new(move |g, mask| {
            let ga = mask[0].then(|| {
                let mut out = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, &b, true, &mut out, T::zero());
                out
            });
            let gb = mask[1].then(|| {
                let mut out = vec![T::zero(); k * n];
                T::gemm(k, m, n, &a, true, g, false, &mut out, T::zero());
                out
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(vec![m, n], value, &[self, other], backward))
    }

    /// Batched matrix product of `[g, m, k]` and `[g, k, n]`.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (groups, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (a, b) = (self.value(), other.value());
        let mut value = vec![T::zero(); groups * m * n];
        for i in 0..groups {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..],
                false,
                &b[i * k * n..],
                false,
                &mut value[i * m * n..],
                T::zero(),
            );
        }
        let backward: BackwardFn<T> = Box::new(move |g, mask| {
            let ga = mask[0].then(|| {
                let mut out = vec![T::zero(); groups * m * k];
                for i in 0..groups {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &b[i * k * n..],
                        true,
                        &mut out[i * m * k..],
                        T::zero(),
                    );
                }
                out
            });
            let gb = mask[1].then(|| {
                let mut out = vec![T::zero(); groups * k * n];
                for i in 0..groups {
                    T::gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        true,
                        &g[i * m * n..],
                        false,
                        &mut out[i * k * n..],
                        T::zero(),
                    );
                }
                out
            });
            vec![ga, gb]
        });
        Ok(self
            .tape
            .push(vec![groups, m, n], value, &[self, other], backward))
    }

    /// Softmax along `axis`, stabilised by max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if axis >= nd {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range")));
        }
        if axis == nd - 1 {
            return self.softmax_last();
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(axis, nd - 1);
        self.permute(&axes)?.softmax_last()?.permute(&axes)
    }

    fn softmax_last(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape.last().expect("non-empty shape");
        let x = self.value();
        check_finite("softmax", &x)?;
        let mut y = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (yi, &xi) in yr.iter_mut().zip(xr) {
                *yi = (xi - max).exp();
                z += *yi;
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        let y = Rc::new(y);
        let saved = Rc::clone(&y);
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = vec![T::zero(); g.len()];
            for ((gr, yr), or) in g.chunks(n).zip(saved.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(out)]
        });
        let y = Rc::try_unwrap(y).unwrap_or_else(|rc| rc.as_ref().clone());
        Ok(self.tape.push(shape, y, &[self], backward))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape.last().expect("non-empty shape");
        let x = self.value();
        check_finite("log_softmax", &x)?;
        let mut y = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (yi, &xi) in yr.iter_mut().zip(xr) {
                *yi = xi - lse;
            }
        }
        let y = Rc::new(y);
        let saved = Rc::clone(&y);
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = vec![T::zero(); g.len()];
            for ((gr, yr), or) in g.chunks(n).zip(saved.chunks(n)).zip(out.chunks_mut(n)) {
                let total: T = gr.iter().copied().sum();
                for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = gi - yi.exp() * total;
                }
            }
            vec![Some(out)]
        });
        let y = Rc::try_unwrap(y).unwrap_or_else(|rc| rc.as_ref().clone());
        Ok(self.tape.push(shape, y, &[self], backward))
    }

    /// Softmax over the last axis restricted to entries where `mask` is set;
    /// masked-out entries are 0 and an all-false row yields all zeros.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape.last().expect("non-empty shape");
        let x = self.value();
        if mask.len() != x.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for shape {shape:?}",
                mask.len()
            )));
        }
        check_finite("masked_softmax", &x)?;
        let mut y = vec![T::zero(); x.len()];
        for ((xr, mr), yr) in x.chunks(n).zip(mask.chunks(n)).zip(y.chunks_mut(n)) {
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for ((yi, &xi), &m) in yr.iter_mut().zip(xr).zip(mr) {
                if m {
                    *yi = (xi - max).exp();
                    z += *yi;
                }
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        let y = Rc::new(y);
        let saved = Rc::clone(&y);
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut out = vec![T::zero(); g.len()];
            for ((gr, yr), or) in g.chunks(n).zip(saved.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in or.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(out)]
        });
        let y = Rc::try_unwrap(y).unwrap_or_else(|rc| rc.as_ref().clone());
        Ok(self.tape.push(shape, y, &[self], backward))
    }

    /// Standardises each row along the last axis with population statistics,
    /// then applies the optional per-channel scale and shift.
    pub fn layer_norm(
        self,
        gamma: Option<Var<'t, T>>,
        beta: Option<Var<'t, T>>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c = *shape.last().expect("non-empty shape");
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if p.numel() != c {
                    return Err(Error::Dimension(format!(
                        "layer_norm {name} has {} elements, expected {c}",
                        p.numel()
                    )));
                }
            }
        }
        let x = self.value();
        check_finite("layer_norm", &x)?;
        let rows = x.len() / c;
        let cf = T::from_usize(c).expect("size");
        let g_val = gamma.map(|v| v.value());
        let b_val = beta.map(|v| v.value());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                let scaled = g_val.as_ref().map_or(h, |gv| h * gv[j]);
                y[r * c + j] = b_val.as_ref().map_or(scaled, |bv| scaled + bv[j]);
            }
        }
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_gamma, has_beta) = (gamma.is_some(), beta.is_some());
        let backward: BackwardFn<T> = Box::new(move |g, mask| {
            let mut gx = mask[0].then(|| vec![T::zero(); g.len()]);
            let mut ggamma = (has_gamma && mask[1]).then(|| vec![T::zero(); c]);
            let mut gbeta = (has_beta && mask[1 + has_gamma as usize]).then(|| vec![T::zero(); c]);
            let mut dxhat = vec![T::zero(); c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                for j in 0..c {
                    dxhat[j] = g_val.as_ref().map_or(gr[j], |gv| gr[j] * gv[j]);
                    if let Some(gg) = ggamma.as_mut() {
                        gg[j] += gr[j] * hr[j];
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        gb[j] += gr[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let mean_d = dxhat.iter().copied().sum::<T>() / cf;
                    let mean_dh = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            let mut out = vec![gx];
            if has_gamma {
                out.push(ggamma);
            }
            if has_beta {
                out.push(gbeta);
            }
            out
        });
        Ok(self.tape.push(shape, y, &parents, backward))
    }
}
