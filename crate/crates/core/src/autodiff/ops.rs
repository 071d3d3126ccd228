//! Differentiable operations on [`Var`]s.

use std::rc::Rc;

use super::tape::{BackwardFn, Var};
use super::tensor::{
    gemm, inverse_permutation, log_softmax_rows, permute_data, softmax_rows, split_axis, Tensor,
};
use crate::error::{shape_err, Error, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn boxed<F>(f: F) -> BackwardFn
where
    F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
{
    Box::new(f)
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced inconsistent shape")
}

/// Sums `g` over all leading repeats of a trailing block of `inner` values.
fn reduce_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// `tanh(c (x + k x^3))` via one `exp`, which is cheaper than libm's `tanh`
/// and accurate to a few ulps in absolute terms.
fn gelu_tanh(x: f64) -> f64 {
    let z = GELU_C * (x + GELU_K * x * x * x);
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'t> Var<'t> {
    /// Elementwise sum. `other` may also be a trailing suffix of `self`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa == sb {
            let out = a.zip_map(&b, |x, y| x + y)?;
            let (ga, gb) = (self.requires_grad(), other.requires_grad());
            return Ok(self.tape.record(out, &[*self, other], move || {
                boxed(move |g| vec![ga.then(|| g.clone()), gb.then(|| g.clone())])
            }));
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = b.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let out = tensor(sa.to_vec(), data);
        let b_shape = sb.to_vec();
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape.record(out, &[*self, other], move || {
            boxed(move |g| {
                let db = gb.then(|| tensor(b_shape.clone(), reduce_leading(g.data(), inner)));
                vec![ga.then(|| g.clone()), db]
            })
        }))
    }

    /// Elementwise product of equal-shaped operands.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(out, &[*self, other], move || {
            boxed(move |g| {
                vec![
                    Some(g.zip_map(&b, |gi, bi| gi * bi).unwrap()),
                    Some(g.zip_map(&a, |gi, ai| gi * ai).unwrap()),
                ]
            })
        }))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.record(out, &[*self], move || {
            boxed(move |g| vec![Some(g.map(|x| x * c))])
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.data().iter().sum());
        self.tape.record(out, &[*self], move || {
            boxed(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.data().iter().sum::<f64>() / n);
        self.tape.record(out, &[*self], move || {
            boxed(move |g| vec![Some(Tensor::full(&shape, g.data()[0] / n))])
        })
    }

    /// `self: [..., k]` times `w: [k, p]` gives `[..., p]`.
    pub fn matmul(&self, w: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = w.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (k, p) = (sb[0], sb[1]);
        let m = a.numel() / k;
        let mut data = vec![0.0; m * p];
        gemm(m, k, p, a.data(), false, b.data(), false, &mut data, false);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = p;
        let out = tensor(out_shape, data);
        let (ga, gb) = (self.requires_grad(), w.requires_grad());
        Ok(self.tape.record(out, &[*self, w], move || {
            boxed(move |g| {
                let da = ga.then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, p, k, g.data(), false, b.data(), true, &mut da, false);
                    tensor(sa.clone(), da)
                });
                let db = gb.then(|| {
                    let mut db = vec![0.0; k * p];
                    gemm(k, m, p, a.data(), true, g.data(), false, &mut db, false);
                    tensor(sb.clone(), db)
                });
                vec![da, db]
            })
        }))
    }

    /// Batched matrix product over matching leading axes:
    /// `[..., m, k] x [..., k, p]`, or `[..., m, k] x [..., p, k]ᵀ` when
    /// `transpose_rhs` is set.
    pub fn bmm(&self, rhs: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let nd = sa.len();
        if nd < 3 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return shape_err(format!("bmm {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (p, kb) = if transpose_rhs {
            (sb[nd - 2], sb[nd - 1])
        } else {
            (sb[nd - 1], sb[nd - 2])
        };
        if k != kb {
            return shape_err(format!("bmm inner extents {k} vs {kb}"));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut data = vec![0.0; batch * m * p];
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * p..],
                transpose_rhs,
                &mut data[i * m * p..],
                false,
            );
        }
        let mut out_shape = sa.clone();
        out_shape[nd - 1] = p;
        let out = tensor(out_shape, data);
        Ok(self.tape.record(out, &[*self, rhs], move || {
            boxed(move |g| {
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * p];
                for i in 0..batch {
                    let gi = &g.data()[i * m * p..(i + 1) * m * p];
                    let ai = &a.data()[i * m * k..];
                    let bi = &b.data()[i * k * p..];
                    if transpose_rhs {
                        // c = a bᵀ: da = g b, db = gᵀ a
                        gemm(m, p, k, gi, false, bi, false, &mut da[i * m * k..], false);
                        gemm(p, m, k, gi, true, ai, false, &mut db[i * k * p..], false);
                    } else {
                        gemm(m, p, k, gi, false, bi, true, &mut da[i * m * k..], false);
                        gemm(k, m, p, ai, true, gi, false, &mut db[i * k * p..], false);
                    }
                }
                vec![Some(tensor(sa.clone(), da)), Some(tensor(sb.clone(), db))]
            })
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let a = self.value();
        let t: Vec<f64> = a.data().iter().map(|&x| gelu_tanh(x)).collect();
        let out = tensor(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(&t)
                .map(|(&x, &t)| 0.5 * x * (1.0 + t))
                .collect(),
        );
        self.tape.record(out, &[*self], move || {
            boxed(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(&t)
                    .map(|((gi, &x), &t)| gi * gelu_grad_from_tanh(x, t))
                    .collect();
                vec![Some(tensor(g.shape().to_vec(), data))]
            })
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = split_axis(a.shape(), axis)?;
        let y = if inner == 1 {
            softmax_rows(a.data(), n, 1.0)
        } else {
            strided_softmax(a.data(), outer, n, inner)
        };
        let out = tensor(a.shape().to_vec(), y);
        let y = Rc::new(out.clone());
        Ok(self.tape.record(out, &[*self], move || {
            boxed(move |g| {
                let mut dx = vec![0.0; g.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|j| yd[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..n {
                            let at = base + j * inner;
                            dx[at] = yd[at] * (gd[at] - dot);
                        }
                    }
                }
                vec![Some(tensor(y.shape().to_vec(), dx))]
            })
        }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let d = *x.shape().last().unwrap_or(&0);
        if gv.shape() != [d] || bv.shape() != [d] {
            return shape_err(format!(
                "layer_norm over {d} with gain {:?} bias {:?}",
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = tensor(x.shape().to_vec(), y);
        let shape = x.shape().to_vec();
        Ok(self.tape.record(out, &[*self, gain, bias], move || {
            boxed(move |g| {
                let mut dx = vec![0.0; g.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let gd = g.data();
                for r in 0..rows {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let at = r * d + j;
                        let dh = gd[at] * gv.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[at];
                        dgain[j] += gd[at] * xhat[at];
                        dbias[j] += gd[at];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let at = r * d + j;
                        let dh = gd[at] * gv.data()[j];
                        dx[at] = inv_std[r] * (dh - mean_dh - xhat[at] * mean_dh_h);
                    }
                }
                vec![
                    Some(tensor(shape.clone(), dx)),
                    Some(tensor(vec![d], dgain)),
                    Some(tensor(vec![d], dbias)),
                ]
            })
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.reshaped(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.tape.record(out, &[*self], move || {
            boxed(move |g| vec![Some(g.reshaped(&orig).unwrap())])
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let data = permute_data(a.data(), a.shape(), axes)?;
        let out_shape: Vec<usize> = axes.iter().map(|&i| a.shape()[i]).collect();
        let out = tensor(out_shape.clone(), data);
        let inv = inverse_permutation(axes);
        let orig = a.shape().to_vec();
        Ok(self.tape.record(out, &[*self], move || {
            boxed(move |g| {
                let back = permute_data(g.data(), &out_shape, &inv).unwrap();
                vec![Some(tensor(orig.clone(), back))]
            })
        }))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = split_axis(a.shape(), axis)?;
        if len == 0 || start + len > n {
            return shape_err(format!("narrow {start}+{len} on extent {n}"));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = tensor(shape, data);
        let orig = a.shape().to_vec();
        Ok(self.tape.record(out, &[*self], move || {
            boxed(move |g| {
                let mut dx = Tensor::zeros(&orig);
                let dd = dx.data_mut();
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    dd[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Repeats `self` `n` times along a new leading axis.
    pub fn expand_leading(&self, n: usize) -> Result<Var<'t>> {
        if n == 0 {
            return shape_err("expand to zero copies");
        }
        let a = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(a.shape());
        let data = a.data().repeat(n);
        let out = tensor(shape, data);
        let orig = a.shape().to_vec();
        let inner = a.numel();
        Ok(self.tape.record(out, &[*self], move || {
            boxed(move |g| vec![Some(tensor(orig.clone(), reduce_leading(g.data(), inner)))])
        }))
    }

    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base_shape = values[0].shape().to_vec();
        split_axis(&base_shape, axis)?;
        let mut extents = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let same_rank = s.len() == base_shape.len();
            if !same_rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base_shape[i])
            {
                return shape_err(format!("concat {s:?} with {base_shape:?} on axis {axis}"));
            }
            extents.push(s[axis]);
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let out = tensor(shape, data);
        Ok(first.tape.record(out, parts, move || {
            boxed(move |g| {
                let mut grads: Vec<Vec<f64>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gr, &e) in grads.iter_mut().zip(&extents) {
                        gr.extend_from_slice(&g.data()[offset..offset + e * inner]);
                        offset += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&extents)
                    .map(|(gr, &e)| {
                        let mut s = base_shape.clone();
                        s[axis] = e;
                        Some(tensor(s, gr))
                    })
                    .collect()
            })
        }))
    }

    /// Mean cross-entropy of `[B, C]` logits against class ids.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let (b, c) = match logits.shape() {
            &[b, c] => (b, c),
            s => return shape_err(format!("cross_entropy expects [B, C], got {s:?}")),
        };
        if labels.len() != b {
            return shape_err(format!("{} labels for batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let logp = log_softmax_rows(logits.data(), c, 1.0);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp[i * c + y])
            .sum::<f64>()
            / b as f64;
        let labels = labels.to_vec();
        Ok(self.tape.record(Tensor::scalar(loss), &[*self], move || {
            boxed(move |g| {
                let up = g.data()[0] / b as f64;
                let mut d: Vec<f64> = logp.iter().map(|lp| lp.exp() * up).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= up;
                }
                vec![Some(tensor(vec![b, c], d))]
            })
        }))
    }

    /// Batch-mean `KL(softmax(self / tau) || softmax(student / tau))` with
    /// `self` as the teacher. No `tau²` factor is applied. With
    /// `detach_teacher`, no gradient reaches the teacher logits.
    pub fn kl_divergence(
        &self,
        student: Var<'t>,
        tau: f64,
        detach_teacher: bool,
    ) -> Result<Var<'t>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Input(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let t = self.value();
        let s = student.value();
        t.expect_same_shape(&s)?;
        let (b, c) = match t.shape() {
            &[b, c] => (b, c),
            sh => return shape_err(format!("kl expects [B, C], got {sh:?}")),
        };
        let inv_tau = 1.0 / tau;
        let logp = log_softmax_rows(t.data(), c, inv_tau);
        let logq = log_softmax_rows(s.data(), c, inv_tau);
        let mut row_kl = vec![0.0; b];
        for (r, kl) in row_kl.iter_mut().enumerate() {
            for j in r * c..(r + 1) * c {
                *kl += logp[j].exp() * (logp[j] - logq[j]);
            }
        }
        let loss = row_kl.iter().sum::<f64>() / b as f64;
        let backward = move || {
            boxed(move |g: &Tensor| {
                let up = g.data()[0] * inv_tau / b as f64;
                let mut ds = vec![0.0; b * c];
                let mut dt = vec![0.0; b * c];
                for r in 0..b {
                    for j in r * c..(r + 1) * c {
                        let p = logp[j].exp();
                        ds[j] = (logq[j].exp() - p) * up;
                        dt[j] = p * ((logp[j] - logq[j]) - row_kl[r]) * up;
                    }
                }
                let ds = Some(tensor(vec![b, c], ds));
                if detach_teacher {
                    vec![ds]
                } else {
                    vec![Some(tensor(vec![b, c], dt)), ds]
                }
            })
        };
        let out = Tensor::scalar(loss);
        Ok(if detach_teacher {
            self.tape.record(out, &[student], backward)
        } else {
            self.tape.record(out, &[*self, student], backward)
        })
    }
}

fn strided_softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).fold(f64::NEG_INFINITY, |m, j| m.max(x[base + j * inner]));
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

/// Distillation term with the teacher treated as a constant.
pub fn kl_teacher_student<'t>(teacher: Var<'t>, student: Var<'t>, tau: f64) -> Result<Var<'t>> {
    teacher.kl_divergence(student, tau, true)
}
