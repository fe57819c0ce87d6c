//! Single-head scaled dot-product attention over small groups.
//!
//! Masked keys receive weight exactly zero, so they contribute nothing to
//! the output and receive no gradient.

use super::graph::Var;
use super::Scalar;

pub(crate) struct AttnCache<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub dims: (usize, usize, usize),
    pub weights: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub(crate) fn forward<T: Scalar>(
    (g, c, d): (usize, usize, usize),
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &[bool],
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut weights = vec![T::zero(); g * c * c];
    let mut out = vec![T::zero(); g * c * d];
    for gi in 0..g {
        let m = &mask[gi * c..(gi + 1) * c];
        if !m.iter().any(|&b| b) {
            continue;
        }
        for i in 0..c {
            let qi = &q[(gi * c + i) * d..(gi * c + i + 1) * d];
            let w = &mut weights[(gi * c + i) * c..(gi * c + i + 1) * c];
            let mut max = T::neg_infinity();
            for j in 0..c {
                if m[j] {
                    let s = dot(qi, &k[(gi * c + j) * d..(gi * c + j + 1) * d]) * scale;
                    w[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            let mut total = T::zero();
            for j in 0..c {
                if m[j] {
                    w[j] = (w[j] - max).exp();
                    total += w[j];
                } else {
                    w[j] = T::zero();
                }
            }
            let o = &mut out[(gi * c + i) * d..(gi * c + i + 1) * d];
            for j in 0..c {
                if !m[j] {
                    continue;
                }
                w[j] = w[j] / total;
                let vj = &v[(gi * c + j) * d..(gi * c + j + 1) * d];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += w[j] * vv;
                }
            }
        }
    }
    (out, weights)
}

pub(crate) fn backward<T: Scalar>(
    cache: &AttnCache<T>,
    grad: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (g, c, d) = cache.dims;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut dq = vec![T::zero(); g * c * d];
    let mut dk = vec![T::zero(); g * c * d];
    let mut dv = vec![T::zero(); g * c * d];
    let mut dw = vec![T::zero(); c];
    for gi in 0..g {
        for i in 0..c {
            let row = gi * c + i;
            let w = &cache.weights[row * c..(row + 1) * c];
            let go = &grad[row * d..(row + 1) * d];
            for j in 0..c {
                if w[j] == T::zero() {
                    dw[j] = T::zero();
                    continue;
                }
                let vj = (gi * c + j) * d;
                dw[j] = dot(go, &v[vj..vj + d]);
                for t in 0..d {
                    dv[vj + t] += w[j] * go[t];
                }
            }
            let wdw = dot(w, &dw);
            for j in 0..c {
                if w[j] == T::zero() {
                    continue;
                }
                let ds = w[j] * (dw[j] - wdw) * scale;
                let kj = (gi * c + j) * d;
                for t in 0..d {
                    dq[row * d + t] += ds * k[kj + t];
                    dk[kj + t] += ds * q[row * d + t];
                }
            }
        }
    }
    (dq, dk, dv)
}
