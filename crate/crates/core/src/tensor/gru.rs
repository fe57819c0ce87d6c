//! Fused gated-recurrent-unit step.
//!
//! ```text
//! r  = sigmoid(x Wi_r + bi_r + h Wh_r + bh_r)
//! z  = sigmoid(x Wi_z + bi_z + h Wh_z + bh_z)
//! n  = tanh(x Wi_n + bi_n + r * (h Wh_n + bh_n))
//! h' = (1 - z) * n + z * h
//! ```

use super::graph::{sigmoid, Var};
use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruDims {
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
}

impl GruDims {
    pub fn new(shapes: &[Vec<usize>]) -> Option<Self> {
        let [x, h, wi, wh, bi, bh] = shapes else {
            return None;
        };
        if x.len() != 2 || h.len() != 2 || x[0] != h[0] {
            return None;
        }
        let (batch, input, hidden) = (x[0], x[1], h[1]);
        let ok = wi == &[input, 3 * hidden]
            && wh == &[hidden, 3 * hidden]
            && bi == &[3 * hidden]
            && bh == &[3 * hidden];
        ok.then_some(Self {
            batch,
            input,
            hidden,
        })
    }
}

pub(crate) struct GruCache<T> {
    pub inputs: [Var; 6],
    dims: GruDims,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

pub(crate) struct GruGrads<T> {
    pub dx: Vec<T>,
    pub dh: Vec<T>,
    pub dwi: Vec<T>,
    pub dwh: Vec<T>,
    pub dbi: Vec<T>,
    pub dbh: Vec<T>,
}

fn affine<T: Scalar>(rows: usize, k: usize, n: usize, a: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    T::gemm(
        rows,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        w,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar>(
    dims: GruDims,
    inputs: [Var; 6],
    x: &[T],
    h: &[T],
    wi: &[T],
    wh: &[T],
    bi: &[T],
    bh: &[T],
) -> (Vec<T>, GruCache<T>) {
    let GruDims {
        batch,
        input,
        hidden: hd,
    } = dims;
    let gi = affine(batch, input, 3 * hd, x, wi, bi);
    let gh = affine(batch, hd, 3 * hd, h, wh, bh);
    let len = batch * hd;
    let (mut r, mut z, mut n, mut hn) = (
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
    );
    let mut out = vec![T::zero(); len];
    for b in 0..batch {
        let (gib, ghb) = (&gi[b * 3 * hd..(b + 1) * 3 * hd], &gh[b * 3 * hd..(b + 1) * 3 * hd]);
        for j in 0..hd {
            let idx = b * hd + j;
            let rv = sigmoid(gib[j] + ghb[j]);
            let zv = sigmoid(gib[hd + j] + ghb[hd + j]);
            let hnv = ghb[2 * hd + j];
            let nv = (gib[2 * hd + j] + rv * hnv).tanh();
            r[idx] = rv;
            z[idx] = zv;
            n[idx] = nv;
            hn[idx] = hnv;
            out[idx] = (T::one() - zv) * nv + zv * h[idx];
        }
    }
    (
        out,
        GruCache {
            inputs,
            dims,
            r,
            z,
            n,
            hn,
        },
    )
}

pub(crate) fn backward<T: Scalar>(
    c: &GruCache<T>,
    g: &[T],
    x: &[T],
    h: &[T],
    wi: &[T],
    wh: &[T],
) -> GruGrads<T> {
    let GruDims {
        batch,
        input,
        hidden: hd,
    } = c.dims;
    let h3 = 3 * hd;
    let mut dgi = vec![T::zero(); batch * h3];
    let mut dgh = vec![T::zero(); batch * h3];
    let mut dh = vec![T::zero(); batch * hd];
    for b in 0..batch {
        for j in 0..hd {
            let idx = b * hd + j;
            let (rv, zv, nv, hnv) = (c.r[idx], c.z[idx], c.n[idx], c.hn[idx]);
            let go = g[idx];
            let dn = go * (T::one() - zv);
            let dz = go * (h[idx] - nv);
            dh[idx] = go * zv;
            let dan = dn * (T::one() - nv * nv);
            let dr = dan * hnv;
            let dar = dr * rv * (T::one() - rv);
            let daz = dz * zv * (T::one() - zv);
            dgi[b * h3 + j] = dar;
            dgi[b * h3 + hd + j] = daz;
            dgi[b * h3 + 2 * hd + j] = dan;
            dgh[b * h3 + j] = dar;
            dgh[b * h3 + hd + j] = daz;
            dgh[b * h3 + 2 * hd + j] = dan * rv;
        }
    }
    let mut dx = vec![T::zero(); batch * input];
    // dx = dgi * wi^T
    T::gemm(
        batch,
        h3,
        input,
        T::one(),
        &dgi,
        h3 as isize,
        1,
        wi,
        1,
        h3 as isize,
        T::zero(),
        &mut dx,
        input as isize,
        1,
    );
    // dh += dgh * wh^T
    T::gemm(
        batch,
        h3,
        hd,
        T::one(),
        &dgh,
        h3 as isize,
        1,
        wh,
        1,
        h3 as isize,
        T::one(),
        &mut dh,
        hd as isize,
        1,
    );
    let mut dwi = vec![T::zero(); input * h3];
    T::gemm(
        input,
        batch,
        h3,
        T::one(),
        x,
        1,
        input as isize,
        &dgi,
        h3 as isize,
        1,
        T::zero(),
        &mut dwi,
        h3 as isize,
        1,
    );
    let mut dwh = vec![T::zero(); hd * h3];
    T::gemm(
        hd,
        batch,
        h3,
        T::one(),
        h,
        1,
        hd as isize,
        &dgh,
        h3 as isize,
        1,
        T::zero(),
        &mut dwh,
        h3 as isize,
        1,
    );
    let colsum = |m: &[T]| {
        let mut s = vec![T::zero(); h3];
        for row in m.chunks(h3) {
            for (a, &v) in s.iter_mut().zip(row) {
                *a += v;
            }
        }
        s
    };
    GruGrads {
        dbi: colsum(&dgi),
        dbh: colsum(&dgh),
        dx,
        dh,
        dwi,
        dwh,
    }
}
