//! im2col convolution. Each batch item is lowered to a `[cin*k*k, ho*wo]`
//! column matrix so forward and both weight/input gradients become GEMMs.

use super::graph::Var;
use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(sx: &[usize], sw: &[usize], sb: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || stride == 0 {
            return None;
        }
        let (batch, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin || kh != kw || sb[0] != cout || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn krows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) struct ConvCache<T> {
    pub x: Var,
    pub w: Var,
    pub bias: Var,
    pub geom: ConvGeom,
    pub cols: Vec<T>,
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[c * g.h * g.w + iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let (kr, hw) = (g.krows(), g.hw_out());
    let in_len = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); g.batch * kr * hw];
    let mut out = vec![T::zero(); g.batch * g.cout * hw];
    for b in 0..g.batch {
        let cb = &mut cols[b * kr * hw..(b + 1) * kr * hw];
        im2col(g, &x[b * in_len..(b + 1) * in_len], cb);
        let ob = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (co, row) in ob.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(
            g.cout,
            kr,
            hw,
            T::one(),
            w,
            kr as isize,
            1,
            cb,
            hw as isize,
            1,
            T::one(),
            ob,
            hw as isize,
            1,
        );
    }
    (out, cols)
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    grad_out: &[T],
    w: &[T],
    cols: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (kr, hw) = (g.krows(), g.hw_out());
    let in_len = g.cin * g.h * g.w;
    let mut dx = want.0.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = want.1.then(|| vec![T::zero(); g.cout * kr]);
    let mut db = want.2.then(|| vec![T::zero(); g.cout]);
    let mut dcols = vec![T::zero(); if want.0 { kr * hw } else { 0 }];
    for b in 0..g.batch {
        let gb = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        let cb = &cols[b * kr * hw..(b + 1) * kr * hw];
        if let Some(dw) = dw.as_mut() {
            // dw[cout, kr] += g_b[cout, hw] * cols_b^T[hw, kr]
            T::gemm(
                g.cout,
                hw,
                kr,
                T::one(),
                gb,
                hw as isize,
                1,
                cb,
                1,
                hw as isize,
                T::one(),
                dw,
                kr as isize,
                1,
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks(hw).enumerate() {
                db[co] += row.iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[kr, hw] = w^T[kr, cout] * g_b[cout, hw]
            T::gemm(
                kr,
                g.cout,
                hw,
                T::one(),
                w,
                1,
                kr as isize,
                gb,
                hw as isize,
                1,
                T::zero(),
                &mut dcols,
                hw as isize,
                1,
            );
            col2im(g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw, db)
}
