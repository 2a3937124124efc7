//! Slice-level kernels. All accumulate into `out`.

use crate::tensor::Scalar;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
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
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Geometry of a stride-1 square-kernel convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// For kernel offset `kk` and padded geometry: output index range whose
    /// input index `o + kk - pad` lies inside `[0, len)`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (len + self.pad).saturating_sub(kk).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Visits every (output plane, input plane, kernel tap) with the valid
/// output ranges, handing row slices to `f`.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize))) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            for c in 0..g.in_ch {
                for ky in 0..g.k {
                    let ry = g.valid(ky, g.h, oh);
                    for kx in 0..g.k {
                        let rx = g.valid(kx, g.w, ow);
                        f(b, o, c, ky, kx, ry, rx);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for_each_tap(g, |b, o, c, ky, kx, (y0, y1), (x0, x1)| {
        let wv = w[((o * g.in_ch + c) * g.k + ky) * g.k + kx];
        let xin = &x[(b * g.in_ch + c) * g.h * g.w..];
        let oplane = &mut out[(b * g.out_ch + o) * oh * ow..];
        for oy in y0..y1 {
            let iy = oy + ky - g.pad;
            let irow = &xin[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
            let orow = &mut oplane[oy * ow + x0..oy * ow + x1];
            for (ov, &iv) in orow.iter_mut().zip(irow) {
                *ov = *ov + wv * iv;
            }
        }
    });
}

pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, dout: &[T], w: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for_each_tap(g, |b, o, c, ky, kx, (y0, y1), (x0, x1)| {
        let wv = w[((o * g.in_ch + c) * g.k + ky) * g.k + kx];
        let dplane = &dout[(b * g.out_ch + o) * oh * ow..];
        let xplane = &mut dx[(b * g.in_ch + c) * g.h * g.w..];
        for oy in y0..y1 {
            let iy = oy + ky - g.pad;
            let drow = &dplane[oy * ow + x0..oy * ow + x1];
            let xrow = &mut xplane[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
            for (xv, &dv) in xrow.iter_mut().zip(drow) {
                *xv = *xv + wv * dv;
            }
        }
    });
}

pub fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, dout: &[T], x: &[T], dw: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for_each_tap(g, |b, o, c, ky, kx, (y0, y1), (x0, x1)| {
        let dplane = &dout[(b * g.out_ch + o) * oh * ow..];
        let xplane = &x[(b * g.in_ch + c) * g.h * g.w..];
        let mut acc = T::zero();
        for oy in y0..y1 {
            let iy = oy + ky - g.pad;
            let drow = &dplane[oy * ow + x0..oy * ow + x1];
            let xrow = &xplane[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
            for (&dv, &xv) in drow.iter().zip(xrow) {
                acc = acc + dv * xv;
            }
        }
        let idx = ((o * g.in_ch + c) * g.k + ky) * g.k + kx;
        dw[idx] = dw[idx] + acc;
    });
}
