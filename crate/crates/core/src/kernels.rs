//! Raw slice kernels behind the autograd ops. Layouts are row-major
//! `[N, C, H, W]` unless stated otherwise.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `op(a) * op(b)` into a fresh `m x n` buffer.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: input lengths checked above. With beta = 0 dgemm writes all
    // m * n outputs without reading them, so the spare capacity is initialized
    // before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.spare_capacity_mut().as_mut_ptr().cast::<f64>(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along an axis.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out);
    let hi = (len + pad).saturating_sub(k).min(out).max(lo);
    (lo, hi)
}

/// Unfolds `n` images `[N, C, H, W]` into `[C*kh*kw, N*Ho*Wo]` with zero padding.
pub(crate) fn im2col(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let in_img = g.c * g.h * g.w;
    let mut cols = Vec::with_capacity(g.col_rows() * n * ho * wo);
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oi0, oi1) = valid_range(ki, g.ph, g.h, ho);
            for kj in 0..g.kw {
                let (oj0, oj1) = valid_range(kj, g.pw, g.w, wo);
                for s in 0..n {
                    let src = &x[s * in_img + c * g.h * g.w..s * in_img + (c + 1) * g.h * g.w];
                    cols.resize(cols.len() + oi0 * wo, 0.0);
                    for oi in oi0..oi1 {
                        let ii = oi + ki - g.ph;
                        let j0 = oj0 + kj - g.pw;
                        cols.resize(cols.len() + oj0, 0.0);
                        cols.extend_from_slice(&src[ii * g.w + j0..ii * g.w + j0 + (oj1 - oj0)]);
                        cols.resize(cols.len() + wo - oj1, 0.0);
                    }
                    cols.resize(cols.len() + (ho - oi1) * wo, 0.0);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f64], n: usize, g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncol = ho * wo;
    let stride = n * ncol;
    let in_img = g.c * g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oi0, oi1) = valid_range(ki, g.ph, g.h, ho);
            for kj in 0..g.kw {
                let (oj0, oj1) = valid_range(kj, g.pw, g.w, wo);
                let row = (c * g.kh + ki) * g.kw + kj;
                for s in 0..n {
                    let src = &cols[row * stride + s * ncol..row * stride + (s + 1) * ncol];
                    let dst = &mut dx[s * in_img + c * g.h * g.w..s * in_img + (c + 1) * g.h * g.w];
                    for oi in oi0..oi1 {
                        let ii = oi + ki - g.ph;
                        let j0 = oj0 + kj - g.pw;
                        let d = &mut dst[ii * g.w + j0..ii * g.w + j0 + (oj1 - oj0)];
                        for (a, b) in d.iter_mut().zip(&src[oi * wo + oj0..oi * wo + oj1]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N, P]` to `[N, O, P]`.
fn swap_leading(src: &[f64], o: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..o {
        for s in 0..n {
            out[(s * o + a) * p..(s * o + a + 1) * p].copy_from_slice(&src[(a * n + s) * p..(a * n + s + 1) * p]);
        }
    }
    out
}

pub(crate) fn conv2d_forward(x: &[f64], n: usize, w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let cols = im2col(x, n, g);
    let y = gemm_new(o, rows, n * ncol, w, false, &cols, false);
    swap_leading(&y, o, n, ncol)
}

/// Returns `(dx, dw)` for a zero-padded, stride-one convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    o: usize,
    g: &ConvGeom,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let dy_t = swap_leading(dy, n, o, ncol);
    let dw = need_dw.then(|| {
        let cols = im2col(x, n, g);
        gemm_new(o, n * ncol, rows, &dy_t, false, &cols, true)
    });
    let dx = need_dx.then(|| {
        let dcols = gemm_new(rows, o, n * ncol, w, true, &dy_t, false);
        let mut dx = vec![0.0; n * g.c * g.h * g.w];
        col2im(&dcols, n, g, &mut dx);
        dx
    });
    (dx, dw)
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Source index into the input for every element of a reflection-padded
/// `[outer, H + 2ph, W + 2pw]` output.
pub(crate) fn reflect_pad_index(outer: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<usize> {
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let mut idx = Vec::with_capacity(outer * oh * ow);
    for b in 0..outer {
        for i in 0..oh {
            let si = reflect(i as isize - ph as isize, h);
            for j in 0..ow {
                let sj = reflect(j as isize - pw as isize, w);
                idx.push((b * h + si) * w + sj);
            }
        }
    }
    idx
}

/// Nearest-neighbour resampling index for `[outer, H, W] -> [outer, OH, OW]`.
pub(crate) fn resize_index(outer: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(outer * oh * ow);
    for b in 0..outer {
        for i in 0..oh {
            let si = (i * h) / oh;
            for j in 0..ow {
                let sj = (j * w) / ow;
                idx.push((b * h + si) * w + sj);
            }
        }
    }
    idx
}

/// Max pooling with stride equal to the window and ceil-mode edges.
/// Returns the pooled values and the flat argmax per output.
pub(crate) fn max_pool(
    x: &[f64],
    outer: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(kh), w.div_ceil(kw));
    let mut out = Vec::with_capacity(outer * oh * ow);
    let mut arg = Vec::with_capacity(outer * oh * ow);
    for b in 0..outer {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = (b * h + oi * kh) * w + oj * kw;
                for i in oi * kh..((oi + 1) * kh).min(h) {
                    for j in oj * kw..((oj + 1) * kw).min(w) {
                        let k = (b * h + i) * w + j;
                        if x[k] > best {
                            best = x[k];
                            best_i = k;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
