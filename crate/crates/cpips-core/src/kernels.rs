//! Shared compute kernels, generic over f32/f64.
//!
//! Convolutions are lowered to gemm via strip-wise im2col/col2im so the
//! intermediate column buffer stays bounded regardless of image size. The
//! same col2im routine realizes both the conv data-gradient and the
//! transposed convolution forward pass, which is what makes the
//! conv/deconv adjoint identity hold exactly.

/// Element type of a kernel invocation.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    /// Raw gemm: C = alpha*A*B + beta*C with explicit strides.
    ///
    /// # Safety
    /// Caller guarantees every strided index stays within the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Safe gemm wrapper; strides are element counts, all indices bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // gemm degenerates to C *= beta
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm B out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm C out of bounds");
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Spatial output size of a same-padded convolution: ceil(extent/stride).
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

// Column-buffer budget in elements; strips keep im2col memory bounded.
const COL_BUDGET: usize = 1 << 21;

fn rows_per_strip(k_dim: usize, ow: usize, oh: usize) -> usize {
    (COL_BUDGET / (k_dim * ow).max(1)).clamp(1, oh.max(1))
}

/// Fills `col` with the im2col expansion of output rows [r0, r1).
/// Layout: col[(c*k*k + u*k + v) * strip_n + (i-r0)*ow + j].
#[allow(clippy::too_many_arguments)]
fn im2col_strip<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ow: usize,
    r0: usize,
    r1: usize,
    col: &mut [T],
) {
    let strip_n = (r1 - r0) * ow;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k * k + u * k + v) * strip_n;
                for i in r0..r1 {
                    let yy = (i * stride + u) as isize - pad as isize;
                    let base = row + (i - r0) * ow;
                    if yy < 0 || yy >= h as isize {
                        col[base..base + ow].fill(T::ZERO);
                        continue;
                    }
                    let src_row = &xc[yy as usize * w..(yy as usize + 1) * w];
                    for j in 0..ow {
                        let xx = (j * stride + v) as isize - pad as isize;
                        col[base + j] = if xx < 0 || xx >= w as isize {
                            T::ZERO
                        } else {
                            src_row[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column strip back into the image (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_strip<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ow: usize,
    r0: usize,
    r1: usize,
    img: &mut [T],
) {
    let strip_n = (r1 - r0) * ow;
    for c in 0..cin {
        let xc = &mut img[c * h * w..(c + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k * k + u * k + v) * strip_n;
                for i in r0..r1 {
                    let yy = (i * stride + u) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let base = row + (i - r0) * ow;
                    let dst_row = &mut xc[yy as usize * w..(yy as usize + 1) * w];
                    for j in 0..ow {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dst_row[xx as usize] = dst_row[xx as usize] + col[base + j];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with same-padding (pad = (k-1)/2) plus optional bias.
/// x: [cin,h,w], weight: [cout,cin,k,k] -> [cout, ceil(h/s), ceil(w/s)].
pub fn conv_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, usize, usize) {
    let pad = (k - 1) / 2;
    let (oh, ow) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let kd = cin * k * k;
    let mut out = vec![T::ZERO; cout * oh * ow];
    let strip = rows_per_strip(kd, ow, oh);
    let mut col = vec![T::ZERO; kd * strip * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + strip).min(oh);
        let n = (r1 - r0) * ow;
        im2col_strip(x, cin, h, w, k, stride, pad, ow, r0, r1, &mut col);
        // out[co, strip] = W[co, kd] * col[kd, n]
        let out_off = r0 * ow;
        gemm(
            cout,
            kd,
            n,
            T::ONE,
            weight,
            kd,
            1,
            &col[..kd * n],
            n,
            1,
            T::ZERO,
            &mut out[out_off..],
            oh * ow,
            1,
        );
        r0 = r1;
    }
    if let Some(b) = bias {
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for v in plane {
                *v = *v + b[co];
            }
        }
    }
    (out, oh, ow)
}

/// Gradient of `conv_forward` w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_data<T: Scalar>(
    gout: &[T],
    cout: usize,
    oh: usize,
    ow: usize,
    weight: &[T],
    cin: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let kd = cin * k * k;
    let mut dx = vec![T::ZERO; cin * h * w];
    let strip = rows_per_strip(kd, ow, oh);
    let mut col = vec![T::ZERO; kd * strip * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + strip).min(oh);
        let n = (r1 - r0) * ow;
        // col[kd, n] = W^T[kd, cout] * gout[cout, strip]
        gemm(
            kd,
            cout,
            n,
            T::ONE,
            weight,
            1,
            kd,
            &gout[r0 * ow..],
            oh * ow,
            1,
            T::ZERO,
            &mut col[..kd * n],
            n,
            1,
        );
        col2im_strip(&col, cin, h, w, k, stride, pad, ow, r0, r1, &mut dx);
        r0 = r1;
    }
    dx
}

/// Gradient of `conv_forward` w.r.t. weights and bias; accumulates into
/// `dweight`/`dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_weights<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    gout: &[T],
    cout: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) {
    let pad = (k - 1) / 2;
    let kd = cin * k * k;
    let strip = rows_per_strip(kd, ow, oh);
    let mut col = vec![T::ZERO; kd * strip * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + strip).min(oh);
        let n = (r1 - r0) * ow;
        im2col_strip(x, cin, h, w, k, stride, pad, ow, r0, r1, &mut col);
        // dW[cout, kd] += gout[cout, strip] * col^T[n, kd]
        gemm(
            cout,
            n,
            kd,
            T::ONE,
            &gout[r0 * ow..],
            oh * ow,
            1,
            &col[..kd * n],
            1,
            n,
            T::ONE,
            dweight,
            kd,
            1,
        );
        r0 = r1;
    }
    if let Some(db) = dbias {
        for co in 0..cout {
            let mut s = T::ZERO;
            for v in &gout[co * oh * ow..(co + 1) * oh * ow] {
                s = s + *v;
            }
            db[co] = db[co] + s;
        }
    }
}

/// Transposed convolution. x: [cin,h,w], weight: [cin,cout,k,k],
/// stride 2 with output padding chosen so the result is exactly [cout,2h,2w].
/// This is the exact adjoint of `conv_forward` at stride 2.
pub fn deconv_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    stride: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, usize, usize) {
    let pad = (k - 1) / 2;
    let (out_h, out_w) = (h * stride, w * stride);
    let kd = cout * k * k;
    let mut out = vec![T::ZERO; cout * out_h * out_w];
    let strip = rows_per_strip(kd, w, h);
    let mut col = vec![T::ZERO; kd * strip * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + strip).min(h);
        let n = (r1 - r0) * w;
        // col[(co,u,v), n] = sum_ci W[ci, (co,u,v)] * x[ci, n]
        gemm(
            kd,
            cin,
            n,
            T::ONE,
            weight,
            1,
            kd,
            &x[r0 * w..],
            h * w,
            1,
            T::ZERO,
            &mut col[..kd * n],
            n,
            1,
        );
        col2im_strip(&col, cout, out_h, out_w, k, stride, pad, w, r0, r1, &mut out);
        r0 = r1;
    }
    if let Some(b) = bias {
        for co in 0..cout {
            let plane = &mut out[co * out_h * out_w..(co + 1) * out_h * out_w];
            for v in plane {
                *v = *v + b[co];
            }
        }
    }
    (out, out_h, out_w)
}

/// Gradient of `deconv_forward` w.r.t. its input: a plain convolution of the
/// output gradient with the same kernel.
#[allow(clippy::too_many_arguments)]
pub fn deconv_backward_data<T: Scalar>(
    gout: &[T],
    cout: usize,
    out_h: usize,
    out_w: usize,
    weight: &[T],
    cin: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let (h, w) = (conv_out_extent(out_h, stride), conv_out_extent(out_w, stride));
    let kd = cout * k * k;
    let mut dx = vec![T::ZERO; cin * h * w];
    let strip = rows_per_strip(kd, w, h);
    let mut col = vec![T::ZERO; kd * strip * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + strip).min(h);
        let n = (r1 - r0) * w;
        im2col_strip(gout, cout, out_h, out_w, k, stride, pad, w, r0, r1, &mut col);
        // dx[ci, n] = W[ci, kd] * col[kd, n]
        gemm(
            cin,
            kd,
            n,
            T::ONE,
            weight,
            kd,
            1,
            &col[..kd * n],
            n,
            1,
            T::ZERO,
            &mut dx[r0 * w..],
            h * w,
            1,
        );
        r0 = r1;
    }
    dx
}

/// Gradient of `deconv_forward` w.r.t. weights/bias; accumulates.
#[allow(clippy::too_many_arguments)]
pub fn deconv_backward_weights<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    gout: &[T],
    cout: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) {
    let pad = (k - 1) / 2;
    let kd = cout * k * k;
    let strip = rows_per_strip(kd, w, h);
    let mut col = vec![T::ZERO; kd * strip * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + strip).min(h);
        let n = (r1 - r0) * w;
        im2col_strip(gout, cout, out_h, out_w, k, stride, pad, w, r0, r1, &mut col);
        // dW[ci, (co,u,v)] += x[ci, n] * col^T[n, (co,u,v)]
        gemm(
            cin,
            n,
            kd,
            T::ONE,
            &x[r0 * w..],
            h * w,
            1,
            &col[..kd * n],
            1,
            n,
            T::ONE,
            dweight,
            kd,
            1,
        );
        r0 = r1;
    }
    if let Some(db) = dbias {
        for co in 0..cout {
            let mut s = T::ZERO;
            for v in &gout[co * out_h * out_w..(co + 1) * out_h * out_w] {
                s = s + *v;
            }
            db[co] = db[co] + s;
        }
    }
}

/// GDN: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2) at each spatial site;
/// the inverse form multiplies instead. Returns (y, denom) with denom the
/// per-site square root, cached for the backward pass.
pub fn gdn_forward<T: Scalar>(
    x: &[T],
    c: usize,
    n: usize,
    beta: &[T],
    gamma: &[T],
    inverse: bool,
) -> (Vec<T>, Vec<T>) {
    let mut sq = vec![T::ZERO; c * n];
    for (s, v) in sq.iter_mut().zip(x) {
        *s = *v * *v;
    }
    let mut denom = vec![T::ZERO; c * n];
    for i in 0..c {
        denom[i * n..(i + 1) * n].fill(beta[i]);
    }
    // denom += gamma[c,c] * sq[c,n]
    gemm(c, c, n, T::ONE, gamma, c, 1, &sq, n, 1, T::ONE, &mut denom, n, 1);
    for d in denom.iter_mut() {
        *d = d.sqrt();
    }
    let mut y = vec![T::ZERO; c * n];
    if inverse {
        for i in 0..c * n {
            y[i] = x[i] * denom[i];
        }
    } else {
        for i in 0..c * n {
            y[i] = x[i] / denom[i];
        }
    }
    (y, denom)
}

/// PReLU with one slope per channel over [c, n]-shaped data.
pub fn prelu_forward<T: Scalar>(x: &[T], c: usize, n: usize, slope: &[T]) -> Vec<T> {
    let mut y = vec![T::ZERO; c * n];
    for i in 0..c {
        let a = slope[i];
        for j in 0..n {
            let v = x[i * n + j];
            y[i * n + j] = if v >= T::ZERO { v } else { a * v };
        }
    }
    y
}
