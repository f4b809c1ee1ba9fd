//! Tape operations: layer primitives and the elementwise/reduction ops the
//! losses and the factorized density are composed from.
//!
//! Image-shaped ops accept `[C,H,W]` or a batched `[N,C,H,W]`. Every
//! backward closure is checked against central finite differences in the
//! test suite.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("class index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

fn dim_err<TOk>(msg: impl Into<String>) -> Result<TOk, OpError> {
    Err(OpError::Dim(msg.into()))
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var, OpError> {
    binary_same_shape(tape, a, b, |x, y| x + y, |_g| (1.0, 1.0))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var, OpError> {
    binary_same_shape(tape, a, b, |x, y| x - y, |_g| (1.0, -1.0))
}

fn binary_same_shape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    f: impl Fn(f64, f64) -> f64,
    coeffs: impl Fn(()) -> (f64, f64) + 'static,
) -> Result<Var, OpError> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape != tb.shape {
        return dim_err(format!("shape {:?} vs {:?}", ta.shape, tb.shape));
    }
    let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
    let value = Tensor::new(ta.shape.clone(), data).expect("same length");
    let (ca, cb) = coeffs(());
    Ok(tape.push(
        value,
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(a.id, g.iter().map(|&v| ca * v).collect());
            buf.add_owned(b.id, g.iter().map(|&v| cb * v).collect());
        })),
    ))
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var, OpError> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape != tb.shape {
        return dim_err(format!("shape {:?} vs {:?}", ta.shape, tb.shape));
    }
    let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
    let value = Tensor::new(ta.shape.clone(), data).expect("same length");
    Ok(tape.push(
        value,
        Some(Box::new(move |t, g, buf| {
            let (xa, xb) = (&t.value(a).data, &t.value(b).data);
            buf.add_owned(a.id, g.iter().zip(xb.iter()).map(|(&gv, &bv)| gv * bv).collect());
            buf.add_owned(b.id, g.iter().zip(xa.iter()).map(|(&gv, &av)| gv * av).collect());
        })),
    ))
}

pub fn scale(tape: &mut Tape, a: Var, c: f64) -> Var {
    let ta = tape.value(a);
    let value = ta.map(|v| c * v);
    tape.push(
        value,
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(a.id, g.iter().map(|&v| c * v).collect());
        })),
    )
}

pub fn tanh(tape: &mut Tape, a: Var) -> Var {
    let y = tape.value(a).map(f64::tanh);
    let cache = y.data.clone();
    tape.push(
        y,
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(
                a.id,
                g.iter().zip(&cache).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect(),
            );
        })),
    )
}

pub fn sigmoid(tape: &mut Tape, a: Var) -> Var {
    let y = tape.value(a).map(stable_sigmoid);
    let cache = y.data.clone();
    tape.push(
        y,
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(
                a.id,
                g.iter().zip(&cache).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect(),
            );
        })),
    )
}

pub fn abs(tape: &mut Tape, a: Var) -> Var {
    let y = tape.value(a).map(f64::abs);
    tape.push(
        y,
        Some(Box::new(move |t, g, buf| {
            let x = &t.value(a).data;
            buf.add_owned(
                a.id,
                g.iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                    .collect(),
            );
        })),
    )
}

/// max(x, lo) elementwise; gradient flows only where x > lo.
pub fn clamp_min(tape: &mut Tape, a: Var, lo: f64) -> Var {
    let y = tape.value(a).map(|v| v.max(lo));
    tape.push(
        y,
        Some(Box::new(move |t, g, buf| {
            let x = &t.value(a).data;
            buf.add_owned(
                a.id,
                g.iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv > lo { gv } else { 0.0 })
                    .collect(),
            );
        })),
    )
}

/// log2 of a strictly positive input.
pub fn log2(tape: &mut Tape, a: Var) -> Var {
    let y = tape.value(a).map(f64::log2);
    tape.push(
        y,
        Some(Box::new(move |t, g, buf| {
            let x = &t.value(a).data;
            let ln2 = std::f64::consts::LN_2;
            buf.add_owned(
                a.id,
                g.iter().zip(x.iter()).map(|(&gv, &xv)| gv / (xv * ln2)).collect(),
            );
        })),
    )
}

pub fn reshape(tape: &mut Tape, a: Var, shape: Vec<usize>) -> Result<Var, OpError> {
    let ta = tape.value(a);
    let n: usize = shape.iter().product();
    if n != ta.numel() {
        return dim_err(format!("cannot reshape {:?} to {:?}", ta.shape, shape));
    }
    let value = Tensor::new(shape, ta.data.clone()).expect("checked length");
    Ok(tape.push(
        value,
        Some(Box::new(move |_t, g, buf| {
            buf.add(a.id, g);
        })),
    ))
}

pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let total: f64 = tape.value(a).data.iter().sum();
    let n = tape.value(a).numel();
    tape.push(
        Tensor::scalar(total),
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(a.id, vec![g[0]; n]);
        })),
    )
}

pub fn mean(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).numel();
    let total: f64 = tape.value(a).data.iter().sum();
    tape.push(
        Tensor::scalar(total / n as f64),
        Some(Box::new(move |_t, g, buf| {
            buf.add_owned(a.id, vec![g[0] / n as f64; n]);
        })),
    )
}

/// Mean squared difference of two same-shape tensors.
pub fn mse_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var, OpError> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape != tb.shape {
        return dim_err(format!("mse shapes {:?} vs {:?}", ta.shape, tb.shape));
    }
    let n = ta.numel() as f64;
    let total: f64 = ta.data.iter().zip(&tb.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(tape.push(
        Tensor::scalar(total / n),
        Some(Box::new(move |t, g, buf| {
            let (xa, xb) = (&t.value(a).data, &t.value(b).data);
            let c = 2.0 * g[0] / n;
            buf.add_owned(a.id, xa.iter().zip(xb.iter()).map(|(&x, &y)| c * (x - y)).collect());
            buf.add_owned(b.id, xa.iter().zip(xb.iter()).map(|(&x, &y)| -c * (x - y)).collect());
        })),
    ))
}

/// Mean absolute difference of two same-shape tensors.
pub fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var, OpError> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape != tb.shape {
        return dim_err(format!("l1 shapes {:?} vs {:?}", ta.shape, tb.shape));
    }
    let n = ta.numel() as f64;
    let total: f64 = ta.data.iter().zip(&tb.data).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(tape.push(
        Tensor::scalar(total / n),
        Some(Box::new(move |t, g, buf| {
            let (xa, xb) = (&t.value(a).data, &t.value(b).data);
            let c = g[0] / n;
            let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            buf.add_owned(a.id, xa.iter().zip(xb.iter()).map(|(&x, &y)| c * sign(x - y)).collect());
            buf.add_owned(b.id, xa.iter().zip(xb.iter()).map(|(&x, &y)| -c * sign(x - y)).collect());
        })),
    ))
}

/// Stacks n same-length vectors [B] into [B, n] column-wise.
pub fn stack_cols(tape: &mut Tape, vars: &[Var]) -> Result<Var, OpError> {
    if vars.is_empty() {
        return dim_err("stack_cols of nothing");
    }
    let b = tape.value(vars[0]).numel();
    for v in vars {
        if tape.value(*v).numel() != b {
            return dim_err("stack_cols length mismatch");
        }
    }
    let n = vars.len();
    let mut data = vec![0.0; b * n];
    for (i, v) in vars.iter().enumerate() {
        for (row, &x) in tape.value(*v).data.iter().enumerate() {
            data[row * n + i] = x;
        }
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    Ok(tape.push(
        Tensor::new(vec![b, n], data).expect("sized"),
        Some(Box::new(move |_t, g, buf| {
            for (i, &id) in ids.iter().enumerate() {
                buf.add_owned(id, (0..b).map(|row| g[row * n + i]).collect());
            }
        })),
    ))
}

/// out[r] = sum_c mat[r,c] * v[c] with a constant matrix.
pub fn matvec_const(tape: &mut Tape, mat: &Tensor, v: Var) -> Result<Var, OpError> {
    let tv = tape.value(v);
    if mat.rank() != 2 || mat.shape[1] != tv.numel() {
        return dim_err(format!("matvec {:?} x {:?}", mat.shape, tv.shape));
    }
    let (rows, cols) = (mat.shape[0], mat.shape[1]);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        out[r] = mat.data[r * cols..(r + 1) * cols]
            .iter()
            .zip(&tv.data)
            .map(|(&m, &x)| m * x)
            .sum();
    }
    let mdata = mat.data.clone();
    Ok(tape.push(
        Tensor::new(vec![rows], out).expect("sized"),
        Some(Box::new(move |_t, g, buf| {
            let mut dv = vec![0.0; cols];
            for r in 0..rows {
                let gr = g[r];
                for c in 0..cols {
                    dv[c] += mdata[r * cols + c] * gr;
                }
            }
            buf.add_owned(v.id, dv);
        })),
    ))
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

fn conv_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    transposed: bool,
) -> Result<(usize, usize, usize, usize, usize, usize), OpError> {
    let (n, cin, h, w) = match x_shape {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        other => return dim_err(format!("conv input rank {:?}", other)),
    };
    let [d0, d1, k, k2] = match w_shape {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => return dim_err(format!("conv weight rank {:?}", other)),
    };
    if k != k2 || k % 2 == 0 {
        return dim_err(format!("kernel must be square and odd, got {k}x{k2}"));
    }
    // forward conv weights are [cout,cin,k,k]; transposed are [cin,cout,k,k]
    let (w_cin, cout) = if transposed { (d0, d1) } else { (d1, d0) };
    if w_cin != cin {
        return dim_err(format!(
            "input has {cin} channels but weights expect {w_cin}"
        ));
    }
    Ok((n, cin, h, w, cout, k))
}

/// Same-padded cross-correlation plus bias; stride 1 or 2.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var, OpError> {
    if !(stride == 1 || stride == 2) {
        return dim_err(format!("stride must be 1 or 2, got {stride}"));
    }
    let (n, cin, h, w, cout, k) = conv_geometry(&tape.value(x).shape, &tape.value(weight).shape, false)?;
    if tape.value(bias).numel() != cout {
        return dim_err("bias length != out channels");
    }
    let (oh, ow) = (kernels::conv_out_extent(h, stride), kernels::conv_out_extent(w, stride));
    let xd = &tape.value(x).data;
    let wd = &tape.value(weight).data;
    let bd = &tape.value(bias).data;
    let per_in = cin * h * w;
    let per_out = cout * oh * ow;
    let mut out = vec![0.0; n * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(i, chunk)| {
        let (o, _, _) = kernels::conv_forward(
            &xd[i * per_in..(i + 1) * per_in],
            cin,
            h,
            w,
            wd,
            cout,
            k,
            stride,
            Some(bd),
        );
        chunk.copy_from_slice(&o);
    });
    let out_shape = if tape.value(x).rank() == 3 {
        vec![cout, oh, ow]
    } else {
        vec![n, cout, oh, ow]
    };
    Ok(tape.push(
        Tensor::new(out_shape, out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let xd = &t.value(x).data;
            let wd = &t.value(weight).data;
            // input gradient per image
            let mut dx = vec![0.0; n * per_in];
            dx.par_chunks_mut(per_in).enumerate().for_each(|(i, chunk)| {
                let d = kernels::conv_backward_data(
                    &g[i * per_out..(i + 1) * per_out],
                    cout,
                    oh,
                    ow,
                    wd,
                    cin,
                    k,
                    stride,
                    h,
                    w,
                );
                chunk.copy_from_slice(&d);
            });
            buf.add_owned(x.id, dx);
            // weight and bias gradient, reduced in fixed image order
            let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut dw = vec![0.0; wd.len()];
                    let mut db = vec![0.0; cout];
                    kernels::conv_backward_weights(
                        &xd[i * per_in..(i + 1) * per_in],
                        cin,
                        h,
                        w,
                        &g[i * per_out..(i + 1) * per_out],
                        cout,
                        oh,
                        ow,
                        k,
                        stride,
                        &mut dw,
                        Some(&mut db),
                    );
                    (dw, db)
                })
                .collect();
            let mut dw = vec![0.0; wd.len()];
            let mut db = vec![0.0; cout];
            for (pw, pb) in parts {
                for (a, b) in dw.iter_mut().zip(&pw) {
                    *a += b;
                }
                for (a, b) in db.iter_mut().zip(&pb) {
                    *a += b;
                }
            }
            buf.add_owned(weight.id, dw);
            buf.add_owned(bias.id, db);
        })),
    ))
}

/// Transposed convolution, stride 2, output exactly doubles each spatial
/// extent. Weights are [cin, cout, k, k].
pub fn deconv2d(tape: &mut Tape, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var, OpError> {
    if stride != 2 {
        return dim_err(format!("deconv stride must be 2, got {stride}"));
    }
    let (n, cin, h, w, cout, k) = conv_geometry(&tape.value(x).shape, &tape.value(weight).shape, true)?;
    if tape.value(bias).numel() != cout {
        return dim_err("bias length != out channels");
    }
    let (oh, ow) = (h * stride, w * stride);
    let xd = &tape.value(x).data;
    let wd = &tape.value(weight).data;
    let bd = &tape.value(bias).data;
    let per_in = cin * h * w;
    let per_out = cout * oh * ow;
    let mut out = vec![0.0; n * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(i, chunk)| {
        let (o, _, _) = kernels::deconv_forward(
            &xd[i * per_in..(i + 1) * per_in],
            cin,
            h,
            w,
            wd,
            cout,
            k,
            stride,
            Some(bd),
        );
        chunk.copy_from_slice(&o);
    });
    let out_shape = if tape.value(x).rank() == 3 {
        vec![cout, oh, ow]
    } else {
        vec![n, cout, oh, ow]
    };
    Ok(tape.push(
        Tensor::new(out_shape, out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let xd = &t.value(x).data;
            let wd = &t.value(weight).data;
            let mut dx = vec![0.0; n * per_in];
            dx.par_chunks_mut(per_in).enumerate().for_each(|(i, chunk)| {
                let d = kernels::deconv_backward_data(
                    &g[i * per_out..(i + 1) * per_out],
                    cout,
                    oh,
                    ow,
                    wd,
                    cin,
                    k,
                    stride,
                );
                chunk.copy_from_slice(&d);
            });
            buf.add_owned(x.id, dx);
            let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut dw = vec![0.0; wd.len()];
                    let mut db = vec![0.0; cout];
                    kernels::deconv_backward_weights(
                        &xd[i * per_in..(i + 1) * per_in],
                        cin,
                        h,
                        w,
                        &g[i * per_out..(i + 1) * per_out],
                        cout,
                        oh,
                        ow,
                        k,
                        stride,
                        &mut dw,
                        Some(&mut db),
                    );
                    (dw, db)
                })
                .collect();
            let mut dw = vec![0.0; wd.len()];
            let mut db = vec![0.0; cout];
            for (pw, pb) in parts {
                for (a, b) in dw.iter_mut().zip(&pw) {
                    *a += b;
                }
                for (a, b) in db.iter_mut().zip(&pb) {
                    *a += b;
                }
            }
            buf.add_owned(weight.id, dw);
            buf.add_owned(bias.id, db);
        })),
    ))
}

fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize), OpError> {
    match shape {
        [c, h, w] => Ok((1, *c, h * w)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        other => dim_err(format!("expected image tensor, got {other:?}")),
    }
}

/// PReLU with one learned slope per channel.
pub fn prelu(tape: &mut Tape, x: Var, slope: Var) -> Result<Var, OpError> {
    let (n, c, sp) = channel_view(&tape.value(x).shape)?;
    if tape.value(slope).numel() != c {
        return dim_err(format!(
            "prelu expects one slope per channel ({c}), got {}",
            tape.value(slope).numel()
        ));
    }
    let xd = &tape.value(x).data;
    let ad = &tape.value(slope).data;
    let mut out = vec![0.0; n * c * sp];
    for i in 0..n {
        let base = i * c * sp;
        let y = kernels::prelu_forward(&xd[base..base + c * sp], c, sp, ad);
        out[base..base + c * sp].copy_from_slice(&y);
    }
    Ok(tape.push(
        Tensor::new(tape.value(x).shape.clone(), out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let xd = &t.value(x).data;
            let ad = &t.value(slope).data;
            let mut dx = vec![0.0; xd.len()];
            let mut da = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let a = ad[ch];
                    let base = (i * c + ch) * sp;
                    for j in 0..sp {
                        let v = xd[base + j];
                        let gv = g[base + j];
                        if v >= 0.0 {
                            dx[base + j] = gv;
                        } else {
                            dx[base + j] = gv * a;
                            da[ch] += gv * v;
                        }
                    }
                }
            }
            buf.add_owned(x.id, dx);
            buf.add_owned(slope.id, da);
        })),
    ))
}

/// Generalized divisive normalization (or its multiplicative inverse).
pub fn gdn(tape: &mut Tape, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var, OpError> {
    let (n, c, sp) = channel_view(&tape.value(x).shape)?;
    let tb = tape.value(beta);
    let tg = tape.value(gamma);
    if tb.numel() != c {
        return dim_err(format!("gdn beta length {} != channels {c}", tb.numel()));
    }
    if tg.shape != vec![c, c] {
        return dim_err(format!("gdn gamma shape {:?} != [{c},{c}]", tg.shape));
    }
    if let Some(bad) = tb.data.iter().find(|v| **v <= 0.0) {
        return Err(OpError::InvariantViolation(format!(
            "gdn beta must be strictly positive, found {bad}"
        )));
    }
    if let Some(bad) = tg.data.iter().find(|v| **v < 0.0) {
        return Err(OpError::InvariantViolation(format!(
            "gdn gamma must be nonnegative, found {bad}"
        )));
    }
    let xd = &tape.value(x).data;
    let bd = &tape.value(beta).data;
    let gd = &tape.value(gamma).data;
    let mut out = vec![0.0; n * c * sp];
    let mut denoms = vec![0.0; n * c * sp];
    for i in 0..n {
        let base = i * c * sp;
        let (y, d) = kernels::gdn_forward(&xd[base..base + c * sp], c, sp, bd, gd, inverse);
        out[base..base + c * sp].copy_from_slice(&y);
        denoms[base..base + c * sp].copy_from_slice(&d);
    }
    Ok(tape.push(
        Tensor::new(tape.value(x).shape.clone(), out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let xd = &t.value(x).data;
            let gam = &t.value(gamma).data;
            let mut dx = vec![0.0; xd.len()];
            let mut dbeta = vec![0.0; c];
            let mut dgamma = vec![0.0; c * c];
            for i in 0..n {
                let base = i * c * sp;
                let xs = &xd[base..base + c * sp];
                let gs = &g[base..base + c * sp];
                let ds = &denoms[base..base + c * sp];
                // t_i = g_i * x_i / d_i^3 (forward) or g_i * x_i / d_i (inverse)
                let mut tvec = vec![0.0; c * sp];
                for j in 0..c * sp {
                    tvec[j] = if inverse {
                        gs[j] * xs[j] / ds[j]
                    } else {
                        gs[j] * xs[j] / (ds[j] * ds[j] * ds[j])
                    };
                }
                // m_k = sum_i gamma_ik t_i  => m = gamma^T * tvec
                let mut m = vec![0.0; c * sp];
                kernels::gemm(c, c, sp, 1.0, gam, 1, c, &tvec, sp, 1, 0.0, &mut m, sp, 1);
                let sign = if inverse { 1.0 } else { -1.0 };
                for j in 0..c * sp {
                    let direct = if inverse { gs[j] * ds[j] } else { gs[j] / ds[j] };
                    dx[base + j] = direct + sign * xs[j] * m[j];
                }
                // dbeta_i = sign/2 * sum_sites t_i ; dgamma_ij = sign/2 * sum t_i x_j^2
                for ch in 0..c {
                    let s: f64 = tvec[ch * sp..(ch + 1) * sp].iter().sum();
                    dbeta[ch] += 0.5 * sign * s;
                }
                let mut sq = vec![0.0; c * sp];
                for j in 0..c * sp {
                    sq[j] = xs[j] * xs[j];
                }
                kernels::gemm(
                    c,
                    sp,
                    c,
                    0.5 * sign,
                    &tvec,
                    sp,
                    1,
                    &sq,
                    1,
                    sp,
                    1.0,
                    &mut dgamma,
                    c,
                    1,
                );
            }
            buf.add_owned(x.id, dx);
            buf.add_owned(beta.id, dbeta);
            buf.add_owned(gamma.id, dgamma);
        })),
    ))
}

/// Per-channel spatial mean: [C,H,W] -> [C] (batched: [N,C,H,W] -> [N,C]).
pub fn avgpool_global(tape: &mut Tape, x: Var) -> Result<Var, OpError> {
    let (n, c, sp) = channel_view(&tape.value(x).shape)?;
    let xd = &tape.value(x).data;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * sp;
            out[i * c + ch] = xd[base..base + sp].iter().sum::<f64>() / sp as f64;
        }
    }
    let shape = if tape.value(x).rank() == 3 { vec![c] } else { vec![n, c] };
    Ok(tape.push(
        Tensor::new(shape, out).expect("sized"),
        Some(Box::new(move |_t, g, buf| {
            let mut dx = vec![0.0; n * c * sp];
            for i in 0..n {
                for ch in 0..c {
                    let gv = g[i * c + ch] / sp as f64;
                    let base = (i * c + ch) * sp;
                    dx[base..base + sp].fill(gv);
                }
            }
            buf.add_owned(x.id, dx);
        })),
    ))
}

/// Fully connected layer: x [C] -> [K], or batched [N,C] -> [N,K].
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var, OpError> {
    let (n, c) = match tape.value(x).shape.as_slice() {
        [c] => (1, *c),
        [n, c] => (*n, *c),
        other => return dim_err(format!("linear input rank {other:?}")),
    };
    let wshape = tape.value(weight).shape.clone();
    if wshape.len() != 2 || wshape[1] != c {
        return dim_err(format!("linear weight {:?} vs input features {c}", wshape));
    }
    let kdim = wshape[0];
    if tape.value(bias).numel() != kdim {
        return dim_err("linear bias length mismatch");
    }
    let xd = &tape.value(x).data;
    let wd = &tape.value(weight).data;
    let bd = &tape.value(bias).data;
    let mut out = vec![0.0; n * kdim];
    // out[n,k] = x[n,c] . w[k,c]
    kernels::gemm(n, c, kdim, 1.0, xd, c, 1, wd, 1, c, 0.0, &mut out, kdim, 1);
    for i in 0..n {
        for k in 0..kdim {
            out[i * kdim + k] += bd[k];
        }
    }
    let shape = if tape.value(x).rank() == 1 { vec![kdim] } else { vec![n, kdim] };
    Ok(tape.push(
        Tensor::new(shape, out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let xd = &t.value(x).data;
            let wd = &t.value(weight).data;
            // dx[n,c] = g[n,k] . w[k,c]
            let mut dx = vec![0.0; n * c];
            kernels::gemm(n, kdim, c, 1.0, g, kdim, 1, wd, c, 1, 0.0, &mut dx, c, 1);
            buf.add_owned(x.id, dx);
            // dw[k,c] = g^T[k,n] . x[n,c]
            let mut dw = vec![0.0; kdim * c];
            kernels::gemm(kdim, n, c, 1.0, g, 1, kdim, xd, c, 1, 0.0, &mut dw, c, 1);
            buf.add_owned(weight.id, dw);
            let mut db = vec![0.0; kdim];
            for i in 0..n {
                for k in 0..kdim {
                    db[k] += g[i * kdim + k];
                }
            }
            buf.add_owned(bias.id, db);
        })),
    ))
}

/// Cross-entropy of softmaxed logits against integer class targets, averaged
/// over the batch. Logits are [K] (single) or [N,K].
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, OpError> {
    let (n, k) = match tape.value(logits).shape.as_slice() {
        [k] => (1, *k),
        [n, k] => (*n, *k),
        other => return dim_err(format!("logits rank {other:?}")),
    };
    if targets.len() != n {
        return dim_err(format!("{} targets for batch of {n}", targets.len()));
    }
    for &t in targets {
        if t >= k {
            return Err(OpError::TargetOutOfRange { target: t, classes: k });
        }
    }
    let ld = &tape.value(logits).data;
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            probs[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            probs[i * k + j] /= z;
        }
        loss -= probs[i * k + targets[i]].max(f64::MIN_POSITIVE).ln();
    }
    loss /= n as f64;
    let targets = targets.to_vec();
    Ok(tape.push(
        Tensor::scalar(loss),
        Some(Box::new(move |_t, g, buf| {
            let c = g[0] / n as f64;
            let mut dl = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..k {
                    let ind = if j == targets[i] { 1.0 } else { 0.0 };
                    dl[i * k + j] = c * (probs[i * k + j] - ind);
                }
            }
            buf.add_owned(logits.id, dl);
        })),
    ))
}

/// Binary cross-entropy between sigmoid(logits) and soft targets, averaged.
/// Computed in logit space (softplus(z) - h*z) for stability.
pub fn bce_with_logits_mean(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var, OpError> {
    let z = tape.value(logits);
    if z.numel() != targets.len() {
        return dim_err(format!("{} targets for {} logits", targets.len(), z.numel()));
    }
    let n = targets.len() as f64;
    let loss: f64 = z
        .data
        .iter()
        .zip(targets)
        .map(|(&zv, &h)| softplus(zv) - h * zv)
        .sum::<f64>()
        / n;
    let targets = targets.to_vec();
    Ok(tape.push(
        Tensor::scalar(loss),
        Some(Box::new(move |t, g, buf| {
            let z = &t.value(logits).data;
            let c = g[0] / n;
            buf.add_owned(
                logits.id,
                z.iter()
                    .zip(&targets)
                    .map(|(&zv, &h)| c * (stable_sigmoid(zv) - h))
                    .collect(),
            );
        })),
    ))
}

/// Regroups an image tensor so each channel's values are contiguous:
/// [C,H,W] or [N,C,H,W] -> [C, 1, N*H*W]. Feeds the per-channel density.
pub fn group_by_channel(tape: &mut Tape, x: Var) -> Result<Var, OpError> {
    let (n, c, sp) = channel_view(&tape.value(x).shape)?;
    let xd = &tape.value(x).data;
    let m = n * sp;
    let mut out = vec![0.0; c * m];
    for i in 0..n {
        for ch in 0..c {
            let src = &xd[(i * c + ch) * sp..(i * c + ch + 1) * sp];
            out[ch * m + i * sp..ch * m + (i + 1) * sp].copy_from_slice(src);
        }
    }
    Ok(tape.push(
        Tensor::new(vec![c, 1, m], out).expect("sized"),
        Some(Box::new(move |_t, g, buf| {
            let mut dx = vec![0.0; n * c * sp];
            for i in 0..n {
                for ch in 0..c {
                    let dst = &mut dx[(i * c + ch) * sp..(i * c + ch + 1) * sp];
                    dst.copy_from_slice(&g[ch * m + i * sp..ch * m + (i + 1) * sp]);
                }
            }
            buf.add_owned(x.id, dx);
        })),
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One stage of the per-channel monotone CDF network:
/// v = softplus(m_raw) . u + bias, then out = v + tanh(gain_raw) ⊙ tanh(v)
/// when a gain is present (all but the last stage).
///
/// u: [C, F_in, N], m_raw: [C, F_out, F_in], bias/gain: [C, F_out].
pub fn density_stage(
    tape: &mut Tape,
    u: Var,
    m_raw: Var,
    bias: Var,
    gain_raw: Option<Var>,
) -> Result<Var, OpError> {
    let ushape = tape.value(u).shape.clone();
    let mshape = tape.value(m_raw).shape.clone();
    let (c, f_in, nn) = match ushape.as_slice() {
        [c, f, n] => (*c, *f, *n),
        other => return dim_err(format!("density input {other:?}")),
    };
    let (mc, f_out, mf_in) = match mshape.as_slice() {
        [c, fo, fi] => (*c, *fo, *fi),
        other => return dim_err(format!("density matrix {other:?}")),
    };
    if mc != c || mf_in != f_in {
        return dim_err(format!("density matrix {mshape:?} vs input {ushape:?}"));
    }
    if tape.value(bias).shape != vec![c, f_out] {
        return dim_err("density bias shape");
    }
    if let Some(gv) = gain_raw {
        if tape.value(gv).shape != vec![c, f_out] {
            return dim_err("density gain shape");
        }
    }
    let ud = &tape.value(u).data;
    let md = &tape.value(m_raw).data;
    let bd = &tape.value(bias).data;
    let gain_t = gain_raw.map(|gv| tape.value(gv).data.clone());

    let mut v = vec![0.0; c * f_out * nn];
    for ch in 0..c {
        for fo in 0..f_out {
            let b = bd[ch * f_out + fo];
            let vrow = &mut v[(ch * f_out + fo) * nn..(ch * f_out + fo + 1) * nn];
            vrow.fill(b);
            for fi in 0..f_in {
                let m = softplus(md[(ch * f_out + fo) * f_in + fi]);
                let urow = &ud[(ch * f_in + fi) * nn..(ch * f_in + fi + 1) * nn];
                for (o, &uu) in vrow.iter_mut().zip(urow) {
                    *o += m * uu;
                }
            }
        }
    }
    let (out, tanh_v): (Vec<f64>, Vec<f64>) = if let Some(gd) = &gain_t {
        let mut out = vec![0.0; v.len()];
        let mut tv = vec![0.0; v.len()];
        for ch in 0..c {
            for fo in 0..f_out {
                let a = gd[ch * f_out + fo].tanh();
                for j in 0..nn {
                    let idx = (ch * f_out + fo) * nn + j;
                    let t = v[idx].tanh();
                    tv[idx] = t;
                    out[idx] = v[idx] + a * t;
                }
            }
        }
        (out, tv)
    } else {
        (v, Vec::new())
    };
    Ok(tape.push(
        Tensor::new(vec![c, f_out, nn], out).expect("sized"),
        Some(Box::new(move |t, g, buf| {
            let ud = &t.value(u).data;
            let md = &t.value(m_raw).data;
            // dv = g * dout/dv
            let mut dv = vec![0.0; c * f_out * nn];
            let mut dgain = gain_t.as_ref().map(|_| vec![0.0; c * f_out]);
            if let Some(gd) = &gain_t {
                for ch in 0..c {
                    for fo in 0..f_out {
                        let raw = gd[ch * f_out + fo];
                        let a = raw.tanh();
                        let mut da_acc = 0.0;
                        for j in 0..nn {
                            let idx = (ch * f_out + fo) * nn + j;
                            let tv = tanh_v[idx];
                            dv[idx] = g[idx] * (1.0 + a * (1.0 - tv * tv));
                            da_acc += g[idx] * tv;
                        }
                        // d(tanh(raw))/draw = 1 - a^2
                        dgain.as_mut().unwrap()[ch * f_out + fo] = da_acc * (1.0 - a * a);
                    }
                }
            } else {
                dv.copy_from_slice(g);
            }
            // du[c,fi,n] = sum_fo softplus(m) dv ; dm_raw via sigmoid(m_raw)
            let mut du = vec![0.0; c * f_in * nn];
            let mut dm = vec![0.0; c * f_out * f_in];
            let mut db = vec![0.0; c * f_out];
            for ch in 0..c {
                for fo in 0..f_out {
                    let dvrow = &dv[(ch * f_out + fo) * nn..(ch * f_out + fo + 1) * nn];
                    db[ch * f_out + fo] = dvrow.iter().sum();
                    for fi in 0..f_in {
                        let raw = md[(ch * f_out + fo) * f_in + fi];
                        let m = softplus(raw);
                        let urow = &ud[(ch * f_in + fi) * nn..(ch * f_in + fi + 1) * nn];
                        let durow = &mut du[(ch * f_in + fi) * nn..(ch * f_in + fi + 1) * nn];
                        let mut dot = 0.0;
                        for j in 0..nn {
                            durow[j] += m * dvrow[j];
                            dot += dvrow[j] * urow[j];
                        }
                        dm[(ch * f_out + fo) * f_in + fi] = dot * stable_sigmoid(raw);
                    }
                }
            }
            buf.add_owned(u.id, du);
            buf.add_owned(m_raw.id, dm);
            buf.add_owned(bias.id, db);
            if let (Some(gv), Some(dg)) = (gain_raw, dgain) {
                buf.add_owned(gv.id, dg);
            }
        })),
    ))
}
