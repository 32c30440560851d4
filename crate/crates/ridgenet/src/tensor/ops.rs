//! Forward primitives and their backward rules.
//!
//! Every operation validates its shape preconditions, computes the forward
//! value, and — when gradient recording is enabled and some input requires a
//! gradient — attaches an [`Op`] node carrying exactly the context its
//! backward rule consumes (pooling argmax indices, batch statistics, ...).
//!
//! Convolution and the affine layer lower to GEMM calls; the nested-loop
//! convolution in the test suite is the semantic reference.

use super::{is_grad_enabled, Element, Tensor};
use crate::error::{Error, Result};

/// Whether a normalization layer uses batch statistics (`Train`) or its
/// running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Floor of probability values fed to the logarithm in the classification
/// loss; avoids `-inf` on confident wrong predictions.
pub const PROB_CLAMP: f64 = 1e-12;

pub(crate) enum Op<E: Element> {
    Relu {
        x: Tensor<E>,
    },
    Add {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Mul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Scale {
        x: Tensor<E>,
        k: E,
    },
    Sum {
        x: Tensor<E>,
    },
    Flatten {
        x: Tensor<E>,
    },
    Affine {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
    },
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        b: Option<Tensor<E>>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        /// Normalized activations, saved at forward time.
        xhat: Vec<E>,
        /// Per-channel 1/sqrt(var + eps) actually used by the forward pass.
        inv_std: Vec<E>,
        /// Batch statistics participate in the gradient only in train mode.
        train: bool,
    },
    MaxPool {
        x: Tensor<E>,
        /// Flat input index of the selected maximum, per output element.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Tensor<E>,
    },
    Softmax {
        x: Tensor<E>,
    },
    NllMean {
        q: Tensor<E>,
        p: Tensor<E>,
    },
}

impl<E: Element> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Flatten { x }
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x } => vec![x.clone()],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a.clone(), b.clone()],
            Op::Affine { x, w, b } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = b {
                    v.push(b.clone());
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x.clone(), gamma.clone(), beta.clone()]
            }
            Op::NllMean { q, .. } => vec![q.clone()],
        }
    }

    /// Gradient contributions for each input, given the output tensor and
    /// the gradient flowing into it.
    pub(crate) fn backward(&self, out: &Tensor<E>, gout: &[E]) -> Vec<(Tensor<E>, Vec<E>)> {
        match self {
            Op::Relu { x } => {
                let xd = x.data();
                let gin = xd
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                    .collect();
                vec![(x.clone(), gin)]
            }
            Op::Add { a, b } => vec![(a.clone(), gout.to_vec()), (b.clone(), gout.to_vec())],
            Op::Mul { a, b } => {
                let mut outs = Vec::new();
                if a.requires_grad() {
                    let bd = b.data();
                    outs.push((
                        a.clone(),
                        gout.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect(),
                    ));
                }
                if b.requires_grad() {
                    let ad = a.data();
                    outs.push((
                        b.clone(),
                        gout.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect(),
                    ));
                }
                outs
            }
            Op::Scale { x, k } => {
                vec![(x.clone(), gout.iter().map(|&g| g * *k).collect())]
            }
            Op::Sum { x } => {
                let g = gout[0];
                vec![(x.clone(), vec![g; x.numel()])]
            }
            Op::Flatten { x } => vec![(x.clone(), gout.to_vec())],
            Op::Affine { x, w, b } => backward_affine(x, w, b.as_ref(), gout),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => backward_conv2d(x, w, b.as_ref(), *stride, *padding, out, gout),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => backward_batchnorm(x, gamma, beta, xhat, inv_std, *train, gout),
            Op::MaxPool { x, argmax } => {
                let mut gin = vec![E::zero(); x.numel()];
                for (&idx, &g) in argmax.iter().zip(gout) {
                    gin[idx] = gin[idx] + g;
                }
                vec![(x.clone(), gin)]
            }
            Op::GlobalAvgPool { x } => {
                let (b, c, h, w) = dims4(x.shape());
                let scale = E::from_f64(1.0 / (h * w) as f64);
                let mut gin = vec![E::zero(); x.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let g = gout[bi * c + ci] * scale;
                        let base = (bi * c + ci) * h * w;
                        for v in &mut gin[base..base + h * w] {
                            *v = g;
                        }
                    }
                }
                vec![(x.clone(), gin)]
            }
            Op::Softmax { x } => {
                let y = out.data();
                let cols = *x.shape().last().unwrap();
                let rows = x.numel() / cols;
                let mut gin = vec![E::zero(); x.numel()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0f64;
                    for i in 0..cols {
                        dot += (gout[base + i] * y[base + i]).as_f64();
                    }
                    let dot = E::from_f64(dot);
                    for i in 0..cols {
                        gin[base + i] = y[base + i] * (gout[base + i] - dot);
                    }
                }
                vec![(x.clone(), gin)]
            }
            Op::NllMean { q, p } => {
                let qd = q.data();
                let pd = p.data();
                let batch = q.shape()[0];
                let clamp = E::from_f64(PROB_CLAMP);
                let scale = gout[0] * E::from_f64(-1.0 / batch as f64);
                let gin = qd
                    .iter()
                    .zip(pd.iter())
                    .map(|(&qv, &pv)| {
                        if qv < clamp {
                            E::zero()
                        } else {
                            scale * pv / qv
                        }
                    })
                    .collect();
                vec![(q.clone(), gin)]
            }
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn track<E: Element>(inputs: &[&Tensor<E>]) -> bool {
    is_grad_enabled() && inputs.iter().any(|t| t.requires_grad())
}

/// Elementwise max(x, 0). The subgradient at 0 is 0.
pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > E::zero() { v } else { E::zero() })
        .collect();
    let op = track(&[x]).then(|| Op::Relu { x: x.clone() });
    Tensor::from_op(x.shape().to_vec(), data, op)
}

/// Elementwise sum of two identically shaped tensors.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let op = track(&[a, b]).then(|| Op::Add {
        a: a.clone(),
        b: b.clone(),
    });
    Ok(Tensor::from_op(a.shape().to_vec(), data, op))
}

/// Elementwise product of two identically shaped tensors.
pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let op = track(&[a, b]).then(|| Op::Mul {
        a: a.clone(),
        b: b.clone(),
    });
    Ok(Tensor::from_op(a.shape().to_vec(), data, op))
}

/// Multiply every element by a constant.
pub fn scale<E: Element>(x: &Tensor<E>, k: E) -> Tensor<E> {
    let data = x.data().iter().map(|&v| v * k).collect();
    let op = track(&[x]).then(|| Op::Scale { x: x.clone(), k });
    Tensor::from_op(x.shape().to_vec(), data, op)
}

/// Sum of all elements, as a scalar tensor of shape `[1]`.
pub fn sum<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = 0.0f64;
    for &v in x.data().iter() {
        acc += v.as_f64();
    }
    let op = track(&[x]).then(|| Op::Sum { x: x.clone() });
    Ok(Tensor::from_op(vec![1], vec![E::from_f64(acc)], op))
}

/// Collapse every axis after the first: `[B, d1, d2, ...]` -> `[B, d1*d2*...]`.
pub fn flatten<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.ndim() < 1 {
        return Err(Error::invalid("flatten requires rank >= 1".to_string()));
    }
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product::<usize>().max(1);
    let data = x.to_vec();
    let op = track(&[x]).then(|| Op::Flatten { x: x.clone() });
    Ok(Tensor::from_op(vec![b, rest], data, op))
}

/// Row-major GEMM helper: `c[m,n] (+)= alpha * a[m,k] @ b[k,n]`.
/// Transposition is expressed through the stride pairs.
#[allow(clippy::too_many_arguments)]
fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    beta: E,
    c: &mut [E],
) {
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
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

/// `x[B,D] @ w[D,M] + b[M]`.
pub fn affine<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (batch, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    if let Some(bias) = b {
        if bias.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                lhs: bias.shape().to_vec(),
                rhs: vec![m],
            });
        }
    }
    let mut out = vec![E::zero(); batch * m];
    gemm(
        batch,
        d,
        m,
        E::one(),
        &x.data(),
        d as isize,
        1,
        &w.data(),
        m as isize,
        1,
        E::zero(),
        &mut out,
    );
    if let Some(bias) = b {
        let bd = bias.data();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                *o = *o + bv;
            }
        }
    }
    let mut ins: Vec<&Tensor<E>> = vec![x, w];
    if let Some(bias) = b {
        ins.push(bias);
    }
    let op = track(&ins).then(|| Op::Affine {
        x: x.clone(),
        w: w.clone(),
        b: b.cloned(),
    });
    Ok(Tensor::from_op(vec![batch, m], out, op))
}

fn backward_affine<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    gout: &[E],
) -> Vec<(Tensor<E>, Vec<E>)> {
    let (batch, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut outs = Vec::new();
    if x.requires_grad() {
        // dx[B,D] = gout[B,M] @ w^T[M,D]
        let mut dx = vec![E::zero(); batch * d];
        gemm(
            batch,
            m,
            d,
            E::one(),
            gout,
            m as isize,
            1,
            &w.data(),
            1,
            m as isize,
            E::zero(),
            &mut dx,
        );
        outs.push((x.clone(), dx));
    }
    if w.requires_grad() {
        // dw[D,M] = x^T[D,B] @ gout[B,M]
        let mut dw = vec![E::zero(); d * m];
        gemm(
            d,
            batch,
            m,
            E::one(),
            &x.data(),
            1,
            d as isize,
            gout,
            m as isize,
            1,
            E::zero(),
            &mut dw,
        );
        outs.push((w.clone(), dw));
    }
    if let Some(bias) = b {
        if bias.requires_grad() {
            let mut db = vec![E::zero(); m];
            for row in gout.chunks_exact(m) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc = *acc + g;
                }
            }
            outs.push((bias.clone(), db));
        }
    }
    outs
}

/// Output spatial extent of a convolution/pool: floor((H + 2p - K)/s) + 1.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lower one image `[Ci,H,W]` into a patch matrix `[Ci*Kh*Kw, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    col: &mut [E],
) {
    let how = ho * wo;
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * how..][..how];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    let seg = &mut row[oy * wo..oy * wo + wo];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(E::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..][..w];
                    // Valid ox range: 0 <= ox*stride + j - padding < w.
                    let lo = padding.saturating_sub(j).div_ceil(stride).min(wo);
                    let hi = if w + padding > j {
                        ((w + padding - j - 1) / stride + 1).min(wo)
                    } else {
                        0
                    };
                    seg[..lo].fill(E::zero());
                    seg[hi..].fill(E::zero());
                    if stride == 1 {
                        let start = lo + j - padding;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, slot) in seg[lo..hi].iter_mut().enumerate() {
                            *slot = src[(lo + ox) * stride + j - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto one image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    col: &[E],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [E],
) {
    let how = ho * wo;
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * how..][..how];
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            let ix = ix as usize;
                            dst[ix] = dst[ix] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding.
///
/// `x: [B,Ci,H,W]`, `w: [Co,Ci,Kh,Kw]`, optional `bias: [Co]`; output
/// `[B,Co,Ho,Wo]` with `Ho = floor((H + 2p - Kh)/stride) + 1`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive".to_string()));
    }
    let (b, ci, h, wd) = dims4(x.shape());
    let (co, wci, kh, kw) = dims4(w.shape());
    if ci != wci {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (ho, wo) = match (
        conv_out_extent(h, kh, stride, padding),
        conv_out_extent(wd, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{} (input {h}x{wd}, padding {padding})",
                h + 2 * padding,
                wd + 2 * padding
            )))
        }
    };
    if let Some(bt) = bias {
        if bt.shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: bt.shape().to_vec(),
                rhs: vec![co],
            });
        }
    }

    let k = ci * kh * kw;
    let how = ho * wo;
    let mut out = vec![E::zero(); b * co * how];
    let mut col = vec![E::zero(); k * how];
    {
        let xd = x.data();
        let wdat = w.data();
        for bi in 0..b {
            im2col(
                &xd[bi * ci * h * wd..][..ci * h * wd],
                ci,
                h,
                wd,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut col,
            );
            gemm(
                co,
                k,
                how,
                E::one(),
                &wdat,
                k as isize,
                1,
                &col,
                how as isize,
                1,
                E::zero(),
                &mut out[bi * co * how..][..co * how],
            );
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for bi in 0..b {
                for c in 0..co {
                    let bv = bd[c];
                    for v in &mut out[(bi * co + c) * how..][..how] {
                        *v = *v + bv;
                    }
                }
            }
        }
    }

    let mut ins: Vec<&Tensor<E>> = vec![x, w];
    if let Some(bt) = bias {
        ins.push(bt);
    }
    let op = track(&ins).then(|| Op::Conv2d {
        x: x.clone(),
        w: w.clone(),
        b: bias.cloned(),
        stride,
        padding,
    });
    Ok(Tensor::from_op(vec![b, co, ho, wo], out, op))
}

fn backward_conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    out: &Tensor<E>,
    gout: &[E],
) -> Vec<(Tensor<E>, Vec<E>)> {
    let (b, ci, h, wd) = dims4(x.shape());
    let (co, _, kh, kw) = dims4(w.shape());
    let (ho, wo) = (out.shape()[2], out.shape()[3]);
    let k = ci * kh * kw;
    let how = ho * wo;

    let need_dx = x.requires_grad();
    let need_dw = w.requires_grad();
    let mut dx = if need_dx {
        vec![E::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut dw = if need_dw {
        vec![E::zero(); w.numel()]
    } else {
        Vec::new()
    };
    let mut col = vec![E::zero(); k * how];
    let xd = x.data();
    let wdat = w.data();

    for bi in 0..b {
        let gb = &gout[bi * co * how..][..co * how];
        if need_dw {
            im2col(
                &xd[bi * ci * h * wd..][..ci * h * wd],
                ci,
                h,
                wd,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut col,
            );
            // dw[Co,K] += gb[Co,HoWo] @ col^T[HoWo,K]
            gemm(
                co,
                how,
                k,
                E::one(),
                gb,
                how as isize,
                1,
                &col,
                1,
                how as isize,
                E::one(),
                &mut dw,
            );
        }
        if need_dx {
            // dcol[K,HoWo] = w^T[K,Co] @ gb[Co,HoWo]
            gemm(
                k,
                co,
                how,
                E::one(),
                &wdat,
                1,
                k as isize,
                gb,
                how as isize,
                1,
                E::zero(),
                &mut col,
            );
            col2im_add(
                &col,
                ci,
                h,
                wd,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut dx[bi * ci * h * wd..][..ci * h * wd],
            );
        }
    }

    let mut outs = Vec::new();
    if need_dx {
        outs.push((x.clone(), dx));
    }
    if need_dw {
        outs.push((w.clone(), dw));
    }
    if let Some(bt) = bias {
        if bt.requires_grad() {
            let mut db = vec![E::zero(); co];
            for bi in 0..b {
                for c in 0..co {
                    let mut acc = 0.0f64;
                    for &g in &gout[(bi * co + c) * how..][..how] {
                        acc += g.as_f64();
                    }
                    db[c] = db[c] + E::from_f64(acc);
                }
            }
            outs.push((bt.clone(), db));
        }
    }
    outs
}

/// Per-channel batch normalization over `(B,H,W)`.
///
/// Train mode normalizes with batch statistics and updates the running
/// statistics in place by exponential moving average (`running = (1-m)*running
/// + m*batch`, unbiased variance for the running update). Eval mode uses the
/// running statistics only.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut [E],
    running_var: &mut [E],
    phase: Phase,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<E>> {
    if x.ndim() != 4 {
        return Err(Error::invalid(format!(
            "batchnorm2d expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = dims4(x.shape());
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c
    {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d per-channel parameters",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::invalid("batchnorm2d: eps must be positive".to_string()));
    }
    let m = b * h * w;
    if phase == Phase::Train && m == 1 {
        return Err(Error::invalid(
            "batchnorm2d: train mode with a single element per channel has undefined variance"
                .to_string(),
        ));
    }

    let plane = h * w;
    let mut mean = vec![E::zero(); c];
    let mut inv_std = vec![E::zero(); c];
    {
        let xd = x.data();
        match phase {
            Phase::Train => {
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ci) * plane..][..plane] {
                            acc += v.as_f64();
                        }
                    }
                    let mu = acc / m as f64;
                    let mut var_acc = 0.0f64;
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ci) * plane..][..plane] {
                            let d = v.as_f64() - mu;
                            var_acc += d * d;
                        }
                    }
                    let var = var_acc / m as f64;
                    mean[ci] = E::from_f64(mu);
                    inv_std[ci] = E::from_f64(1.0 / (var + eps).sqrt());
                    let unbiased = var * m as f64 / (m - 1) as f64;
                    running_mean[ci] = E::from_f64(
                        (1.0 - momentum) * running_mean[ci].as_f64() + momentum * mu,
                    );
                    running_var[ci] = E::from_f64(
                        (1.0 - momentum) * running_var[ci].as_f64() + momentum * unbiased,
                    );
                }
            }
            Phase::Eval => {
                for ci in 0..c {
                    mean[ci] = running_mean[ci];
                    inv_std[ci] = E::from_f64(1.0 / (running_var[ci].as_f64() + eps).sqrt());
                }
            }
        }
    }

    let mut xhat = vec![E::zero(); x.numel()];
    let mut out = vec![E::zero(); x.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, is, g, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for idx in base..base + plane {
                    let xh = (xd[idx] - mu) * is;
                    xhat[idx] = xh;
                    out[idx] = g * xh + be;
                }
            }
        }
    }

    let op = track(&[x, gamma, beta]).then(|| Op::BatchNorm {
        x: x.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        xhat: xhat.clone(),
        inv_std: inv_std.clone(),
        train: phase == Phase::Train,
    });
    Ok(Tensor::from_op(x.shape().to_vec(), out, op))
}

fn backward_batchnorm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    xhat: &[E],
    inv_std: &[E],
    train: bool,
    gout: &[E],
) -> Vec<(Tensor<E>, Vec<E>)> {
    let (b, c, h, w) = dims4(x.shape());
    let plane = h * w;
    let m = (b * plane) as f64;

    // Per-channel reductions: sum(g) and sum(g * xhat).
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (mut a0, mut a1) = (0.0f64, 0.0f64);
            for idx in base..base + plane {
                let g = gout[idx].as_f64();
                a0 += g;
                a1 += g * xhat[idx].as_f64();
            }
            sum_g[ci] += a0;
            sum_gx[ci] += a1;
        }
    }

    let mut outs = Vec::new();
    if x.requires_grad() {
        let gd = gamma.data();
        let mut dx = vec![E::zero(); x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let gs = gd[ci].as_f64() * inv_std[ci].as_f64();
                if train {
                    let mg = sum_g[ci] / m;
                    let mgx = sum_gx[ci] / m;
                    for idx in base..base + plane {
                        let g = gout[idx].as_f64();
                        dx[idx] = E::from_f64(gs * (g - mg - xhat[idx].as_f64() * mgx));
                    }
                } else {
                    for idx in base..base + plane {
                        dx[idx] = E::from_f64(gs * gout[idx].as_f64());
                    }
                }
            }
        }
        outs.push((x.clone(), dx));
    }
    if gamma.requires_grad() {
        outs.push((
            gamma.clone(),
            sum_gx.iter().map(|&v| E::from_f64(v)).collect(),
        ));
    }
    if beta.requires_grad() {
        outs.push((
            beta.clone(),
            sum_g.iter().map(|&v| E::from_f64(v)).collect(),
        ));
    }
    outs
}

/// Square max-pooling; saves the argmax for the backward route. Padded
/// positions are never selected. Requires `padding < window`.
pub fn maxpool2d<E: Element>(
    x: &Tensor<E>,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    if x.ndim() != 4 {
        return Err(Error::invalid(format!(
            "maxpool2d expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d: window and stride must be positive".to_string(),
        ));
    }
    if padding >= window {
        return Err(Error::invalid(format!(
            "maxpool2d: padding {padding} must be smaller than window {window}"
        )));
    }
    let (b, c, h, w) = dims4(x.shape());
    let (ho, wo) = match (
        conv_out_extent(h, window, stride, padding),
        conv_out_extent(w, window, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d window",
                lhs: vec![window, window],
                rhs: vec![h + 2 * padding, w + 2 * padding],
            })
        }
    };

    let mut out = vec![E::zero(); b * c * ho * wo];
    let mut argmax = vec![0usize; b * c * ho * wo];
    {
        let xd = x.data();
        let mut o = 0usize;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best: Option<(E, usize)> = None;
                        for i in 0..window {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..window {
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                let v = xd[idx];
                                // Ties keep the first (row-major) position.
                                if best.map_or(true, |(bv, _)| v > bv) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                        let (v, idx) = best.expect("window overlaps input");
                        out[o] = v;
                        argmax[o] = idx;
                        o += 1;
                    }
                }
            }
        }
    }

    let op = track(&[x]).then(|| Op::MaxPool {
        x: x.clone(),
        argmax: argmax.clone(),
    });
    Ok(Tensor::from_op(vec![b, c, ho, wo], out, op))
}

/// Spatial mean per channel: `[B,C,H,W]` -> `[B,C]`.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.ndim() != 4 {
        return Err(Error::invalid(format!(
            "global_avg_pool expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = dims4(x.shape());
    let plane = h * w;
    let mut out = vec![E::zero(); b * c];
    {
        let xd = x.data();
        for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(plane)) {
            let mut acc = 0.0f64;
            for &v in chunk {
                acc += v.as_f64();
            }
            *o = E::from_f64(acc / plane as f64);
        }
    }
    let op = track(&[x]).then(|| Op::GlobalAvgPool { x: x.clone() });
    Ok(Tensor::from_op(vec![b, c], out, op))
}

/// Exp-normalization over the last axis with max-subtraction for stability.
pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.ndim() == 0 {
        return Err(Error::invalid("softmax requires rank >= 1".to_string()));
    }
    let cols = *x.shape().last().unwrap();
    let rows = x.numel() / cols;
    let mut out = vec![E::zero(); x.numel()];
    {
        let xd = x.data();
        for r in 0..rows {
            let row = &xd[r * cols..][..cols];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = 0.0f64;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * cols + i] = e;
                denom += e.as_f64();
            }
            let inv = E::from_f64(1.0 / denom);
            for o in &mut out[r * cols..r * cols + cols] {
                *o = *o * inv;
            }
        }
    }
    let op = track(&[x]).then(|| Op::Softmax { x: x.clone() });
    Ok(Tensor::from_op(x.shape().to_vec(), out, op))
}

/// Mean over the batch of `-sum_i p_i * ln(max(q_i, PROB_CLAMP))`.
///
/// `q` are predicted probabilities `[B,C]` (a graph tensor), `p` the
/// reference distribution, treated as a constant.
pub fn nll_mean<E: Element>(q: &Tensor<E>, p: &Tensor<E>) -> Result<Tensor<E>> {
    if q.ndim() != 2 || q.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            op: "nll_mean",
            lhs: q.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    let batch = q.shape()[0];
    let clamp = PROB_CLAMP;
    let mut acc = 0.0f64;
    {
        let qd = q.data();
        let pd = p.data();
        for (&qv, &pv) in qd.iter().zip(pd.iter()) {
            let pvf = pv.as_f64();
            if pvf != 0.0 {
                acc -= pvf * qv.as_f64().max(clamp).ln();
            }
        }
    }
    let loss = acc / batch as f64;
    let op = track(&[q]).then(|| Op::NllMean {
        q: q.clone(),
        p: p.clone(),
    });
    Ok(Tensor::from_op(vec![1], vec![E::from_f64(loss)], op))
}
