//! Raw numeric kernels shared by the tape ops.
//!
//! Everything is plain f64 on contiguous buffers. The convolution uses
//! im2col plus a cache-friendly matmul; backward passes rebuild the patch
//! matrix instead of caching it, trading a little compute for memory.

use crate::labels::{LabelBatch, IGNORE};
use crate::tensor::Tensor;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C[k_dim? m,n] += A[k,m]^T * B[k,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

/// Output spatial size of a convolution, floor semantics.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Gather conv patches of one batch item into `cols[cin*kh*kw, ho*wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    let plane = ho * wo;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xr = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xr[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add patch gradients back to the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..cin {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dxc[iy as usize * w + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// conv2d forward. x `[B,Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (bsz, cin, h, wd) = shape4(x);
    let (cout, wcin, kh, kw) = shape4(w);
    debug_assert_eq!(cin, wcin);
    debug_assert_eq!(bias.shape(), &[cout]);
    let ho = conv_out_dim(h, kh, stride, pad).expect("conv output height");
    let wo = conv_out_dim(wd, kw, stride, pad).expect("conv output width");
    let plane = ho * wo;
    let kdim = cin * kh * kw;
    let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
    let mut cols = vec![0.0; kdim * plane];
    for b in 0..bsz {
        let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        im2col(xb, cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
        let ob = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        for co in 0..cout {
            ob[co * plane..(co + 1) * plane].fill(bias.data()[co]);
        }
        matmul_acc(w.data(), &cols, ob, cout, kdim, plane);
    }
    out
}

/// conv2d backward; returns (dx, dw, db).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (bsz, cin, h, wd) = shape4(x);
    let (cout, _, kh, kw) = shape4(w);
    let (_, _, ho, wo) = shape4(dout);
    let plane = ho * wo;
    let kdim = cin * kh * kw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![0.0; kdim * plane];
    let mut dcols = vec![0.0; kdim * plane];
    for b in 0..bsz {
        let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let dob = &dout.data()[b * cout * plane..(b + 1) * cout * plane];
        im2col(xb, cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
        // dw += dout * cols^T
        matmul_nt_acc(dob, &cols, dw.data_mut(), cout, plane, kdim);
        // db += row sums of dout
        for co in 0..cout {
            db.data_mut()[co] += dob[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
        // dcols = w^T * dout, scattered back into dx
        dcols.fill(0.0);
        matmul_tn_acc(w.data(), dob, &mut dcols, kdim, cout, plane);
        let dxb = &mut dx.data_mut()[b * cin * h * wd..(b + 1) * cin * h * wd];
        col2im_acc(&dcols, cin, h, wd, kh, kw, stride, pad, ho, wo, dxb);
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dout.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| v.tanh()).collect(),
    )
}

pub fn tanh_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    Tensor::new(
        y.shape().to_vec(),
        y.data()
            .iter()
            .zip(dout.data())
            .map(|(&y, &g)| g * (1.0 - y * y))
            .collect(),
    )
}

/// Concatenate along the channel axis of rank-4 tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (bsz, ca, h, w) = shape4(a);
    let (bb, cb, hb, wb) = shape4(b);
    debug_assert_eq!((bsz, h, w), (bb, hb, wb));
    let plane = h * w;
    let mut out = Tensor::zeros(&[bsz, ca + cb, h, w]);
    for i in 0..bsz {
        let dst = &mut out.data_mut()[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

/// Split a channel-concat gradient back into the two halves.
pub fn concat_channels_backward(dout: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    let (bsz, c, h, w) = shape4(dout);
    debug_assert_eq!(c, ca + cb);
    let plane = h * w;
    let mut da = Tensor::zeros(&[bsz, ca, h, w]);
    let mut db = Tensor::zeros(&[bsz, cb, h, w]);
    for i in 0..bsz {
        let src = &dout.data()[i * c * plane..(i + 1) * c * plane];
        da.data_mut()[i * ca * plane..(i + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
        db.data_mut()[i * cb * plane..(i + 1) * cb * plane].copy_from_slice(&src[ca * plane..]);
    }
    (da, db)
}

/// Reorder the batch axis: `out[i] = x[perm[i]]`.
pub fn permute_batch(x: &Tensor, perm: &[usize]) -> Tensor {
    let (bsz, c, h, w) = shape4(x);
    debug_assert_eq!(perm.len(), bsz);
    let item = c * h * w;
    let mut out = Tensor::zeros(x.shape());
    for (i, &src) in perm.iter().enumerate() {
        out.data_mut()[i * item..(i + 1) * item]
            .copy_from_slice(&x.data()[src * item..(src + 1) * item]);
    }
    out
}

/// Bilinear upsample by an integer factor, half-pixel-center sampling
/// (output pixel oy samples input coordinate (oy + 0.5)/f - 0.5, clamped).
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (bsz, c, h, w) = shape4(x);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
    let taps_y = interp_taps(h, factor);
    let taps_x = interp_taps(w, factor);
    for b in 0..bsz {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut out.data_mut()[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = taps_x[ox];
                    let v = (1.0 - wy) * ((1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1])
                        + wy * ((1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                    dst[oy * ow + ox] = v;
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dout: &Tensor, factor: usize) -> Tensor {
    let (bsz, c, oh, ow) = shape4(dout);
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(&[bsz, c, h, w]);
    let taps_y = interp_taps(h, factor);
    let taps_x = interp_taps(w, factor);
    for b in 0..bsz {
        for ch in 0..c {
            let src = &dout.data()[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            let dst = &mut dx.data_mut()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, wy) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = taps_x[ox];
                    let g = src[oy * ow + ox];
                    dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                    dst[y1 * w + x0] += g * wy * (1.0 - wx);
                    dst[y1 * w + x1] += g * wy * wx;
                }
            }
        }
    }
    dx
}

/// (low index, high index, high weight) for each output coordinate.
fn interp_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let lo = s.floor();
            let frac = s - lo;
            let i0 = (lo.max(0.0) as usize).min(input - 1);
            let i1 = ((lo + 1.0).max(0.0) as usize).min(input - 1);
            (i0, i1, frac)
        })
        .collect()
}

/// Per-pixel softmax over the channel axis, max-subtracted.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (bsz, k, h, w) = shape4(logits);
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..bsz {
        let src = &logits.data()[b * k * plane..(b + 1) * k * plane];
        let dst = &mut out.data_mut()[b * k * plane..(b + 1) * k * plane];
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(src[c * plane + p]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (src[c * plane + p] - m).exp();
                dst[c * plane + p] = e;
                z += e;
            }
            for c in 0..k {
                dst[c * plane + p] /= z;
            }
        }
    }
    out
}

/// Mean of -log softmax(logits)[label] over non-ignored pixels.
/// Returns (loss, count, cached softmax probabilities).
pub fn ce_pixels_forward(logits: &Tensor, labels: &LabelBatch) -> (f64, usize, Tensor) {
    let (bsz, k, h, w) = shape4(logits);
    debug_assert_eq!((labels.batch, labels.height, labels.width), (bsz, h, w));
    let probs = softmax_channels(logits);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..bsz {
        for p in 0..plane {
            let y = labels.data[b * plane + p];
            if y == IGNORE {
                continue;
            }
            let py = probs.data()[(b * k + y as usize) * plane + p];
            total -= py.max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    (loss, count, probs)
}

/// d(ce)/d(logits) = (softmax - onehot) / count on non-ignored pixels.
pub fn ce_pixels_backward(probs: &Tensor, labels: &LabelBatch, count: usize, dloss: f64) -> Tensor {
    let (bsz, k, h, w) = shape4(probs);
    let plane = h * w;
    let mut dx = Tensor::zeros(probs.shape());
    if count == 0 {
        return dx;
    }
    let scale = dloss / count as f64;
    for b in 0..bsz {
        for p in 0..plane {
            let y = labels.data[b * plane + p];
            if y == IGNORE {
                continue;
            }
            for c in 0..k {
                let delta = if c == y as usize { 1.0 } else { 0.0 };
                dx.data_mut()[(b * k + c) * plane + p] +=
                    scale * (probs.data()[(b * k + c) * plane + p] - delta);
            }
        }
    }
    dx
}

/// Symmetric cross entropy over pixels:
/// mean of alpha * CE + beta * RCE, where RCE clamps log(0) to `log_floor`.
/// For a hard one-hot target RCE reduces to `-log_floor * (1 - p_y)`.
pub fn sce_pixels_forward(
    logits: &Tensor,
    labels: &LabelBatch,
    alpha: f64,
    beta: f64,
    log_floor: f64,
) -> (f64, usize, Tensor) {
    let (bsz, k, h, w) = shape4(logits);
    debug_assert_eq!((labels.batch, labels.height, labels.width), (bsz, h, w));
    let probs = softmax_channels(logits);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..bsz {
        for p in 0..plane {
            let y = labels.data[b * plane + p];
            if y == IGNORE {
                continue;
            }
            let py = probs.data()[(b * k + y as usize) * plane + p];
            let ce = -py.max(f64::MIN_POSITIVE).ln();
            let rce = -log_floor * (1.0 - py);
            total += alpha * ce + beta * rce;
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    (loss, count, probs)
}

/// d(sce)/d(logits) = (p_c - delta_cy) * (alpha - beta * log_floor * p_y) / count.
pub fn sce_pixels_backward(
    probs: &Tensor,
    labels: &LabelBatch,
    count: usize,
    alpha: f64,
    beta: f64,
    log_floor: f64,
    dloss: f64,
) -> Tensor {
    let (bsz, k, h, w) = shape4(probs);
    let plane = h * w;
    let mut dx = Tensor::zeros(probs.shape());
    if count == 0 {
        return dx;
    }
    let scale = dloss / count as f64;
    for b in 0..bsz {
        for p in 0..plane {
            let y = labels.data[b * plane + p];
            if y == IGNORE {
                continue;
            }
            let py = probs.data()[(b * k + y as usize) * plane + p];
            let factor = alpha - beta * log_floor * py;
            for c in 0..k {
                let delta = if c == y as usize { 1.0 } else { 0.0 };
                dx.data_mut()[(b * k + c) * plane + p] +=
                    scale * factor * (probs.data()[(b * k + c) * plane + p] - delta);
            }
        }
    }
    dx
}

/// Group normalization forward. Returns (y, per-group mean, per-group inv std).
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (bsz, c, h, w) = shape4(x);
    debug_assert_eq!(c % groups, 0);
    let per = c / groups;
    let gsize = per * h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut means = vec![0.0; bsz * groups];
    let mut invs = vec![0.0; bsz * groups];
    for b in 0..bsz {
        for g in 0..groups {
            let start = (b * c + g * per) * h * w;
            let xs = &x.data()[start..start + gsize];
            let mean = xs.iter().sum::<f64>() / gsize as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[b * groups + g] = mean;
            invs[b * groups + g] = inv;
            for cc in 0..per {
                let ch = g * per + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let off = start + cc * h * w;
                for p in 0..h * w {
                    y.data_mut()[off + p] = ga * (x.data()[off + p] - mean) * inv + be;
                }
            }
        }
    }
    (y, means, invs)
}

/// Group normalization backward; returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dout: &Tensor,
    groups: usize,
    means: &[f64],
    invs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (bsz, c, h, w) = shape4(x);
    let per = c / groups;
    let gsize = (per * h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for b in 0..bsz {
        for g in 0..groups {
            let mean = means[b * groups + g];
            let inv = invs[b * groups + g];
            let start = (b * c + g * per) * h * w;
            // First pass: dbeta/dgamma and the two batch statistics of dxhat.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cc in 0..per {
                let ch = g * per + cc;
                let off = start + cc * h * w;
                for p in 0..h * w {
                    let xhat = (x.data()[off + p] - mean) * inv;
                    let go = dout.data()[off + p];
                    dgamma.data_mut()[ch] += go * xhat;
                    dbeta.data_mut()[ch] += go;
                    let dxhat = go * gamma.data()[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            // Second pass: dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            for cc in 0..per {
                let ch = g * per + cc;
                let off = start + cc * h * w;
                for p in 0..h * w {
                    let xhat = (x.data()[off + p] - mean) * inv;
                    let dxhat = dout.data()[off + p] * gamma.data()[ch];
                    dx.data_mut()[off + p] =
                        inv * (dxhat - sum_dxhat / gsize - xhat * sum_dxhat_xhat / gsize);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}
