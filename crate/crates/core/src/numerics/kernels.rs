//! Raw loops shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed layout.
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides chosen for each layout.
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

/// Valid output range `[lo, hi)` along one axis for tap offset `d`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Per-channel cross-correlation with zero "same" padding. `kernel` is
/// `C×k×k`, `k` odd; accumulates into `out`.
pub(crate) fn depthwise_forward(
    x: &[f64],
    kernel: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for c in 0..channels {
        let xin = &x[c * plane..(c + 1) * plane];
        let xo = &mut out[c * plane..(c + 1) * plane];
        let kc = &kernel[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            let dy = ky as isize - r;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - r;
                let (x0, x1) = valid_range(w, dx);
                let wt = kc[ky * k + kx];
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let src = &xin[yi * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    let dst = &mut xo[y * w + x0..y * w + x1];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += wt * s;
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    mut grad_x: Option<&mut [f64]>,
    mut grad_k: Option<&mut [f64]>,
) {
    let r = (k / 2) as isize;
    let plane = h * w;
    for c in 0..channels {
        let xin = &x[c * plane..(c + 1) * plane];
        let go = &grad_out[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - r;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - r;
                let (x0, x1) = valid_range(w, dx);
                let tap = c * k * k + ky * k + kx;
                let wt = kernel[tap];
                let mut acc = 0.0;
                for y in y0..y1 {
                    let yi = (y as isize + dy) as usize;
                    let off = yi * w + (x0 as isize + dx) as usize;
                    let g = &go[y * w + x0..y * w + x1];
                    if let Some(gx) = grad_x.as_deref_mut() {
                        let dst = &mut gx[c * plane + off..][..x1 - x0];
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += wt * gv;
                        }
                    }
                    if grad_k.is_some() {
                        let src = &xin[off..off + (x1 - x0)];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gk) = grad_k.as_deref_mut() {
                    gk[tap] += acc;
                }
            }
        }
    }
}

/// Unfolds `x` (`C×H×W`) into a `(C·k·k) × (Ho·Wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds patch gradients back into `grad_x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    grad_x: &mut [f64],
) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            grad_x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Standard normal CDF.
#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_layouts() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let cols = im2col(&x, c, h, w, k, s, p, ho, wo);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, s, p, ho, wo, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gaussian_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }
}
