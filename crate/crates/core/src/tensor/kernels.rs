//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Every kernel here is serial with a fixed iteration order, so results are
//! bitwise reproducible for identical inputs.

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `m x k` (stored `k x m` when `trans_a`), `b` is `k x n` (stored
/// `n x k` when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe the row-major buffers whose lengths are
    // checked by the debug assertion; matrixmultiply reads/writes only within them.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1 stride-1 unpadded convolutions need no column buffer.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `cin x h x w` image into a `patch_len x out_pixels` matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution: `x` is `n x cin x h x w`, `w` is `cout x cin x kh x kw`.
pub(crate) fn conv2d_forward(g: &ConvGeom, n: usize, cout: usize, x: &[f32], w: &[f32]) -> Vec<f32> {
    let in_len = g.cin * g.h * g.w;
    let out_len = cout * g.out_pixels();
    let mut out = vec![0.0; n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * g.out_pixels()]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let src: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(
            cout,
            g.patch_len(),
            g.out_pixels(),
            w,
            false,
            src,
            false,
            &mut out[b * out_len..(b + 1) * out_len],
            0.0,
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when its flag is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    n: usize,
    cout: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_len = g.cin * g.h * g.w;
    let out_len = cout * g.out_pixels();
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut dx = want_dx.then(|| vec![0.0; n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; cout * k]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![0.0; if want_dx && !g.is_pointwise() { k * p } else { 0 }];
    for b in 0..n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src: &[f32] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(cout, p, k, dyb, false, src, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, p, w, true, dyb, false, dxb, 1.0);
            } else {
                gemm(k, cout, p, w, true, dyb, false, &mut dcols, 0.0);
                col2im(g, &dcols, dxb);
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `planes` independent `h x w` planes. Returns the pooled
/// values and, per output, the flat in-plane index of the selected input.
pub(crate) fn max_pool2d(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; planes * ho * wo];
    let mut arg = vec![0u32; planes * ho * wo];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ih as usize * w + iw as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * ho * wo + oh * wo + ow;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg, ho, wo)
}

/// Per-axis sampling positions for bilinear upsampling with half-pixel
/// centers: `(low index, high index, weight of high)`.
pub(crate) fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

pub(crate) fn bilinear_upsample(x: &[f32], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let a = plane[y0 * w + x0];
                let b = plane[y0 * w + x1];
                let c = plane[y1 * w + x0];
                let d = plane[y1 * w + x1];
                // lerp form keeps constant inputs exactly constant
                let top = a + wx * (b - a);
                let bot = c + wx * (d - c);
                dst[oy * wo + ox] = top + wy * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn bilinear_upsample_backward(dy: &[f32], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                let top = v * (1.0 - wy);
                let bot = v * wy;
                dst[y0 * w + x0] += top * (1.0 - wx);
                dst[y0 * w + x1] += top * wx;
                dst[y1 * w + x0] += bot * (1.0 - wx);
                dst[y1 * w + x1] += bot * wx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling of `planes` planes to `ho x wo`, using the
/// source pixel containing each output pixel centre.
pub(crate) fn nearest_resize(x: &[f32], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f32> {
    let sy: Vec<usize> = (0..ho).map(|o| ((o * 2 + 1) * h / (2 * ho)).min(h - 1)).collect();
    let sx: Vec<usize> = (0..wo).map(|o| ((o * 2 + 1) * w / (2 * wo)).min(w - 1)).collect();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &y in &sy {
            for &xx in &sx {
                out.push(plane[y * w + xx]);
            }
        }
    }
    out
}

/// Reverses the last axis (`horizontal`) or the second-to-last axis of every plane.
pub(crate) fn flip_planes(x: &[f32], planes: usize, h: usize, w: usize, horizontal: bool) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - xx) } else { (h - 1 - y, xx) };
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for t in 0..k {
                    s += a[i * k + t] as f64 * b[t * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let expect = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-5, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = vec![0.3f32; 3 * 3];
        let y = bilinear_upsample(&x, 1, 3, 3, 4);
        assert!(y.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 1x2 row upsampled by 2: positions -0.25, 0.25, 0.75, 1.25 -> clamp
        let y = bilinear_upsample(&[0.0, 1.0], 1, 1, 2, 2);
        assert_eq!(y.len(), 2 * 4);
        assert_eq!(&y[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_resize_downsamples_by_block_centres() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let y = nearest_resize(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
    }
}
