//! Convolution and matrix kernels.
//!
//! The convolution path lowers each sample to an im2col matrix and runs a
//! column-blocked GEMM. Every output element is accumulated over the
//! `(channel, ky, kx)` reduction index in ascending order starting from zero,
//! with the bias added last, which is the same order [`conv2d_naive`] uses.
//! Multiplication and addition are never fused, so in `f64` both paths agree
//! bit for bit.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::tensor::Element;

/// Static geometry of one 2-D convolution over `NCHW` data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        input_hw: (usize, usize),
    ) -> Result<Self, TensorError> {
        let g = ConvGeom {
            in_c,
            out_c,
            kh: kernel.0,
            kw: kernel.1,
            stride,
            pad,
            h: input_hw.0,
            w: input_hw.1,
        };
        if in_c == 0 || out_c == 0 || g.kh == 0 || g.kw == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("degenerate geometry {g:?}"),
            });
        }
        if g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input {}x{}", g.kh, g.kw, g.h, g.w),
            });
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Length of the reduction axis, `in_c * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.pad || pos - self.pad >= extent {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
///
/// Each `c[i][j]` receives its `k` products in ascending order, one rounded
/// multiply and one rounded add at a time, whichever tile it falls in.
pub fn gemm_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const MR: usize = 4;
    const NR: usize = 32;
    const NT: usize = 8;
    let mut j = 0;
    while j + NR <= n {
        col_panel::<T, MR, NR>(m, k, n, a, b, j, c);
        j += NR;
    }
    while j + NT <= n {
        col_panel::<T, MR, NT>(m, k, n, a, b, j, c);
        j += NT;
    }
    if j < n {
        for r in 0..m {
            let arow = &a[r * k..(r + 1) * k];
            let crow = &mut c[r * n + j..(r + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n + j..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// All rows of `c` over the `NR` columns starting at `j`.
#[inline(always)]
fn col_panel<T: Element, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    j: usize,
    c: &mut [T],
) {
    let mut i = 0;
    while i + MR <= m {
        tile::<T, MR, NR>(k, n, &a[i * k..(i + MR) * k], b, j, &mut c[i * n..(i + MR) * n]);
        i += MR;
    }
    for r in i..m {
        tile::<T, 1, NR>(k, n, &a[r * k..(r + 1) * k], b, j, &mut c[r * n..(r + 1) * n]);
    }
}

/// Register tile: `MR` rows of `c` by `NR` columns starting at `j`.
#[inline(always)]
fn tile<T: Element, const MR: usize, const NR: usize>(k: usize, n: usize, a: &[T], b: &[T], j: usize, c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    for r in 0..MR {
        let src: &[T; NR] = c[r * n + j..r * n + j + NR].try_into().expect("tile width");
        acc[r] = *src;
    }
    for kk in 0..k {
        let brow: &[T; NR] = b[kk * n + j..kk * n + j + NR].try_into().expect("tile width");
        for r in 0..MR {
            let av = a[r * k + kk];
            for q in 0..NR {
                acc[r][q] += av * brow[q];
            }
        }
    }
    for r in 0..MR {
        c[r * n + j..r * n + j + NR].copy_from_slice(&acc[r]);
    }
}

/// Row-major `rows x cols` to `cols x rows`.
fn transpose<T: Element>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Output positions `o` in `0..len` whose tap `o * stride + k - pad` lands
/// inside `0..extent`.
fn valid_range(g: &ConvGeom, k: usize, len: usize, extent: usize) -> (usize, usize) {
    let lo = if k >= g.pad { 0 } else { (g.pad - k).div_ceil(g.stride) };
    let hi = if extent + g.pad <= k { 0 } else { (extent + g.pad - k - 1) / g.stride + 1 };
    (lo.min(len), hi.min(len).max(lo.min(len)))
}

/// Unrolls one sample into rows of a `patch_len x ld` matrix, writing the
/// `out_h*out_w` columns that start at `off`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_range(g, kx, ow, g.w);
                for oy in 0..oh {
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.source(oy, ky, g.h) {
                        None => seg.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if lo < hi {
                                let first = lo * g.stride + kx - g.pad;
                                if g.stride == 1 {
                                    seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                                        *v = src[first + i * g.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatters columns `off..off + out_h*out_w` of a `patch_len x ld` matrix
/// back onto one sample, accumulating.
fn col2im_acc<T: Element>(col: &[T], g: &ConvGeom, ld: usize, off: usize, gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_range(g, kx, ow, g.w);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let dst = &mut gx[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let seg = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in seg.iter().enumerate() {
                            dst[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_buffers<T>(
    n: usize,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Result<(), TensorError> {
    let ok = x.len() == n * g.in_len()
        && w.len() == g.out_c * g.patch_len()
        && b.map_or(true, |b| b.len() == g.out_c);
    if ok {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op: "conv2d",
            shapes: vec![
                vec![x.len()],
                vec![n, g.in_c, g.h, g.w],
                vec![w.len()],
                vec![g.out_c, g.in_c, g.kh, g.kw],
            ],
        })
    }
}

/// Samples lowered into one GEMM, so small feature maps still fill whole
/// column tiles.
fn group_size(n: usize, p: usize) -> usize {
    (512 / p.max(1)).clamp(1, n.max(1))
}

/// Optimized cross-correlation over a batch of `n` samples.
pub fn conv2d_forward<T: Element>(
    n: usize,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Result<Vec<T>, TensorError> {
    check_conv_buffers(n, g, x, w, b)?;
    let p = g.out_h() * g.out_w();
    let k = g.patch_len();
    let oc = g.out_c;
    let gs = group_size(n, p);
    let mut out = vec![T::zero(); n * g.out_len()];
    out.par_chunks_mut(gs * g.out_len())
        .zip(x.par_chunks(gs * g.in_len()))
        .for_each_init(
            || (vec![T::zero(); k * gs * p], vec![T::zero(); oc * gs * p]),
            |(col, tmp), (o, xg)| {
                let cnt = xg.len() / g.in_len();
                let ld = cnt * p;
                for s in 0..cnt {
                    im2col(&xg[s * g.in_len()..(s + 1) * g.in_len()], g, col, ld, s * p);
                }
                if cnt == 1 {
                    gemm_acc(oc, k, p, w, &col[..k * p], o);
                } else {
                    let tmp = &mut tmp[..oc * ld];
                    tmp.fill(T::zero());
                    gemm_acc(oc, k, ld, w, &col[..k * ld], tmp);
                    for s in 0..cnt {
                        for c in 0..oc {
                            o[(s * oc + c) * p..(s * oc + c + 1) * p]
                                .copy_from_slice(&tmp[c * ld + s * p..c * ld + (s + 1) * p]);
                        }
                    }
                }
                if let Some(b) = b {
                    for (i, row) in o.chunks_mut(p).enumerate() {
                        let bias = b[i % oc];
                        for v in row {
                            *v = *v + bias;
                        }
                    }
                }
            },
        );
    Ok(out)
}

/// Direct nested-loop cross-correlation; the correctness oracle for
/// [`conv2d_forward`].
pub fn conv2d_naive<T: Element>(
    n: usize,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Result<Vec<T>, TensorError> {
    check_conv_buffers(n, g, x, w, b)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); n * g.out_len()];
    for s in 0..n {
        for oc in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                let wv = w[((oc * g.in_c + c) * g.kh + ky) * g.kw + kx];
                                let xv = if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    T::zero()
                                } else {
                                    x[((s * g.in_c + c) * g.h + iy as usize) * g.w + ix as usize]
                                };
                                acc += wv * xv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc = acc + b[oc];
                    }
                    out[((s * g.out_c + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weights and bias.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass of [`conv2d_forward`].
///
/// Partial weight gradients of sample groups are reduced in group order, so
/// the result does not depend on the number of worker threads.
pub fn conv2d_backward<T: Element>(
    n: usize,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let p = g.out_h() * g.out_w();
    let k = g.patch_len();
    let oc = g.out_c;
    let gs = group_size(n, p);

    let wt: Vec<T> = if need_x {
        let mut wt = vec![T::zero(); k * oc];
        transpose(oc, k, w, &mut wt);
        wt
    } else {
        Vec::new()
    };

    let groups: Vec<usize> = (0..n).step_by(gs).collect();
    let per_group: Vec<(Vec<T>, Vec<T>)> = groups
        .into_par_iter()
        .map(|s0| {
            let cnt = gs.min(n - s0);
            let ld = cnt * p;
            let mut gmat = vec![T::zero(); oc * ld];
            for s in 0..cnt {
                let gsrc = &grad_out[(s0 + s) * g.out_len()..(s0 + s + 1) * g.out_len()];
                for c in 0..oc {
                    gmat[c * ld + s * p..c * ld + (s + 1) * p].copy_from_slice(&gsrc[c * p..(c + 1) * p]);
                }
            }
            let gw = if need_w {
                let mut col = vec![T::zero(); k * ld];
                for s in 0..cnt {
                    im2col(&x[(s0 + s) * g.in_len()..(s0 + s + 1) * g.in_len()], g, &mut col, ld, s * p);
                }
                let mut colt = vec![T::zero(); ld * k];
                transpose(k, ld, &col, &mut colt);
                let mut gw = vec![T::zero(); oc * k];
                gemm_acc(oc, ld, k, &gmat, &colt, &mut gw);
                gw
            } else {
                Vec::new()
            };
            let gx = if need_x {
                let mut gcol = vec![T::zero(); k * ld];
                gemm_acc(k, oc, ld, &wt, &gmat, &mut gcol);
                let mut gx = vec![T::zero(); cnt * g.in_len()];
                for s in 0..cnt {
                    col2im_acc(&gcol, g, ld, s * p, &mut gx[s * g.in_len()..(s + 1) * g.in_len()]);
                }
                gx
            } else {
                Vec::new()
            };
            (gx, gw)
        })
        .collect();

    let input = need_x.then(|| {
        let mut gx = Vec::with_capacity(n * g.in_len());
        for (gxs, _) in &per_group {
            gx.extend_from_slice(gxs);
        }
        gx
    });
    let weight = need_w.then(|| {
        let mut acc = vec![T::zero(); oc * k];
        for (_, gws) in &per_group {
            for (a, &v) in acc.iter_mut().zip(gws) {
                *a += v;
            }
        }
        acc
    });
    let bias = need_b.then(|| {
        let mut gb = vec![T::zero(); oc];
        for s in 0..n {
            for (o, gbv) in gb.iter_mut().enumerate() {
                let row = &grad_out[s * g.out_len() + o * p..s * g.out_len() + (o + 1) * p];
                *gbv += row.iter().copied().sum::<T>();
            }
        }
        gb
    });
    ConvGrads { input, weight, bias }
}
