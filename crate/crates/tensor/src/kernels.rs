//! Raw slice kernels: blocked matrix multiply, transposes and the im2col
//! lowering used by the convolution layer.
//!
//! All functions work on row-major slices and never allocate more than their
//! output. Parallel variants split the *output* only.

use crate::parallel;
use crate::scalar::Scalar;

/// Register tile: `MR` rows of C by `NR` columns, accumulated in locals.
const MR: usize = 8;
const NR: usize = 16;
/// Rows of C handled by one parallel task.
const ROW_BLOCK: usize = 4 * MR;

#[inline(always)]
fn madd<T: Scalar>(a: T, b: T, acc: T) -> T {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, acc)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        acc + a * b
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if k == 0 {
        return;
    }
    let panels = pack_b(b, k, n);
    parallel::for_each_chunk_mut(c, ROW_BLOCK * n, |blk, cblk| {
        let row0 = blk * ROW_BLOCK;
        let rows = cblk.len() / n;
        gemm_block(&a[row0 * k..(row0 + rows) * k], &panels, cblk, rows, k, n);
    });
}

/// Splits `b` into `NR`-wide column panels stored as `k` contiguous rows of
/// `NR`; the last panel is zero padded.
fn pack_b<T: Scalar>(b: &[T], k: usize, n: usize) -> Vec<T> {
    let np = n.div_ceil(NR);
    let mut out = vec![T::zero(); np * k * NR];
    parallel::for_each_chunk_mut(&mut out, k * NR, |p, panel| {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        for kk in 0..k {
            panel[kk * NR..kk * NR + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
        }
    });
    out
}

fn gemm_block<T: Scalar>(a: &[T], panels: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    let stripes = rows.div_ceil(MR);
    // Pack each MR-row stripe as k groups of MR values (missing rows are zero).
    let mut packed = vec![T::zero(); stripes * MR * k];
    for s in 0..stripes {
        let dst = &mut packed[s * MR * k..(s + 1) * MR * k];
        for r in 0..MR.min(rows - s * MR) {
            let src = &a[(s * MR + r) * k..(s * MR + r + 1) * k];
            for (kk, &v) in src.iter().enumerate() {
                dst[kk * MR + r] = v;
            }
        }
    }
    for (p, panel) in panels.chunks_exact(k * NR).enumerate() {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        for s in 0..stripes {
            let ap = &packed[s * MR * k..(s + 1) * MR * k];
            let mut acc = [[T::zero(); NR]; MR];
            for (av, brow) in ap.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
                let brow: &[T; NR] = brow.try_into().unwrap();
                for r in 0..MR {
                    let ar = av[r];
                    let accr = &mut acc[r];
                    for jj in 0..NR {
                        accr[jj] = madd(ar, brow[jj], accr[jj]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate().take(rows - s * MR) {
                let crow = &mut c[(s * MR + r) * n + j0..(s * MR + r) * n + j0 + w];
                for (cv, &av) in crow.iter_mut().zip(accr) {
                    *cv = *cv + av;
                }
            }
        }
    }
}

/// Returns the `cols × rows` transpose of a row-major `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    parallel::for_each_chunk_mut(&mut out, B * rows.max(1), |blk, oblk| {
        let c0 = blk * B;
        let nc = oblk.len() / rows.max(1);
        for r0 in (0..rows).step_by(B) {
            let r1 = (r0 + B).min(rows);
            for cc in 0..nc {
                let col = c0 + cc;
                for r in r0..r1 {
                    oblk[cc * rows + r] = a[r * cols + col];
                }
            }
        }
    });
    out
}

/// Geometry of a 2-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the lowered matrix: `in_channels · k · k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the lowered matrix: `batch · out_h · out_w`.
    pub fn columns(&self) -> usize {
        self.batch * self.out_pixels()
    }
}

/// Lowers `x: [N, C, H, W]` into `[C·k·k, N·Ho·Wo]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = g.columns();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    let hw = g.height * g.width;
    parallel::for_each_chunk_mut(&mut out, cols, |row, orow| {
        let c = row / (g.kernel * g.kernel);
        let ki = (row / g.kernel) % g.kernel;
        let kj = row % g.kernel;
        for n in 0..g.batch {
            let plane = &x[(n * g.in_channels + c) * hw..(n * g.in_channels + c + 1) * hw];
            let dst = &mut orow[n * ho * wo..(n + 1) * ho * wo];
            for oh in 0..ho {
                let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                let drow = &mut dst[oh * wo..(oh + 1) * wo];
                if ih < 0 || ih >= g.height as isize {
                    continue;
                }
                let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                for (ow, d) in drow.iter_mut().enumerate() {
                    let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                    if iw >= 0 && iw < g.width as isize {
                        *d = src[iw as usize];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatters `[C·k·k, N·Ho·Wo]` back onto `[N, C, H, W]`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncol = g.columns();
    let hw = g.height * g.width;
    let kk = g.kernel * g.kernel;
    let mut out = vec![T::zero(); g.batch * g.in_channels * hw];
    parallel::for_each_chunk_mut(&mut out, hw, |plane_idx, plane| {
        let n = plane_idx / g.in_channels;
        let c = plane_idx % g.in_channels;
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = c * kk + ki * g.kernel + kj;
                let src = &cols[row * ncol + n * ho * wo..row * ncol + (n + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let prow = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            prow[iw as usize] = prow[iw as usize] + src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    });
    out
}
