//! Raw numeric kernels over flat buffers. No shape checking happens here;
//! the graph layer validates extents before calling in.

use crate::tensor::{pairwise_sum, DType, Real};

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn n(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }
    pub fn t(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }
}

/// `c = a·b (+ c if accumulate)` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.data.len(), m * k);
    debug_assert_eq!(b.data.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n <= SMALL_GEMM {
        return gemm_small(m, k, n, a, b, c, accumulate);
    }
    let (rsa, csa) = if a.transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data.as_ptr(),
        rsa,
        csa,
        b.data.as_ptr(),
        rsb,
        csb,
        beta,
        c.as_mut_ptr(),
        n as isize,
        1,
    );
}

/// Below this many multiply-adds, packing overhead dominates and a direct
/// loop is faster.
const SMALL_GEMM: usize = 1 << 14;

fn gemm_small<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    let a_rows;
    let a_rows: &[T] = if a.transposed {
        a_rows = permute(a.data, &[k, m], &[1, 0]);
        &a_rows
    } else {
        a.data
    };
    if !accumulate {
        c.fill(T::zero());
    }
    for (a_row, c_row) in a_rows.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        if b.transposed {
            for (cv, b_row) in c_row.iter_mut().zip(b.data.chunks_exact(k)) {
                let mut acc = T::zero();
                for (&x, &y) in a_row.iter().zip(b_row) {
                    acc += x * y;
                }
                *cv += acc;
            }
        } else {
            for (&av, b_row) in a_row.iter().zip(b.data.chunks_exact(n)) {
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// [`gemm`] accumulated in f64 and rounded once. Used where the reduction
/// runs over tokens, so f32 results do not depend on token order.
pub(crate) fn gemm_wide<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if T::DTYPE == DType::F64 {
        return gemm(m, k, n, MatRef::n(a), MatRef::n(b), c, false);
    }
    let wide = |xs: &[T]| xs.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let (a, b) = (wide(a), wide(b));
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, MatRef::n(&a), MatRef::n(&b), &mut out, false);
    for (dst, v) in c.iter_mut().zip(out) {
        *dst = T::from_f64(v);
    }
}

/// Sums `data` viewed as `len / width` rows of `width`, column by column,
/// with a pairwise tree over the rows.
pub(crate) fn sum_rows<T: Real>(data: &[T], width: usize) -> Vec<T> {
    let rows = data.len() / width;
    let mut out = vec![T::zero(); width];
    sum_rows_into(data, width, 0, rows, &mut out);
    out
}

fn sum_rows_into<T: Real>(data: &[T], width: usize, lo: usize, hi: usize, out: &mut [T]) {
    const LEAF: usize = 8;
    if hi - lo <= LEAF {
        for r in lo..hi {
            let row = &data[r * width..(r + 1) * width];
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
    } else {
        let mid = lo + (hi - lo) / 2;
        let mut right = vec![T::zero(); width];
        sum_rows_into(data, width, lo, mid, out);
        sum_rows_into(data, width, mid, hi, &mut right);
        out.iter_mut().zip(&right).for_each(|(o, &v)| *o += v);
    }
}

/// Copies `src` (row-major, `shape`) into the axis order given by `axes`.
pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides)
            .map(|(i, s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        // Odometer increment over all but the innermost axis.
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C, H, W]` image into `[C·k·k, out_h·out_w]` patches.
pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                // Output columns whose input column lands inside the image.
                let (lo, hi) = valid_range(kx as isize - pad, g.stride, g.width, g.out_w);
                for (oy, out_row) in dst.chunks_mut(g.out_w).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy as usize >= g.height {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = (lo * g.stride) as isize + kx as isize - pad;
                    for (o, s) in out_row[lo..hi].iter_mut().zip(src[start as usize..].iter().step_by(g.stride)) {
                        *o = *s;
                    }
                }
            }
        }
    }
}

/// `[lo, hi)` of output positions `o` with `0 <= o·stride + offset < extent`.
fn valid_range(offset: isize, stride: usize, extent: usize, outputs: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let hi = if (extent as isize) <= offset {
        0
    } else {
        (((extent as isize - offset + s - 1) / s) as usize).min(outputs)
    };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_range(kx as isize - pad, g.stride, g.width, g.out_w);
                for (oy, in_row) in src.chunks(g.out_w).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let start = (lo * g.stride) as isize + kx as isize - pad;
                    for (d, v) in dst[start as usize..].iter_mut().step_by(g.stride).zip(&in_row[lo..hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Standard normal CDF and density, the two pieces of exact GELU.
#[inline]
pub(crate) fn normal_cdf_pdf<T: Real>(x: T) -> (T, T) {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(0.398_942_280_401_432_7) * (-(x * x) * half).exp();
    (cdf, pdf)
}

pub(crate) fn mean<T: Real>(xs: &[T]) -> T {
    pairwise_sum(xs) / T::from_f64(xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<usize> = (0..24).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        // out[k][i][j] = src[i][j][k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_axes(&[2, 0, 1]));
        assert_eq!(back, src);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, MatRef::n(&a), MatRef::n(&b), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, MatRef::t(&a), MatRef::n(&b), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, MatRef::n(&a), MatRef::t(&b), &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, MatRef::n(&a), MatRef::t(&b), &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn sum_rows_is_columnwise() {
        let data: Vec<f64> = (0..30).map(f64::from).collect();
        let s = sum_rows(&data, 3);
        assert_eq!(s, vec![135.0, 145.0, 155.0]);
    }
}
