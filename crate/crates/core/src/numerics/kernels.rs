//! Allocation-level kernels shared by the graph ops and the plain operations.
//!
//! Matrices are row-major slices; dimensions are passed explicitly.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * op(a) * op(b) + beta * c` with arbitrary strides.
#[allow(unsafe_code, clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above bound every index reachable through the
    // strides (all strides describe dense m×k, k×n and m×n layouts), and `c`
    // does not alias `a` or `b` because it is borrowed mutably.
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

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `c += a[m,k] · b[k,n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 1.0, c);
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 0.0, &mut c);
    c
}

/// `c += a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), 1.0, c);
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `c += a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), 1.0, c);
}

pub fn add_row_vector(x: &mut [f64], v: &[f64]) {
    for row in x.chunks_exact_mut(v.len()) {
        for (a, b) in row.iter_mut().zip(v) {
            *a += b;
        }
    }
}

/// Column sums of a `[rows, cols]` matrix.
pub fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Numerically stable softmax of each contiguous row of length `cols`.
pub fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-channel normalisation over the token axis.
///
/// Returns the normalised values `x̂` and the per-channel `1/σ`.
pub fn instance_norm_forward(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mean: Vec<f64> = column_sums(x, cols).into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for c in 0..cols {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / libm::sqrt(v / n + INSTANCE_NORM_EPS))
        .collect();
    let mut xhat = vec![0.0; rows * cols];
    for (dst, row) in xhat.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
        for c in 0..cols {
            dst[c] = (row[c] - mean[c]) * inv_std[c];
        }
    }
    (xhat, inv_std)
}

/// Geometry of a strided, zero-padded patch extraction over an `h × w × c` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Flattened patch width, ordered `(ky, kx, channel)`.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// At least one patch fits; trailing rows/columns that do not fill a
    /// stride are dropped, as in a floor-mode convolution.
    pub fn is_valid(&self) -> bool {
        self.stride > 0 && self.k > 0 && self.h + 2 * self.pad >= self.k && self.w + 2 * self.pad >= self.k
    }
}

/// Gathers every patch into one row (im2col).
pub fn im2col(x: &[f64], g: &PatchGeom) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut out = vec![0.0; oh * ow * plen];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c;
                    let off = (ky * g.k + kx) * g.c;
                    dst[off..off + g.c].copy_from_slice(&x[src..src + g.c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the grid, summing overlaps.
pub fn col2im(cols: &[f64], g: &PatchGeom) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut out = vec![0.0; g.h * g.w * g.c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let off = (ky * g.k + kx) * g.c;
                    for c in 0..g.c {
                        out[dst + c] += src[off + c];
                    }
                }
            }
        }
    }
    out
}

/// Sparse row-mixing operator: output row `i` is `Σ w · input[src]` over its entries.
///
/// Bilinear resampling, row gathers and their compositions are all of this form.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub in_rows: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl MixPlan {
    pub fn from_rows(in_rows: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for r in rows {
            entries.extend(r);
            offsets.push(entries.len());
        }
        MixPlan {
            in_rows,
            offsets,
            entries,
        }
    }

    pub fn gather(in_rows: usize, idx: &[usize]) -> Self {
        MixPlan::from_rows(in_rows, idx.iter().map(|&i| alloc::vec![(i, 1.0)]).collect())
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Half-pixel-centre bilinear resampling from `h × w` to `out_h × out_w`.
    pub fn bilinear(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let ys: Vec<_> = (0..out_h).map(|i| axis_weights(i, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|j| axis_weights(j, w, out_w)).collect();
        let mut rows = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                rows.push(bilinear_taps(w, y0, y1, wy, x0, x1, wx));
            }
        }
        MixPlan::from_rows(h * w, rows)
    }

    /// Bilinear resampling from `h × w` evaluated only at the given flat pixel
    /// indices of an `out_h × out_w` target grid.
    pub fn bilinear_at(h: usize, w: usize, out_h: usize, out_w: usize, pixels: &[usize]) -> Self {
        let rows = pixels
            .iter()
            .map(|&p| {
                let (y0, y1, wy) = axis_weights(p / out_w, h, out_h);
                let (x0, x1, wx) = axis_weights(p % out_w, w, out_w);
                bilinear_taps(w, y0, y1, wy, x0, x1, wx)
            })
            .collect();
        MixPlan::from_rows(h * w, rows)
    }

    pub fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for (i, dst) in out.chunks_exact_mut(cols).enumerate() {
            for &(src, wgt) in self.row(i) {
                let s = &x[src * cols..(src + 1) * cols];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += wgt * v;
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, dy: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.in_rows * cols];
        for (i, g) in dy.chunks_exact(cols).enumerate() {
            for &(src, wgt) in self.row(i) {
                let d = &mut out[src * cols..(src + 1) * cols];
                for (a, b) in d.iter_mut().zip(g) {
                    *a += wgt * b;
                }
            }
        }
        out
    }
}

fn axis_weights(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let s = s.clamp(0.0, (n_in - 1) as f64);
    let i0 = libm::floor(s) as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

fn bilinear_taps(w: usize, y0: usize, y1: usize, wy: f64, x0: usize, x1: usize, wx: f64) -> Vec<(usize, f64)> {
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (idx, wt) in [
        (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * w + x1, (1.0 - wy) * wx),
        (y1 * w + x0, wy * (1.0 - wx)),
        (y1 * w + x1, wy * wx),
    ] {
        if wt == 0.0 {
            continue;
        }
        match taps.iter_mut().find(|(i, _)| *i == idx) {
            Some(t) => t.1 += wt,
            None => taps.push((idx, wt)),
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(&a, &b, m, k, n);
        // b stored transposed
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let got_nt = matmul_nt(&a, &bt, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let got_tn = matmul_tn(&at, &b, m, k, n);
        for i in 0..m * n {
            assert!((got[i] - want[i]).abs() < 1e-12);
            assert!((got_nt[i] - want[i]).abs() < 1e-12);
            assert!((got_tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = PatchGeom { h: 5, w: 4, c: 2, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.h * g.w * g.c).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let plan = MixPlan::bilinear(3, 5, 7, 11);
        for i in 0..plan.out_rows() {
            let s: f64 = plan.row(i).iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn same_size_bilinear_is_identity() {
        let plan = MixPlan::bilinear(4, 4, 4, 4);
        for i in 0..16 {
            assert_eq!(plan.row(i), &[(i, 1.0)]);
        }
    }
}
