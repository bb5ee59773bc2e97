//! Dense kernels behind the tape: single-threaded f32 gemm and the
//! im2col/col2im pair used by the NHWC convolution op.

/// C (m x n, row-major) = A (m x k, row-major) * B (k x n, row-major).
pub fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            1,
            n as isize,
            0.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// C (m x n) = A^T * B where A is (k x m, row-major) and B is (k x n, row-major).
pub fn sgemm_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            // A^T[i, j] = A[j, i] lives at a + j*m + i
            a.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// C (m x n) = A * B^T where A is (m x k, row-major) and B is (n x k, row-major).
pub fn sgemm_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            1,
            k as isize,
            // B^T[i, j] = B[j, i] lives at b + j*k + i
            b.as_ptr(),
            k as isize,
            1,
            0.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Geometry of one 2-d convolution over NHWC maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    /// (top, bottom, left, right) zero padding; asymmetric pads express
    /// TensorFlow-style SAME geometry for even kernels.
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + self.pad.0 + self.pad.1 - self.k_h) / self.stride_h + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + self.pad.2 + self.pad.3 - self.k_w) / self.stride_w + 1
    }
    pub fn k(&self) -> usize {
        self.k_h * self.k_w * self.c_in
    }
}

/// SAME padding for a ceil(len/stride) output: returns (before, after).
pub fn same_pad(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (total / 2, total - total / 2)
}

/// Expand x (B,H,W,Cin NHWC) into col (B*OH*OW rows, KH*KW*Cin columns).
pub fn im2col(x: &[f32], batch: usize, g: &ConvGeom, col: &mut Vec<f32>) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    col.clear();
    col.resize(batch * oh * ow * k, 0.0);
    let row_in = g.in_w * g.c_in;
    let img = g.in_h * row_in;
    for b in 0..batch {
        let xb = &x[b * img..(b + 1) * img];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst_row = ((b * oh + oy) * ow + ox) * k;
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue; // stays zero
                    }
                    let src_row = iy as usize * row_in;
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad.2 as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = src_row + ix as usize * g.c_in;
                        let dst = dst_row + (ky * g.k_w + kx) * g.c_in;
                        col[dst..dst + g.c_in].copy_from_slice(&xb[src..src + g.c_in]);
                    }
                }
            }
        }
    }
}

/// Scatter-add of a col gradient back onto the input map; inverse of `im2col`.
pub fn col2im(col: &[f32], batch: usize, g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    debug_assert_eq!(col.len(), batch * oh * ow * k);
    debug_assert_eq!(dx.len(), batch * g.in_h * g.in_w * g.c_in);
    let row_in = g.in_w * g.c_in;
    let img = g.in_h * row_in;
    for b in 0..batch {
        let xb = &mut dx[b * img..(b + 1) * img];
        for oy in 0..oh {
            for ox in 0..ow {
                let src_row = ((b * oh + oy) * ow + ox) * k;
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride_h + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * row_in;
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride_w + kx) as isize - g.pad.2 as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = dst_row + ix as usize * g.c_in;
                        let src = src_row + (ky * g.k_w + kx) * g.c_in;
                        for c in 0..g.c_in {
                            xb[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.71).cos()).collect();
        let want = naive_gemm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        sgemm(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }

        // A^T * B with A stored as (k x m)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        sgemm_at_b(m, k, n, &at, &b, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }

        // A * B^T with B stored as (n x k)
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        sgemm_a_bt(m, k, n, &a, &bt, &mut c3);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn same_pad_geometry() {
        // stride-2 halving used by the generator: even sizes pad symmetrically
        assert_eq!(same_pad(36, 4, 2), (1, 1));
        assert_eq!(same_pad(256, 8, 2), (3, 3));
        // discriminator path hits odd sizes; extra pad goes after
        assert_eq!(same_pad(9, 4, 2), (1, 2));
        assert_eq!(same_pad(3, 4, 2), (1, 2));
        // stride-1 even kernel (up-sampling conv)
        assert_eq!(same_pad(18, 4, 1), (1, 2));
        let g = ConvGeom {
            in_h: 36,
            in_w: 256,
            c_in: 1,
            c_out: 4,
            k_h: 4,
            k_w: 8,
            stride_h: 2,
            stride_w: 2,
            pad: (1, 1, 3, 3),
        };
        assert_eq!((g.out_h(), g.out_w()), (18, 128));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c
        let g = ConvGeom {
            in_h: 5,
            in_w: 7,
            c_in: 3,
            c_out: 2,
            k_h: 4,
            k_w: 3,
            stride_h: 2,
            stride_w: 2,
            pad: (1, 2, 1, 1),
        };
        let b = 2;
        let x: Vec<f32> = (0..b * g.in_h * g.in_w * g.c_in)
            .map(|i| ((i * 2654435761usize) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        let mut col = Vec::new();
        im2col(&x, b, &g, &mut col);
        let c: Vec<f32> = (0..col.len())
            .map(|i| ((i * 40503usize) % 997) as f32 / 498.0 - 1.0)
            .collect();
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&c, b, &g, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
