//! Thin row-major wrappers over `matrixmultiply::sgemm`.

/// Strided view of a matrix: (data, row stride, column stride).
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Dense row-major `rows x cols`.
    pub fn rm(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a dense row-major matrix with `cols` columns.
    pub fn tr(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]`, with `c` strided by `c_rs` rows.
pub fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f32, c: &mut [f32], c_rs: usize) {
    assert!(a.data.len() >= a.span(m, k), "gemm: lhs too short");
    assert!(b.data.len() >= b.span(k, n), "gemm: rhs too short");
    assert!(m == 0 || n == 0 || c.len() >= (m - 1) * c_rs + n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for x in &mut c[i * c_rs..i * c_rs + n] {
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

/// `out[m,n] = x[m,k] * w[k,n] + bias[n]`.
pub fn affine(x: &[f32], w: &[f32], bias: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for row in out[..m * n].chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(m, k, n, View::rm(x, k), View::rm(w, n), 1.0, out, n);
}

/// Accumulate the backward pass of `affine`: `dw += x^T dy`, `db += sum_rows dy`, and
/// `dx (+)= dy w^T` when `dx` is given.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    m: usize,
    k: usize,
    n: usize,
    dw: &mut [f32],
    db: &mut [f32],
    dx: Option<(&mut [f32], f32)>,
) {
    gemm(k, m, n, View::tr(x, k), View::rm(dy, n), 1.0, dw, n);
    for row in dy[..m * n].chunks_exact(n) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some((dx, beta)) = dx {
        gemm(m, n, k, View::rm(dy, n), View::tr(w, n), beta, dx, k);
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
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
    fn gemm_matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, View::rm(&a, k), View::rm(&b, n), 0.0, &mut c, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn transposed_views() {
        let (m, k, n) = (4, 6, 2);
        let at: Vec<f32> = (0..k * m).map(|i| i as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 1.0 - i as f32 * 0.25).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = at[p * m + i];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, View::tr(&at, m), View::rm(&b, n), 0.0, &mut c, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_adds_bias() {
        let x = [1.0, 2.0];
        let w = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 2];
        affine(&x, &w, &[0.5, -0.5], 1, 2, 2, &mut out);
        assert_eq!(out, [1.5, 1.5]);
    }
}
