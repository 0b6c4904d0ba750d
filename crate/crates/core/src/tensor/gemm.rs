//! Strided matrix views over `matrixmultiply::dgemm`.

/// Read-only strided matrix view. Transposition only swaps strides.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        debug_assert!(
            rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len(),
            "view out of bounds"
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

#[derive(Debug)]
pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        debug_assert!(
            rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len(),
            "view out of bounds"
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c ← alpha·a·b + beta·c`.
///
/// Panics when the views do not conform; callers validate shapes first.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // dgemm with k = 0 still scales c by beta
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == 0.0 { 0.0 } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: the constructors assert (in debug) and callers guarantee that
    // every addressed element lies inside the backing slices, and `c` is
    // uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: View<'_>, b: View<'_>) -> Vec<f64> {
        let mut out = vec![0.0; a.rows * b.cols];
        for i in 0..a.rows {
            for j in 0..b.cols {
                out[i * b.cols + j] = (0..a.cols).map(|p| a.at(i, p) * b.at(p, j)).sum();
            }
        }
        out
    }

    #[test]
    fn transposed_views_match_naive_product() {
        let a: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        // a is stored 4x3, b stored 4x3; compute aᵀ·b (3x3)
        let av = View::row_major(&a, 4, 3).t();
        let bv = View::row_major(&b, 4, 3);
        let mut c = vec![0.0; 9];
        gemm(1.0, av, bv, 0.0, ViewMut::row_major(&mut c, 3, 3));
        let want = naive(av, bv);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(
            1.0,
            View::row_major(&a, 1, 2),
            View::row_major(&b, 2, 1),
            1.0,
            ViewMut::row_major(&mut c, 1, 1),
        );
        assert_eq!(c, [21.0]);
    }
}
