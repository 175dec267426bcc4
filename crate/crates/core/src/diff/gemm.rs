//! Strided matrix product `C (+)= A · B` over `f64` slices.

/// Row/column strides of a matrix view, in elements.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major `rows × cols` layout.
    pub fn rm(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns in storage.
    pub fn tr(stored_cols: usize) -> Self {
        Self {
            row: 1,
            col: stored_cols,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// Computes `c = a·b` (or `c += a·b` when `accumulate`), where `a` is `m×k`,
/// `b` is `k×n`, and `c` is `m×n`, each addressed through its strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= sa.span(m, k), "gemm: lhs view out of bounds");
    assert!(b.len() >= sb.span(k, n), "gemm: rhs view out of bounds");
    assert!(c.len() >= sc.span(m, n), "gemm: output view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the three asserts above guarantee every addressed element lies
    // inside its slice, and `c` is borrowed mutably so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        // a: 2x3, b stored as 2x3 and used transposed (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Strides::rm(3), &b, Strides::tr(3), &mut c, Strides::rm(2), false);
        assert_eq!(c, [-2.0, 5.5, -2.0, 16.0]);
        gemm(2, 3, 2, &a, Strides::rm(3), &b, Strides::tr(3), &mut c, Strides::rm(2), true);
        assert_eq!(c, [-4.0, 11.0, -4.0, 32.0]);
    }
}
