//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Strided view description of a matrix stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View { offset: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        View { offset: 0, rs: 1, cs: cols }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha * A * B + beta * C` where A is `m x k`, B is `k x n`, C is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || bv.last_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: all three views were bounds-checked above and C does not alias
    // A or B (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
