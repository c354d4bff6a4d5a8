//! Thin strided-matrix views over flat slices, backed by `matrixmultiply`.

use super::real::Real;

#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn check_bounds(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "view {rows}x{cols} (rs {rs}, cs {cs}) exceeds buffer of {len}");
    }
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows x cols` block.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), rows, cols, rs, cs);
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), rows, cols, rs, cs);
        ViewMut {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    T::gemm_raw(
        a.rows,
        a.cols,
        b.cols,
        alpha,
        a.data,
        a.rs as isize,
        a.cs as isize,
        b.data,
        b.rs as isize,
        b.cs as isize,
        beta,
        c.data,
        c.rs as isize,
        c.cs as isize,
    );
}

/// `c (+)= a * b` for row-major contiguous operands.
pub fn matmul<T: Real>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], accumulate: bool) {
    let (m, n) = (a.rows, b.cols);
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(T::one(), a, b, beta, ViewMut::new(c, m, n));
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
