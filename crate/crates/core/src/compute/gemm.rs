/// Strided view of a matrix operand stored in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], offset: usize, row_stride: usize) -> Self {
        Self { data, offset, row_stride, col_stride: 1 }
    }

    /// The transpose of a row-major block.
    pub fn transposed(data: &'a [f64], offset: usize, row_stride: usize) -> Self {
        Self { data, offset, row_stride: 1, col_stride: row_stride }
    }

    fn check(&self, rows: usize, cols: usize) {
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `c = beta * c + a · b` where `a` is `m×k`, `b` is `k×n` and `c` is an
/// `m×n` row-major block of `out` starting at `c_offset` with row stride
/// `c_row_stride`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut out[c_offset + i * c_row_stride..c_offset + i * c_row_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * c_row_stride + n <= out.len(), "output view out of bounds");
    // SAFETY: every pointer offset touched by the kernel was bounds-checked
    // above, and `out` cannot alias the shared operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operand() {
        // a = [[1,2],[3,4]], aᵀ·a = [[10,14],[14,20]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, MatRef::transposed(&a, 0, 2), MatRef::rows(&a, 0, 2), 0.0, &mut c, 0, 2);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }
}
