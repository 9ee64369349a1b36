//! Strided matrix views over flat slices and a checked GEMM wrapper.
//!
//! Every layer reduces to `C = alpha * A * B + beta * C` over views whose
//! row and column strides can overlap (sliding windows over a signal or a
//! spectrogram row), so patches never have to be copied out.

/// A read-only `rows x cols` view into a slice starting at `offset`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous row-major matrix.
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        let view = MatRef {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        };
        assert!(
            view.last_index() < data.len() || rows == 0 || cols == 0,
            "matrix view out of bounds: last index {} >= {}",
            view.last_index(),
            data.len()
        );
        view
    }

    /// The transposed view; no data moves.
    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[self.offset + r * self.row_stride + c * self.col_stride]
    }
}

/// A mutable view. Distinct `(row, col)` pairs must address distinct elements.
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn row_major(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * row_stride + (cols - 1) * col_stride;
            assert!(last < data.len(), "mutable view out of bounds");
            // Non-aliasing: one stride must step over the whole span of the other.
            let ok = rows == 1
                || cols == 1
                || row_stride >= cols * col_stride
                || col_stride >= rows * row_stride;
            assert!(ok, "mutable view aliases itself");
        }
        MatMut {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm row dimension");
    assert_eq!(b.cols, c.cols, "gemm column dimension");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // matrixmultiply reads beta * C even when k == 0; keep semantics explicit.
    if a.cols == 0 {
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.row_stride + col * c.col_stride;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds checked at construction and `c` was
    // checked for self-aliasing; `a`/`b` borrow immutably so cannot overlap `c`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}
