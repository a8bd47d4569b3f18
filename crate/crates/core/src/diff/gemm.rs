// Strided dense products on top of `matrixmultiply`. Transposed operands are
// expressed through strides so backward passes never materialize Aᵀ or Bᵀ.

use super::tensor::Tensor;

#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    pub(crate) fn normal(t: &'a Tensor) -> Self {
        View {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            row_stride: t.cols() as isize,
            col_stride: 1,
        }
    }

    pub(crate) fn transposed(t: &'a Tensor) -> Self {
        View {
            data: t.data(),
            rows: t.cols(),
            cols: t.rows(),
            row_stride: 1,
            col_stride: t.cols() as isize,
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`).
pub(crate) fn gemm(a: View<'_>, b: View<'_>, out: &mut Tensor, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "inner dimensions");
    assert_eq!((m, n), out.shape(), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.data_mut().fill(0.0);
        }
        return;
    }
    let ldc = n as isize;
    // SAFETY: the views borrow slices whose extents cover every index reached
    // by (rows, cols, strides), and `out` is an exclusively borrowed m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.data_mut().as_mut_ptr(),
            ldc,
            1,
        );
    }
}
