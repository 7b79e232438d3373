// Thin wrapper over `matrixmultiply::dgemm` for row-major buffers.

/// A logical matrix view over a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Rows and columns of the stored (untransposed) buffer.
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            trans,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            trans: !self.trans,
            ..self
        }
    }

    pub fn logical_rows(&self) -> usize {
        if self.trans {
            self.cols
        } else {
            self.rows
        }
    }

    pub fn logical_cols(&self) -> usize {
        if self.trans {
            self.rows
        } else {
            self.cols
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` with `out` row-major of shape `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    let m = a.logical_rows();
    let k = a.logical_cols();
    let n = b.logical_cols();
    assert_eq!(k, b.logical_rows(), "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: strides and extents describe the provided slices exactly, and
    // `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided variant for convolution windows: `a` rows start `row_stride`
/// apart in `data` and each row spans `cols` contiguous values.
pub(crate) fn gemm_windows(
    data: &[f64],
    windows: usize,
    row_stride: usize,
    cols: usize,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
) {
    let n = b.logical_cols();
    assert_eq!(cols, b.logical_rows());
    assert_eq!(out.len(), windows * n);
    if windows == 0 {
        return;
    }
    assert!((windows - 1) * row_stride + cols <= data.len());
    let (rsb, csb) = b.strides();
    // SAFETY: the last window ends inside `data` (checked above).
    unsafe {
        matrixmultiply::dgemm(
            windows,
            cols,
            n,
            1.0,
            data.as_ptr(),
            row_stride as isize,
            1,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out += a^T * b` where `a` is a strided window matrix (see [`gemm_windows`]).
pub(crate) fn gemm_windows_t(
    data: &[f64],
    windows: usize,
    row_stride: usize,
    cols: usize,
    b: MatRef<'_>,
    out: &mut [f64],
) {
    let n = b.logical_cols();
    assert_eq!(windows, b.logical_rows());
    assert_eq!(out.len(), cols * n);
    if windows == 0 {
        return;
    }
    let (rsb, csb) = b.strides();
    // SAFETY: as in `gemm_windows`, with the window matrix read transposed.
    unsafe {
        matrixmultiply::dgemm(
            cols,
            windows,
            n,
            1.0,
            data.as_ptr(),
            1,
            row_stride as isize,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
