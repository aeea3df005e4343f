/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols as isize, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `out = a·b + beta·out`, where `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same contract as [`gemm`], but multiplies in single precision and
/// accumulates the rounded product into the f64 output.
pub(crate) fn gemm_f32(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    let af: Vec<f32> = a.data[..=a.max_offset()].iter().map(|&v| v as f32).collect();
    let bf: Vec<f32> = b.data[..=b.max_offset()].iter().map(|&v| v as f32).collect();
    let mut tmp: Vec<f32> = Vec::with_capacity(m * n);
    // SAFETY: the converted buffers cover every offset reachable through the
    // views' strides. With beta = 0, sgemm writes all m x n entries of `tmp`
    // without reading them, so the length can be set afterwards.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            af.as_ptr(),
            a.row_stride,
            a.col_stride,
            bf.as_ptr(),
            b.row_stride,
            b.col_stride,
            0.0,
            tmp.as_mut_ptr(),
            n as isize,
            1,
        );
        tmp.set_len(m * n);
    }
    if beta == 0.0 {
        out[..m * n].iter_mut().zip(&tmp).for_each(|(o, &t)| *o = t as f64);
    } else {
        out[..m * n].iter_mut().zip(&tmp).for_each(|(o, &t)| *o = beta * *o + t as f64);
    }
}

/// Dispatches to [`gemm`] or [`gemm_f32`].
pub(crate) fn gemm_in(single: bool, a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    if single {
        gemm_f32(a, b, out, beta)
    } else {
        gemm(a, b, out, beta)
    }
}
