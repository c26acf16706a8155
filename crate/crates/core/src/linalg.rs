//! Bounds-checked strided matrix views over flat buffers and the handful of
//! dense kernels the encoder needs.

use crate::scalar::Scalar;

#[derive(Clone, Copy)]
pub struct View<'a, S> {
    data: &'a [S],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> View<'a, S> {
    /// Row-major `rows × cols` matrix occupying the start of `data`.
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [S],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        check_extent(data.len(), offset, rows, cols, rs, cs);
        View {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

pub struct ViewMut<'a, S> {
    data: &'a mut [S],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> ViewMut<'a, S> {
    pub fn new(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [S],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        check_extent(data.len(), offset, rows, cols, rs, cs);
        ViewMut {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

fn check_extent(len: usize, offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = offset + (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last < len,
        "matrix view {rows}x{cols} (offset {offset}, strides {rs},{cs}) exceeds buffer of {len}"
    );
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: ViewMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Nothing to accumulate; only the beta scaling applies.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == S::zero() {
                    S::zero()
                } else {
                    c.data[idx] * beta
                };
            }
        }
        return;
    }
    // SAFETY: all three views were extent-checked against their buffers on
    // construction, and `c` is uniquely borrowed.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out = x·w + bias` for row-major `x: rows × inner`, `w: inner × cols`.
pub fn linear<S: Scalar>(x: &[S], w: &[S], bias: &[S], rows: usize, inner: usize, out: &mut [S]) {
    let cols = bias.len();
    debug_assert_eq!(out.len(), rows * cols);
    for row in out.chunks_exact_mut(cols) {
        row.copy_from_slice(bias);
    }
    gemm(
        S::one(),
        View::new(x, rows, inner),
        View::new(w, inner, cols),
        S::one(),
        ViewMut::new(out, rows, cols),
    );
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dout`, `db += Σ_rows dout`
/// and, when requested, writes (`beta = 0`) or accumulates (`beta = 1`)
/// `dx = dout·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dout: &[S],
    rows: usize,
    inner: usize,
    cols: usize,
    dw: &mut [S],
    db: &mut [S],
    dx: Option<(&mut [S], S)>,
) {
    gemm(
        S::one(),
        View::new(x, rows, inner).t(),
        View::new(dout, rows, cols),
        S::one(),
        ViewMut::new(dw, inner, cols),
    );
    for row in dout.chunks_exact(cols) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    if let Some((dx, beta)) = dx {
        gemm(
            S::one(),
            View::new(dout, rows, cols),
            View::new(w, inner, cols).t(),
            beta,
            ViewMut::new(dx, rows, inner),
        );
    }
}

/// Inner product with eight independent partial sums, which lets the
/// compiler keep the loop in vector registers.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(S::zero(), |t, (&x, &y)| t + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |t, &v| t + v)
}

/// `y += alpha * x`.
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    assert_eq!(x.len(), y.len(), "axpy of unequal lengths");
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
