//! Dense row-major matrices over `f32` or `f64`.
//!
//! Training runs in `f32`; gradient checks instantiate the same code with
//! `f64`. Products go through `matrixmultiply`, which takes arbitrary
//! strides, so transposed operands never need to be materialized.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = alpha * a·b + beta * c` on strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Mat { rows, cols, data }
    }

    pub fn zeros_like(other: &Mat<T>) -> Self {
        Mat::zeros(other.rows, other.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Adds `block` into columns `start..start + block.cols`.
    pub fn add_col_block(&mut self, start: usize, block: &Mat<T>) {
        debug_assert_eq!(self.rows, block.rows);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + block.cols];
            for (d, &s) in dst.iter_mut().zip(block.row(r)) {
                *d = *d + s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.data {
            *a = *a * factor;
        }
    }

    /// Adds a `1×cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Mat<T>) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a = *a + b;
            }
        }
    }

    /// Sums rows into `acc` (`1×cols`).
    pub fn sum_rows_into(&self, acc: &mut Mat<T>) {
        debug_assert_eq!(acc.len(), self.cols);
        for r in 0..self.rows {
            for (a, &b) in acc.data.iter_mut().zip(self.row(r)) {
                *a = *a + b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Plain,
    Transposed,
}

fn view<T>(m: &Mat<T>, layout: Layout) -> (usize, usize, isize, isize) {
    match layout {
        Layout::Plain => (m.rows, m.cols, m.cols as isize, 1),
        Layout::Transposed => (m.cols, m.rows, 1, m.cols as isize),
    }
}

fn gemm_into<T: Real>(a: &Mat<T>, la: Layout, b: &Mat<T>, lb: Layout, beta: T, c: &mut Mat<T>) {
    let (m, k, rsa, csa) = view(a, la);
    let (k2, n, rsb, csb) = view(b, lb);
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    // SAFETY: shapes were checked above, all three views lie inside their
    // backing vectors, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_into(a, Layout::Plain, b, Layout::Plain, T::zero(), &mut c);
    c
}

/// `a · bᵀ`
pub fn matmul_nt<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm_into(a, Layout::Plain, b, Layout::Transposed, T::zero(), &mut c);
    c
}

/// `c += aᵀ · b`
pub fn matmul_tn_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    gemm_into(a, Layout::Transposed, b, Layout::Plain, T::one(), c);
}

/// `aᵀ · b`
pub fn matmul_tn<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.cols, b.cols);
    gemm_into(a, Layout::Transposed, b, Layout::Plain, T::zero(), &mut c);
    c
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// Log-softmax of one row into a new vector.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + total.ln();
    row.iter().map(|&x| x - log_z).collect()
}

/// Sinusoidal position encoding for `len` positions of width `dim`.
pub fn sinusoid<T: Real>(len: usize, dim: usize) -> Mat<T> {
    let mut pe = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64) / dim as f64 * 10_000f64.ln()).exp();
            let angle = pos as f64 * freq;
            *pe.at_mut(pos, 2 * i) = T::of(angle.sin());
            *pe.at_mut(pos, 2 * i + 1) = T::of(angle.cos());
        }
    }
    pe
}
