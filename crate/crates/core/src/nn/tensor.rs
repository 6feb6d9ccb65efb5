use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the network (`f32` for training, `f64`
/// for finite-difference checks).
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    /// `c = alpha * a · b + beta * c` over row/column strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
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

    fn of(v: f64) -> Self {
        Self::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product helpers on plain slices.
pub(crate) mod mat {
    use super::Real;

    /// `c = a(m×k) · b(k×n) + beta·c`
    pub fn mm<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], beta: F, c: &mut [F]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c = aᵀ · b + beta·c` where `a` is stored `k×m`.
    pub fn mm_at<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], beta: F, c: &mut [F]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// `c = a · bᵀ + beta·c` where `b` is stored `n×k`.
    pub fn mm_bt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], beta: F, c: &mut [F]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense `[batch, channels, height, width]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: F) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> F) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([b, c, h, w]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements of one `[c, h, w]` sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[F] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [F] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn at(&self, idx: [usize; 4]) -> F {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], v: F) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, [b, c, h, w]: [usize; 4]) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}
