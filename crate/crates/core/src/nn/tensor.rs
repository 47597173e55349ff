//! Dense 5-D tensors `(batch, channels, depth, height, width)` and the
//! scalar abstraction that lets every kernel run in 32-bit (training,
//! inference) or 64-bit (gradient checking) precision.

use num_traits::{Float, NumAssign};

/// Element type for tensors: f32 for production, f64 for gradient checks.
pub trait Scalar: Float + NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a . b + beta * c` over row/column strides.
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
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major contiguous GEMM helper: `c (m x n) += a (m x k) . b (k x n)`
/// when `beta` is one, or overwrites when `beta` is zero. Slices must be
/// exactly the advertised sizes.
pub(crate) fn gemm_rm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Dense tensor with shape `(N, C, D, H, W)`, W fastest-varying.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn new(shape: [usize; 5], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Tensor5 { shape, data }
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial dims `(D, H, W)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Elements per channel, `D*H*W`.
    pub fn channel_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, cs, ds, hs, ws] = self.shape;
        (((n * cs + c) * ds + d) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, d, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize) -> &mut T {
        let i = self.idx(n, c, d, h, w);
        &mut self.data[i]
    }

    /// One batch item as a contiguous `(C, D*H*W)` slice.
    pub fn batch_slice(&self, n: usize) -> &[T] {
        let sz = self.len() / self.batch();
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor5<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Precision cast, used to move test tensors between f32 and f64.
    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_math_is_w_fastest() {
        let t = Tensor5::<f32>::new([1, 2, 2, 2, 3], (0..24).map(|i| i as f32).collect());
        assert_eq!(t.at(0, 0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 0, 1, 0), 3.0);
        assert_eq!(t.at(0, 0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 0, 0, 0), 12.0);
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] . [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f32, 2.0, 3.0, 4.0];
        let b = vec![5.0f32, 6.0, 7.0, 8.0];
        let mut c = vec![0.0f32; 4];
        gemm_rm(2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }
}
