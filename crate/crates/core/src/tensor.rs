//! Dense rank-4 tensors in (batch, channels, rows, cols) layout.
//!
//! Storage is a contiguous row-major buffer with the column index varying
//! fastest. The element type is a property of the tensor (`Tensor4<f32>`
//! for training, `Tensor4<f64>` for verification paths).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating point element type usable in tensors.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// `c <- alpha * a * b + beta * c` for strided row-major-or-not matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    (alen, rsa, csa): (usize, usize, usize),
    (blen, rsb, csb): (usize, usize, usize),
    (clen, rsc, csc): (usize, usize, usize),
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= alen, "gemm: lhs out of bounds");
    assert!(last(k, n, rsb, csb) <= blen, "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) <= clen, "gemm: output out of bounds");
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $erf:path, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_gemm_bounds(
                    m,
                    k,
                    n,
                    (a.len(), rsa, csa),
                    (b.len(), rsb, csb),
                    (c.len(), rsc, csc),
                );
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, libm::erff, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, libm::erf, matrixmultiply::dgemm);

/// Tensor extents: batch, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dims must be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Rows times cols.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Initialization scheme for [`Tensor4::alloc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Constant(f64),
    /// Uniform on `[lo, hi)`.
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Kaiming-uniform for a given fan-in: bound `sqrt(6 / fan_in)`, variance `2 / fan_in`.
    Kaiming { fan_in: usize, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor4<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor4<{}>{}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor4<T> {
    pub fn alloc(shape: Shape4, fill: Fill) -> Self {
        let len = shape.numel();
        let data = match fill {
            Fill::Constant(v) => vec![T::from_f64_lossy(v); len],
            Fill::Uniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
                    .collect()
            }
            Fill::Kaiming { fan_in, seed } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        Self { shape, data }
    }

    /// Shape-checked allocation from raw dims.
    pub fn alloc_dims(dims: [usize; 4], fill: Fill) -> Result<Self> {
        Ok(Self::alloc(Shape4::new(dims[0], dims[1], dims[2], dims[3])?, fill))
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Convenience constructor used heavily in tests.
    pub fn from_dims(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        Self::from_vec(Shape4::new(dims[0], dims[1], dims[2], dims[3])?, data)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape4 {
                n: 1,
                c: 1,
                h: 1,
                w: 1,
            },
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Slice of one (sample, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |acc, (a, b)| acc.max((a.as_f64() - b.as_f64()).abs())))
    }

    pub fn expect_shape(&self, shape: Shape4) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Same buffer viewed under a different shape with equal element count.
    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies samples `indices` into a new batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let per = self.shape.c * self.shape.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::Shape(format!(
                    "sample index {i} out of range for batch {}",
                    self.shape.n
                )));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let shape = Shape4::new(indices.len(), self.shape.c, self.shape.h, self.shape.w)?;
        Self::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fill_is_exact() {
        let t = Tensor4::<f32>::alloc_dims([1, 1, 2, 2], Fill::Constant(0.0)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn uniform_fill_is_deterministic() {
        let fill = Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor4::<f32>::alloc_dims([1, 1, 2, 2], fill).unwrap();
        let b = Tensor4::<f32>::alloc_dims([1, 1, 2, 2], fill).unwrap();
        let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_dim_is_a_shape_error() {
        assert!(matches!(
            Tensor4::<f32>::alloc_dims([1, 0, 2, 2], Fill::Constant(0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        // 10^4 draws of a (1,3,4,4) weight read as 3 input channels x 4x4 kernel.
        let fan_in = 3 * 4 * 4;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for seed in 0..10_000u64 {
            let t = Tensor4::<f64>::alloc_dims([1, 3, 4, 4], Fill::Kaiming { fan_in, seed: seed + 1 })
                .unwrap();
            for &v in t.data() {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        let target = 2.0 / fan_in as f64;
        assert!(
            (var - target).abs() < 0.3 * target,
            "var {var} vs target {target}"
        );
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let shape = Shape4::new(1, 1, 2, 2).unwrap();
        assert!(Tensor4::<f32>::from_vec(shape, vec![0.0; 3]).is_err());
    }
}
