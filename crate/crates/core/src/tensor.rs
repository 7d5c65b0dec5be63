//! Dense rank-4 NCHW tensors and the pointwise kernels the graph builds on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Extents in (batch, channels, height, width) order.
pub type Dims = [usize; 4];

/// Scalar type a tensor can hold. Training runs in `f32`; gradient checks run in `f64`.
pub trait Element: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided matrices (`m×k` times `k×n`).
    ///
    /// # Safety
    /// Every strided index reachable from the pointers must lie within its allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn raw_gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn raw_gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T: Element> Mat<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix storage does not match extents");
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out`, with `out` row-major `m×n`.
pub(crate) fn gemm<T: Element>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner gemm extents differ");
    assert_eq!(out.len(), m * n, "gemm output storage does not match extents");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the extents and strides are derived from slices whose lengths were
    // checked against them above, so every address the kernel touches is in bounds.
    unsafe {
        T::raw_gemm(
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Initialisation rule for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `(-bound, bound)`.
    Uniform { bound: f64, seed: u64 },
    /// Normal with mean zero.
    Normal { std: f64, seed: u64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::NAME, self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn numel(dims: Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(std::mem::size_of::<f64>()).is_some_and(|b| b <= isize::MAX as usize))
        .ok_or(Error::Overflow { dims })
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: Dims, init: Init) -> Result<Self> {
        let len = numel(dims)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Constant(c) => vec![T::of(c); len],
            Init::Uniform { bound, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if bound > 0.0 {
                    (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                } else {
                    vec![T::zero(); len]
                }
            }
            Init::Normal { std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::Invalid(format!("normal init with std {std}: {e}")))?;
                (0..len).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
        };
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::new(dims, Init::Zeros).expect("zero tensor dims overflow")
    }

    pub fn full(dims: Dims, value: T) -> Self {
        let len = numel(dims).expect("tensor dims overflow");
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = numel(dims)?;
        if data.len() != len {
            return Err(shape_err(
                "from_vec",
                format!("{} values for dims {dims:?} ({len} expected)", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = self.dims;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, e.g. promoting trained `f32` parameters to `f64`.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if numel(dims)? != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} cannot become {dims:?}", self.dims),
            ));
        }
        Ok(Self { dims, data: self.data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip("hadamard", other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_dims("add_assign", self.dims, other.dims)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    fn zip(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_dims(op, self.dims, other.dims)?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Multiplies `self` (`N×C×H×W`) by `w`, where `w` is `1×C×H×W` and is
    /// broadcast over the batch.
    pub fn hadamard_broadcast(&self, w: &Self) -> Result<Self> {
        let [n, c, h, wd] = self.dims;
        if w.dims != [1, c, h, wd] {
            return Err(shape_err(
                "hadamard_broadcast",
                format!("{:?} against per-sample weights {:?}", self.dims, w.dims),
            ));
        }
        let per = c * h * wd;
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..n {
            let xs = &self.data[i * per..(i + 1) * per];
            data.extend(xs.iter().zip(&w.data).map(|(&a, &b)| a * b));
        }
        Ok(Self { dims: self.dims, data })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be at least 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let [n, c, h, w] = self.dims;
        let (oh, ow) = (h * factor, w * factor);
        let out_dims = [n, c, oh, ow];
        let mut data = Vec::with_capacity(numel(out_dims)?);
        for plane in self.data.chunks_exact(h * w).filter(|_| h * w > 0) {
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    data.push(row[x / factor]);
                }
            }
        }
        Ok(Self { dims: out_dims, data })
    }

    /// Joins tensors along `axis` (0 = batch, 1 = channels); all other extents must agree.
    pub fn concat(axis: usize, parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        if axis > 1 {
            return Err(Error::Invalid(format!("concat along axis {axis} is not supported")));
        }
        let mut out_dims = first.dims;
        out_dims[axis] = 0;
        for p in parts {
            for d in 0..4 {
                if d != axis && p.dims[d] != first.dims[d] {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} vs {:?} along axis {axis}", first.dims, p.dims),
                    ));
                }
            }
            out_dims[axis] += p.dims[axis];
        }
        let mut data = Vec::with_capacity(numel(out_dims)?);
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(&p.data);
            }
        } else {
            let plane = first.dims[2] * first.dims[3];
            for n in 0..first.dims[0] {
                for p in parts {
                    let block = p.dims[1] * plane;
                    data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
                }
            }
        }
        Ok(Self { dims: out_dims, data })
    }

    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        Self::concat(1, &[a, b])
    }

    /// Channels `[start, start + len)` of every batch element.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start + len > c {
            return Err(shape_err(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            dims: [n, len, h, w],
            data,
        })
    }
}

/// Decorrelated child seed for stream `stream` of `seed` (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    // Evaluate on the side that cannot overflow exp().
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn same_dims(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(op, format!("{a:?} vs {b:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant() {
        let z = Tensor::<f32>::new([1, 1, 2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::<f32>::new([1, 1, 1, 1], Init::Constant(3.5)).unwrap();
        assert_eq!(c.data(), &[3.5]);
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let init = Init::Uniform { bound: 0.1, seed: 7 };
        let a = Tensor::<f32>::new([1, 2, 2, 2], init).unwrap();
        let b = Tensor::<f32>::new([1, 2, 2, 2], init).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 0.1));
        let other = Tensor::<f32>::new([1, 2, 2, 2], Init::Uniform { bound: 0.1, seed: 8 }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn overflowing_dims_are_rejected() {
        let err = Tensor::<f32>::new([usize::MAX, 2, 1, 1], Init::Zeros).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn elementwise_identities() {
        let x = Tensor::<f32>::new([1, 2, 3, 3], Init::Normal { std: 1.0, seed: 3 }).unwrap();
        assert_eq!(x.add(&Tensor::zeros(x.dims())).unwrap(), x);
        assert_eq!(x.hadamard(&Tensor::full(x.dims(), 1.0)).unwrap(), x);
        let a = Tensor::from_vec([1, 1, 1, 2], vec![2.0f32, 3.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![4.0f32, 5.0]).unwrap();
        assert_eq!(a.hadamard(&b).unwrap().data(), &[8.0, 15.0]);
        assert!(matches!(a.add(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn activations() {
        let z = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert_eq!(z.sigmoid().data(), &[0.5]);
        assert_eq!(z.tanh().data(), &[0.0]);
        let x = Tensor::<f64>::new([1, 1, 4, 4], Init::Normal { std: 5.0, seed: 1 }).unwrap();
        let s = x.sigmoid().add(&x.scale(-1.0).sigmoid()).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let big = Tensor::from_vec([1, 1, 1, 2], vec![-1000.0f32, 1000.0]).unwrap();
        assert_eq!(big.sigmoid().data(), &[0.0, 1.0]);
        let r = Tensor::from_vec([1, 1, 1, 2], vec![-1.0f32, 2.0]).unwrap().relu();
        assert_eq!(r.data(), &[0.0, 2.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(x.upsample_nearest(1).unwrap(), x);
        let up = x.upsample_nearest(2).unwrap();
        assert_eq!(up.dims(), [1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn concat_layout() {
        let a = Tensor::<f32>::new([2, 3, 2, 2], Init::Normal { std: 1.0, seed: 1 }).unwrap();
        let b = Tensor::<f32>::new([2, 5, 2, 2], Init::Normal { std: 1.0, seed: 2 }).unwrap();
        let ab = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.dims(), [2, 8, 2, 2]);
        assert_eq!(ab.slice_channels(0, 3).unwrap(), a);
        assert_eq!(ab.slice_channels(3, 5).unwrap(), b);
        let empty = Tensor::<f32>::zeros([2, 0, 2, 2]);
        assert_eq!(Tensor::concat_channels(&a, &empty).unwrap(), a);
        let wrong = Tensor::<f32>::zeros([2, 1, 3, 2]);
        assert!(Tensor::concat_channels(&a, &wrong).is_err());
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // aᵀ·a' through the transposed view.
        let mut out_t = vec![0.0; 9];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), 0.0, &mut out_t);
        assert_eq!(out_t[0], a[0] * a[0] + a[3] * a[3]);
        assert_eq!(out_t[5], a[1] * a[2] + a[4] * a[5]);
    }
}
