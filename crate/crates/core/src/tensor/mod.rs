//! Dense row-major tensors and the reverse-mode differentiation engine.
//!
//! Training runs in `f32`. Every type here is generic over [`Real`] so the
//! gradient-check oracles can replay the exact same graph in `f64`.

mod conv;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use graph::{Graph, PoolAxis, PoolKind, Var};

/// Floating point element type usable by the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = a · b + beta · c` for row-major `c` of shape `[m, n]`.
    ///
    /// `a` is `[m, k]` (or `[k, m]` when `a_t`), `b` is `[k, n]` (or `[n, k]`
    /// when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 4] {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    [rsa, csa, rsb, csb]
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_t, b_t);
                // SAFETY: the slices were bounds-checked against the logical
                // extents above, and the strides address only inside them.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A dense tensor with up to five axes stored contiguously in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > 5 {
            return Err(Error::Invalid(format!(
                "tensors have at most 5 axes, got {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        Tensor {
            dims,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.dims, &dims));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Copy of the `index`-th slice along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Tensor<T> {
        let inner: usize = self.dims[1..].iter().product();
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::shape("stack", &first.dims, &p.dims));
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64_lossy()).sum()
    }
}
