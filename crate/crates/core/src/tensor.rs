//! Dense rank-4 tensors in (batch, channel, height, width) layout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use crate::error::{Error, Result};

/// Scalar type the engine runs on. Training uses `f32`; gradient checks
/// run the same kernels in `f64`.
pub trait Float:
    num_traits::Float + num_traits::FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = a · b (+ c if accumulate)`, with `a` m×k and `b` k×n, both
    /// optionally transposed. All buffers are dense row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_trans: bool, b: &[Self], b_trans: bool, c: &mut [Self], accumulate: bool);

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // stored row-major as (rows × cols) when not transposed, (cols × rows) otherwise
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_trans: bool, b: &[Self], b_trans: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_trans);
                let (rsb, csb) = gemm_strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices were checked to cover every index the
                // strides can address.
                unsafe {
                    $gemm(
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

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    /// Gradient buffer, present on parameters after a backward pass.
    pub grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Channel plane `(n, c)` as a slice of `h·w` values.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels, with bias.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: (k - 1) / 2,
            has_bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.padding = dilation * (self.kernel.0 - 1) / 2;
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::config(format!("conv kernel, stride and dilation must be >= 1: {self:?}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("conv channel counts must be positive"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |size: usize, k: usize| {
            let span = self.dilation * (k - 1) + 1;
            let padded = size + 2 * self.padding;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        Some((dim(h, self.kernel.0)?, dim(w, self.kernel.1)?))
    }
}
