//! Dense NCHW tensors and the forward/backward kernels every network is
//! built from: same-padded convolution, batch normalization, ReLU and
//! channel concatenation.

use std::fmt::{self, Debug};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("tensor dimensions must all be at least 1, got {0}")]
    EmptyDimension(Shape),
    #[error("kernel size {0} is not odd")]
    EvenKernel(usize),
    #[error("parameter vector `{name}` has length {actual}, expected {expected}")]
    ParamLength {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("batch statistics need at least 2 elements per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("backward pass requires train-mode batch statistics")]
    InferModeBackward,
    #[error("split point {split} is outside 1..{channels}")]
    BadSplit { split: usize, channels: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type. `f32` is the training precision, `f64`
/// exists for gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;

    /// `C ← alpha·A·B + beta·C` on strided row/column-major views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
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

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
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

/// Row-major matrix product `c = op(a)·op(b) + beta·c` where `op` optionally
/// transposes. `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n`
/// (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn is_valid(&self) -> bool {
        self.n > 0 && self.c > 0 && self.h > 0 && self.w > 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Panics if any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.is_valid(), "empty tensor shape {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(TensorError::EmptyDimension(shape));
        }
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        t.data[idx] = f(n, c, y, x);
                        idx += 1;
                    }
                }
            }
        }
        t
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

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        debug_assert!(n < s.n && c < s.c && y < s.h && x < s.w);
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h×w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn expect_shape(&self, expected: Shape) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                expected,
                actual: self.shape,
            })
        }
    }

    /// Stack single-sample tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or(TensorError::EmptyDimension(Shape::new(0, 0, 0, 0)))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            t.expect_shape(first)?;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(Shape::new(first.n * items.len(), first.c, first.h, first.w), data)
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_channels, in_channels, k, k)`.
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weights.shape();
        if s.h % 2 == 0 || s.h != s.w {
            return Err(TensorError::EvenKernel(s.h));
        }
        if bias.len() != s.n {
            return Err(TensorError::ParamLength {
                name: "bias",
                expected: s.n,
                actual: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            weights: Tensor::zeros(Shape::new(out_channels, in_channels, kernel, kernel)),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape().h
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Unfold one sample `(c, h, w)` into a `(c·k·k) × (h·w)` patch matrix with
/// zero padding of `(k-1)/2`.
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                    out[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back into `dst`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let drow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &v) in drow.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn check_conv_input<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<()> {
    if input.shape().c != params.in_channels() {
        return Err(TensorError::ChannelMismatch {
            expected: params.in_channels(),
            actual: input.shape().c,
        });
    }
    if params.kernel_size() % 2 == 0 {
        return Err(TensorError::EvenKernel(params.kernel_size()));
    }
    Ok(())
}

/// Cross-correlation with same-size zero padding, plus bias.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    check_conv_input(input, params)?;
    let s = input.shape();
    let k = params.kernel_size();
    let cout = params.out_channels();
    let hw = s.plane();
    let ckk = s.c * k * k;
    let mut out = Tensor::zeros(Shape::new(s.n, cout, s.h, s.w));
    let mut cols = vec![T::zero(); ckk * hw];
    for n in 0..s.n {
        im2col(input.sample(n), s.c, s.h, s.w, k, &mut cols);
        let dst = &mut out.data[n * cout * hw..(n + 1) * cout * hw];
        for (co, chunk) in dst.chunks_exact_mut(hw).enumerate() {
            chunk.fill(params.bias[co]);
        }
        gemm(cout, ckk, hw, params.weights.data(), false, &cols, false, T::one(), dst);
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_with(input, params, grad_output, true)
}

/// Like [`conv2d_backward`] but lets the caller skip the input gradient,
/// e.g. for the first layer of a network.
pub fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_output: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    check_conv_input(input, params)?;
    let s = input.shape();
    let k = params.kernel_size();
    let cout = params.out_channels();
    grad_output.expect_shape(Shape::new(s.n, cout, s.h, s.w))?;
    let hw = s.plane();
    let ckk = s.c * k * k;

    let mut gw = Tensor::zeros(params.weights.shape());
    let mut gb = vec![T::zero(); cout];
    let mut gin = want_input.then(|| Tensor::zeros(s));
    let mut cols = vec![T::zero(); ckk * hw];
    let mut gcols = vec![T::zero(); if want_input { ckk * hw } else { 0 }];

    for n in 0..s.n {
        let go = grad_output.sample(n);
        for (co, plane) in go.chunks_exact(hw).enumerate() {
            gb[co] = gb[co] + plane.iter().copied().sum::<T>();
        }
        im2col(input.sample(n), s.c, s.h, s.w, k, &mut cols);
        // dW += dY · colsᵀ
        gemm(cout, hw, ckk, go, false, &cols, true, T::one(), gw.data_mut());
        if let Some(gin) = gin.as_mut() {
            // dcols = Wᵀ · dY
            gemm(ckk, cout, hw, params.weights.data(), true, go, false, T::zero(), &mut gcols);
            let len = s.c * hw;
            col2im(&gcols, s.c, s.h, s.w, k, &mut gin.data[n * len..(n + 1) * len]);
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight of the new batch statistic in the running average.
    pub momentum: T,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNormParams<T> {
    /// Identity affine transform, zero mean and unit variance running stats.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64_lossy(BN_EPSILON),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, v) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(TensorError::ParamLength {
                    name,
                    expected: c,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Fold the batch statistics of a train-mode forward call into the
    /// running averages. No-op for infer-mode caches.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let keep = T::one() - self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + self.momentum * cache.mean[c];
            self.running_var[c] = keep * self.running_var[c] + self.momentum * cache.var[c];
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub x_hat: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    params.validate()?;
    let s = input.shape();
    if s.c != params.channels() {
        return Err(TensorError::ChannelMismatch {
            expected: params.channels(),
            actual: s.c,
        });
    }
    let hw = s.plane();
    let count = s.n * hw;
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(TensorError::DegenerateBatch(count));
            }
            let inv = T::one() / T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc = acc + input.plane(n, c).iter().copied().sum::<T>();
                }
                let mu = acc * inv;
                let mut sq = T::zero();
                for n in 0..s.n {
                    sq = sq
                        + input
                            .plane(n, c)
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq * inv;
            }
            (mean, var)
        }
        Mode::Infer => (params.running_mean.clone(), params.running_var.clone()),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + params.epsilon).sqrt())
        .collect();

    let mut x_hat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * hw;
            let (mu, is, g, b) = (mean[c], inv_std[c], params.gamma[c], params.beta[c]);
            let src = input.plane(n, c);
            for i in 0..hw {
                // (x − μ) is exactly zero for constant channels, so a zero
                // variance with ε = 0 still yields a finite numerator of 0.
                let d = src[i] - mu;
                let xh = if d == T::zero() { T::zero() } else { d * is };
                x_hat.data[off + i] = xh;
                out.data[off + i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            x_hat,
            mean,
            var,
            inv_std,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward through batch statistics: mean and variance are treated as
/// functions of the input.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if cache.mode != Mode::Train {
        return Err(TensorError::InferModeBackward);
    }
    let s = cache.x_hat.shape();
    grad_output.expect_shape(s)?;
    if params.channels() != s.c {
        return Err(TensorError::ChannelMismatch {
            expected: params.channels(),
            actual: s.c,
        });
    }
    let hw = s.plane();
    let m = T::from_usize(s.n * hw).unwrap();
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &xh) in grad_output.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                sg = sg + g;
                sgx = sgx + g * xh;
            }
        }
        gbeta[c] = sg;
        ggamma[c] = sgx;
    }
    let mut gin = Tensor::zeros(s);
    for c in 0..s.c {
        // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
        let k = params.gamma[c] * cache.inv_std[c] / m;
        for n in 0..s.n {
            let off = (n * s.c + c) * hw;
            let gp = grad_output.plane(n, c);
            let xp = cache.x_hat.plane(n, c);
            for i in 0..hw {
                gin.data[off + i] = k * (m * gp[i] - gbeta[c] - xp[i] * ggamma[c]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: gin,
        gamma: ggamma,
        beta: gbeta,
    })
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes the gradient where `input > 0`. Also valid with the ReLU output in
/// place of its input, since the two are positive at the same positions.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_output, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(TensorError::ShapeMismatch {
            expected: Shape::new(sa.n, sb.c, sa.h, sa.w),
            actual: sb,
        });
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(out_shape, data)
}

/// Slice a gradient over concatenated channels back into its two parts;
/// `split` is the channel count of the first part.
pub fn split_channels_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    split: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grad_output.shape();
    if split == 0 || split >= s.c {
        return Err(TensorError::BadSplit {
            split,
            channels: s.c,
        });
    }
    let hw = s.plane();
    let mut a = Vec::with_capacity(s.n * split * hw);
    let mut b = Vec::with_capacity(s.n * (s.c - split) * hw);
    for n in 0..s.n {
        let sample = grad_output.sample(n);
        a.extend_from_slice(&sample[..split * hw]);
        b.extend_from_slice(&sample[split * hw..]);
    }
    Ok((
        Tensor::from_vec(Shape::new(s.n, split, s.h, s.w), a)?,
        Tensor::from_vec(Shape::new(s.n, s.c - split, s.h, s.w), b)?,
    ))
}
