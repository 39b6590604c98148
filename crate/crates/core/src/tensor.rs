//! Dense row-major tensors and the numeric kernels the autodiff graph is built on.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_like::ScalarOps;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    ScalarOps + Copy + Default + PartialOrd + Debug + Display + Send + Sync + 'static
{
    /// One-byte tag stored in checkpoints.
    const DTYPE_TAG: u8;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Minimal arithmetic surface shared by the two float types.
pub mod num_like {
    use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

    pub trait ScalarOps:
        Sized
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + AddAssign
        + SubAssign
        + MulAssign
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn sqrt(self) -> Self;
        fn ln(self) -> Self;
        fn exp(self) -> Self;
        fn tanh(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_ops {
        ($t:ty) => {
            impl ScalarOps for $t {
                #[inline]
                fn zero() -> Self {
                    0.0
                }
                #[inline]
                fn one() -> Self {
                    1.0
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn tanh(self) -> Self {
                    <$t>::tanh(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }
    impl_ops!(f32);
    impl_ops!(f64);
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 1;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers pass slices that cover every strided index of the
        // m×k, k×n and m×n views.
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            )
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 2;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            )
        }
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Immutable-by-default dense tensor. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data.as_slice())?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sums over every axis where `target` has extent 1. Ranks must match.
    pub fn sum_to(&self, target: &[usize]) -> Self {
        assert_eq!(target.len(), self.shape.len(), "sum_to rank mismatch");
        if target == self.shape.as_slice() {
            return self.clone();
        }
        let mut out = vec![T::zero(); numel(target)];
        broadcast_runs(target, &self.shape, |big, small, len, spread| {
            let src = &self.data[big..big + len];
            if spread {
                let mut acc = T::zero();
                for &v in src {
                    acc += v;
                }
                out[small] += acc;
            } else {
                for (o, &v) in out[small..small + len].iter_mut().zip(src) {
                    *o += v;
                }
            }
        });
        Tensor {
            shape: target.to_vec(),
            data: Arc::new(out),
        }
    }

    /// Repeats along every axis where `self` has extent 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Self {
        assert_eq!(target.len(), self.shape.len(), "broadcast rank mismatch");
        if target == self.shape.as_slice() {
            return self.clone();
        }
        let mut out = vec![T::zero(); numel(target)];
        broadcast_runs(&self.shape, target, |big, small, len, spread| {
            let dst = &mut out[big..big + len];
            if spread {
                dst.fill(self.data[small]);
            } else {
                dst.copy_from_slice(&self.data[small..small + len]);
            }
        });
        Tensor {
            shape: target.to_vec(),
            data: Arc::new(out),
        }
    }

    /// Sub-block starting at `starts` with extents `lens`.
    pub fn slice(&self, starts: &[usize], lens: &[usize]) -> Self {
        assert_eq!(starts.len(), self.shape.len());
        let mut out = Vec::with_capacity(numel(lens));
        let strides = strides(&self.shape);
        for_each_index(lens, |_, idx| {
            let off: usize = idx
                .iter()
                .zip(starts)
                .zip(&strides)
                .map(|((i, s0), st)| (i + s0) * st)
                .sum();
            out.push(self.data[off]);
        });
        Tensor {
            shape: lens.to_vec(),
            data: Arc::new(out),
        }
    }

    /// Places `self` into a zero tensor of `full` shape at `starts`.
    pub fn embed(&self, starts: &[usize], full: &[usize]) -> Self {
        let mut out = vec![T::zero(); numel(full)];
        let strides = strides(full);
        for_each_index(&self.shape, |flat, idx| {
            let off: usize = idx
                .iter()
                .zip(starts)
                .zip(&strides)
                .map(|((i, s0), st)| (i + s0) * st)
                .sum();
            out[off] = self.data[flat];
        });
        Tensor {
            shape: full.to_vec(),
            data: Arc::new(out),
        }
    }

    pub fn concat(parts: &[&Self], dim: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let mut shape = first.shape.clone();
        shape[dim] = 0;
        for p in parts {
            if p.shape.len() != first.shape.len()
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != dim && e != first.shape[d])
            {
                return Err(Error::Shape(format!(
                    "concat along {dim}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            shape[dim] += p.shape[dim];
        }
        let outer: usize = shape[..dim].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk: usize = p.shape[dim..].iter().product();
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor {
            shape,
            data: Arc::new(out),
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Walks `big` in contiguous runs paired with offsets into `small`, which
/// broadcasts against it. Calls `f(big_offset, small_offset, len, spread)`;
/// `spread` means the run maps to the single element `small_offset`,
/// otherwise to `small[small_offset..small_offset + len]`.
fn broadcast_runs(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize, usize, bool)) {
    // merge adjacent axes of the same kind, dropping unit axes
    let mut groups: Vec<(usize, bool)> = Vec::new();
    for (&s, &b) in small.iter().zip(big) {
        assert!(s == b || s == 1, "cannot broadcast {small:?} against {big:?}");
        if b == 1 {
            continue;
        }
        let spread = s == 1;
        match groups.last_mut() {
            Some((e, k)) if *k == spread => *e *= b,
            _ => groups.push((b, spread)),
        }
    }
    let total: usize = groups.iter().map(|g| g.0).product();
    let Some(&(len, spread)) = groups.last() else {
        if total > 0 {
            f(0, 0, 1, false);
        }
        return;
    };
    if total == 0 {
        return;
    }
    let outer = &groups[..groups.len() - 1];
    // stride of each outer group in `small` (0 where spread)
    let mut sstride = vec![0usize; outer.len()];
    let mut acc = if spread { 1 } else { len };
    for (i, &(e, sp)) in outer.iter().enumerate().rev() {
        if !sp {
            sstride[i] = acc;
            acc *= e;
        }
    }
    let mut idx = vec![0usize; outer.len()];
    let (mut big_off, mut small_off) = (0usize, 0usize);
    loop {
        f(big_off, small_off, len, spread);
        big_off += len;
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            small_off += sstride[d];
            if idx[d] < outer[d].0 {
                break;
            }
            small_off -= sstride[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Row-major odometer over every multi-index of `shape`.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Geometry of a square-kernel 2-D convolution from an `in_h × in_w` map to `out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a convolution, or `None` if the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl ConvGeom {
    pub fn forward(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let out_h = conv_out_len(in_h, kernel, stride, pad);
        let out_w = conv_out_len(in_w, kernel, stride, pad);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(ConvGeom {
                kernel,
                stride,
                pad,
                in_h,
                in_w,
                out_h,
                out_w,
            }),
            _ => Err(Error::Shape(format!(
                "{in_h}x{in_w} input too small for kernel {kernel} stride {stride} pad {pad}"
            ))),
        }
    }

    /// Geometry whose adjoint maps `in_h × in_w` up to the transposed-convolution output.
    pub fn transposed(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        let up = |l: usize| (l - 1) * stride + kernel + output_pad;
        let (h, w) = (up(in_h), up(in_w));
        if h <= 2 * pad || w <= 2 * pad || output_pad >= stride {
            return Err(Error::Shape(format!(
                "invalid transposed convolution on {in_h}x{in_w}"
            )));
        }
        let geom = ConvGeom::forward(h - 2 * pad, w - 2 * pad, kernel, stride, pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (in_h, in_w));
        Ok(geom)
    }

    fn col_rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `[0, in_w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kx).div_ceil(s);
    let hi = if g.in_w + g.pad > kx {
        ((g.in_w + g.pad - kx - 1) / s + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `x (N,Cin,H,W) ⊛ w (Cout,Cin,k,k) -> (N,Cout,oh,ow)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, cin) = (x.shape[0], x.shape[1]);
    let cout = w.shape[0];
    debug_assert_eq!(&x.shape[2..], &[g.in_h, g.in_w]);
    debug_assert_eq!(w.shape[1], cin);
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let mut out = vec![T::zero(); n * cout * ncols];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncols]
    };
    let in_plane = cin * g.in_h * g.in_w;
    for s in 0..n {
        let xs = &x.data[s * in_plane..(s + 1) * in_plane];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, cin, g, &mut cols);
            &cols
        };
        T::gemm(
            cout,
            rows,
            ncols,
            &w.data,
            rows as isize,
            1,
            b,
            ncols as isize,
            1,
            T::zero(),
            &mut out[s * cout * ncols..(s + 1) * cout * ncols],
            ncols as isize,
            1,
        );
    }
    Tensor {
        shape: vec![n, cout, g.out_h, g.out_w],
        data: Arc::new(out),
    }
}

/// Adjoint of [`conv2d`] in its input: `gy (N,Cout,oh,ow), w -> (N,Cin,H,W)`.
/// This is also the forward pass of a transposed convolution.
pub fn conv2d_adj_input<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, cout) = (gy.shape[0], gy.shape[1]);
    let cin = w.shape[1];
    debug_assert_eq!(w.shape[0], cout);
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let in_plane = cin * g.in_h * g.in_w;
    let mut out = vec![T::zero(); n * in_plane];
    let mut cols = vec![T::zero(); rows * ncols];
    for s in 0..n {
        let gs = &gy.data[s * cout * ncols..(s + 1) * cout * ncols];
        let dst = &mut out[s * in_plane..(s + 1) * in_plane];
        if g.is_pointwise() {
            T::gemm(
                rows, cout, ncols, &w.data, 1, rows as isize, gs, ncols as isize, 1, T::zero(),
                dst, ncols as isize, 1,
            );
        } else {
            T::gemm(
                rows,
                cout,
                ncols,
                &w.data,
                1,
                rows as isize,
                gs,
                ncols as isize,
                1,
                T::zero(),
                &mut cols,
                ncols as isize,
                1,
            );
            col2im(&cols, cin, g, dst);
        }
    }
    Tensor {
        shape: vec![n, cin, g.in_h, g.in_w],
        data: Arc::new(out),
    }
}

/// Adjoint of [`conv2d`] in its weight: `x (N,Cin,H,W), gy (N,Cout,oh,ow) -> (Cout,Cin,k,k)`.
pub fn conv2d_adj_weight<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (n, cin) = (x.shape[0], x.shape[1]);
    let cout = gy.shape[1];
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let mut out = vec![T::zero(); cout * rows];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncols]
    };
    let in_plane = cin * g.in_h * g.in_w;
    for s in 0..n {
        let xs = &x.data[s * in_plane..(s + 1) * in_plane];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, cin, g, &mut cols);
            &cols
        };
        let gs = &gy.data[s * cout * ncols..(s + 1) * cout * ncols];
        T::gemm(
            cout,
            ncols,
            rows,
            gs,
            ncols as isize,
            1,
            b,
            1,
            ncols as isize,
            T::one(),
            &mut out,
            rows as isize,
            1,
        );
    }
    Tensor {
        shape: vec![cout, cin, g.kernel, g.kernel],
        data: Arc::new(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_to_and_broadcast_match_index_oracle() {
        let big = [2usize, 3, 4, 5];
        let x = Tensor::<f64>::from_vec(big.to_vec(), (0..120).map(|v| v as f64 * 0.5 - 7.0).collect()).unwrap();
        for mask in 0..16u32 {
            let small: Vec<usize> = big.iter().enumerate().map(|(d, &e)| if mask >> d & 1 == 1 { 1 } else { e }).collect();
            let s = x.sum_to(&small);
            let st = strides(&small);
            let mut expect = vec![0.0; numel(&small)];
            for_each_index(&big, |flat, idx| {
                let off: usize = (0..4).map(|d| if small[d] == 1 { 0 } else { idx[d] * st[d] }).sum();
                expect[off] += x.data()[flat];
            });
            assert_eq!(s.data(), expect.as_slice(), "mask {mask}");
            let b = s.broadcast_to(&big);
            for_each_index(&big, |flat, idx| {
                let off: usize = (0..4).map(|d| if small[d] == 1 { 0 } else { idx[d] * st[d] }).sum();
                assert_eq!(b.data()[flat], s.data()[off]);
            });
        }
    }

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (n, cin) = (x.shape[0], x.shape[1]);
        let cout = w.shape[0];
        let k = g.kernel;
        let mut out = vec![0.0; n * cout * g.out_h * g.out_w];
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data[((s * cin + ci) * g.in_h + iy as usize)
                                        * g.in_w
                                        + ix as usize];
                                    let wv = w.data[((co * cin + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((s * cout + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(vec![n, cout, g.out_h, g.out_w], out).unwrap()
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n = numel(shape);
        let data = (0..n)
            .map(|i| ((i as f64 * 0.7311 + seed).sin() * 1.3).fract())
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(k, s, p, h) in &[(3, 1, 1, 7), (4, 2, 1, 9), (4, 1, 0, 6), (1, 1, 0, 5), (7, 1, 3, 8)] {
            let g = ConvGeom::forward(h, h, k, s, p).unwrap();
            let x = ramp(&[2, 3, h, h], 0.3);
            let w = ramp(&[4, 3, k, k], 1.1);
            let fast = conv2d(&x, &w, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), y> == <x, adj_input(y, w)> == <w, adj_weight(x, y)>
        for &(k, s, p, h) in &[(3, 2, 1, 8), (4, 2, 1, 9), (3, 1, 1, 5), (1, 1, 0, 4)] {
            let g = ConvGeom::forward(h, h, k, s, p).unwrap();
            let x = ramp(&[2, 3, h, h], 0.1);
            let w = ramp(&[5, 3, k, k], 0.9);
            let y = ramp(&[2, 5, g.out_h, g.out_w], 2.3);
            let lhs = dot(&conv2d(&x, &w, &g), &y);
            let via_input = dot(&x, &conv2d_adj_input(&y, &w, &g));
            let via_weight = dot(&w, &conv2d_adj_weight(&x, &y, &g));
            assert!((lhs - via_input).abs() < 1e-9, "{lhs} vs {via_input}");
            assert!((lhs - via_weight).abs() < 1e-9, "{lhs} vs {via_weight}");
        }
    }

    #[test]
    fn transposed_geometry_doubles_resolution() {
        let g = ConvGeom::transposed(16, 16, 3, 2, 1, 1).unwrap();
        assert_eq!((g.in_h, g.in_w, g.out_h, g.out_w), (32, 32, 16, 16));
    }

    #[test]
    fn sum_to_and_broadcast_are_adjoint() {
        let x = ramp(&[2, 3, 4, 5], 0.2);
        let c = ramp(&[1, 3, 1, 1], 0.5);
        let lhs = dot(&x.sum_to(&[1, 3, 1, 1]), &c);
        let rhs = dot(&x, &c.broadcast_to(&[2, 3, 4, 5]));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn slice_then_embed_round_trips_block() {
        let x = ramp(&[1, 2, 6, 6], 0.0);
        let s = x.slice(&[0, 0, 1, 2], &[1, 2, 3, 3]);
        let e = s.embed(&[0, 0, 1, 2], &[1, 2, 6, 6]);
        assert_eq!(e.slice(&[0, 0, 1, 2], &[1, 2, 3, 3]), s);
        assert!((e.sum() - s.sum()).abs() < 1e-12);
    }

    #[test]
    fn concat_interleaves_along_channel_axis() {
        let a = Tensor::<f32>::full(&[2, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[2, 2, 2, 2], 2.0);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        assert_eq!(&c.data()[..12], &[1., 1., 1., 1., 2., 2., 2., 2., 2., 2., 2., 2.]);
    }
}
