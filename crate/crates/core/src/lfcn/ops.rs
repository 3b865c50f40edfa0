//! Layer primitives with hand-written backward passes.

use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output index `o` at kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < limit)
    }
}

fn im2col<T: Scalar>(input: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ki, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kj, g.width) {
                            dst[oy * g.out_w + ox] = plane[iy * g.width + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ki, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kj, g.width) {
                            plane[iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Geometry, usize)> {
    let (c, h, w) = input.dims3()?;
    let (o, ci, kh, kw) = kernel.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "kernel expects {ci} input channels, input has {c}"
        )));
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad,
        out_h: conv_out(h, kh, stride, pad)?,
        out_w: conv_out(w, kw, stride, pad)?,
    };
    Ok((g, o))
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != out => Err(Error::Shape(format!(
            "bias has {} entries for {out} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Cross-correlation of a `(C, H, W)` input with an `(O, C, kh, kw)` kernel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, o) = conv_geometry(input, kernel, stride, pad)?;
    check_bias(bias, o)?;
    let n = g.cols();
    let mut out = vec![T::zero(); o * n];
    if let Some(b) = bias {
        for (oc, row) in out.chunks_mut(n).enumerate() {
            row.fill(b.data()[oc]);
        }
    }
    let k = g.rows();
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        T::gemm(
            o,
            k,
            n,
            T::one(),
            kernel.data(),
            k,
            1,
            input.data(),
            n,
            1,
            T::one(),
            &mut out,
            n,
            1,
        );
    } else {
        let cols = im2col(input.data(), &g);
        T::gemm(
            o,
            k,
            n,
            T::one(),
            kernel.data(),
            k,
            1,
            &cols,
            n,
            1,
            T::one(),
            &mut out,
            n,
            1,
        );
    }
    Tensor::from_vec(&[o, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (g, o) = conv_geometry(input, kernel, stride, pad)?;
    if grad_out.shape() != [o, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            grad_out.shape(),
            [o, g.out_h, g.out_w]
        )));
    }
    let (k, n) = (g.rows(), g.cols());
    let gy = grad_out.data();
    let bias: Vec<T> = gy.chunks(n).map(|r| r.iter().fold(T::zero(), |a, &b| a + b)).collect();

    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let owned;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    // dK = dY · colsᵀ
    let mut dk = vec![T::zero(); o * k];
    T::gemm(o, n, k, T::one(), gy, n, 1, cols, 1, n, T::zero(), &mut dk, k, 1);
    // dcols = Kᵀ · dY
    let mut dcols = vec![T::zero(); k * n];
    T::gemm(
        k,
        o,
        n,
        T::one(),
        kernel.data(),
        1,
        k,
        gy,
        n,
        1,
        T::zero(),
        &mut dcols,
        n,
        1,
    );
    let dx = if pointwise { dcols } else { col2im(&dcols, &g) };
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        kernel: Tensor::from_vec(kernel.shape(), dk)?,
        bias: Tensor::from_vec(&[o], bias)?,
    })
}

fn transpose_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Geometry, usize)> {
    let (c, h, w) = input.dims3()?;
    let (ci, o, kh, kw) = kernel.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "transposed kernel expects {ci} input channels, input has {c}"
        )));
    }
    let grow = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
    let (Some(oh), Some(ow)) = (grow(h, kh), grow(w, kw)) else {
        return Err(Error::Shape("padding exceeds transposed output".into()));
    };
    // Geometry of the forward convolution that maps the output back onto the input.
    let g = Geometry {
        channels: o,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: w,
    };
    Ok((g, c))
}

/// Transposed convolution (fractionally strided), kernel laid out `(C_in, C_out, kh, kw)`.
/// Output spatial size is `(n - 1) * stride + k - 2 * pad`.
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, c) = transpose_geometry(input, kernel, stride, pad)?;
    let (k, n) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); k * n];
    T::gemm(
        k,
        c,
        n,
        T::one(),
        kernel.data(),
        1,
        k,
        input.data(),
        n,
        1,
        T::zero(),
        &mut cols,
        n,
        1,
    );
    Tensor::from_vec(&[g.channels, g.height, g.width], col2im(&cols, &g))
}

/// Returns `(grad_input, grad_kernel)` for [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (g, c) = transpose_geometry(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.channels, g.height, g.width] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match transposed output",
            grad_out.shape()
        )));
    }
    let (k, n) = (g.rows(), g.cols());
    let gcols = im2col(grad_out.data(), &g);
    let mut dx = vec![T::zero(); c * n];
    T::gemm(
        c,
        k,
        n,
        T::one(),
        kernel.data(),
        k,
        1,
        &gcols,
        n,
        1,
        T::zero(),
        &mut dx,
        n,
        1,
    );
    let mut dk = vec![T::zero(); c * k];
    T::gemm(
        c,
        n,
        k,
        T::one(),
        input.data(),
        n,
        1,
        &gcols,
        1,
        n,
        T::zero(),
        &mut dk,
        k,
        1,
    );
    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(kernel.shape(), dk)?,
    ))
}

/// Kernel size, stride and padding of the `factor`× upsampling layer.
pub fn upsample_geometry(factor: usize) -> Result<(usize, usize, usize)> {
    match factor {
        2 | 4 | 8 => Ok((2 * factor - factor % 2, factor, factor / 2)),
        _ => Err(Error::InvalidArgument(format!(
            "upsampling factor must be 2, 4 or 8, got {factor}"
        ))),
    }
}

/// Bilinear interpolation weights as a `(channels, channels, k, k)` transposed
/// convolution kernel, channel-diagonal.
pub fn bilinear_kernel<T: Scalar>(channels: usize, factor: usize) -> Result<Tensor<T>> {
    let (k, _, _) = upsample_geometry(factor)?;
    let f = factor as f64;
    let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / f;
    let mut t = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        for i in 0..k {
            for j in 0..k {
                t.data_mut()[((c * channels + c) * k + i) * k + j] = T::from_f64_lossy(tap(i) * tap(j));
            }
        }
    }
    Ok(t)
}

/// Upsamples every channel by `factor` with a freshly initialised bilinear kernel.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, _, _) = input.dims3()?;
    let (_, stride, pad) = upsample_geometry(factor)?;
    conv_transpose2d_forward(input, &bilinear_kernel(c, factor)?, stride, pad)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// 2×2 max pooling, stride 2. `argmax` records the flat input index that won
/// each window; ties go to the first element in row-major order.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even dimensions, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(&[c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape("pooling gradient shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy and its gradient with respect to `prob`.
pub fn bce_loss<T: Scalar>(prob: &Tensor<T>, label: &BinaryMask) -> Result<(T, Tensor<T>)> {
    let (c, h, w) = prob.dims3()?;
    if c != 1 || (w, h) != label.dims() {
        return Err(Error::DimensionMismatch {
            expected: label.dims(),
            actual: (w, h),
        });
    }
    let eps = T::from_f64_lossy(BCE_EPS);
    let hi = T::one() - eps;
    let n = T::from_usize_lossy(prob.len());
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &y) in prob.data().iter().zip(label.bits()) {
        let pc = p.max(eps).min(hi);
        let inside = p > eps && p < hi;
        if y {
            loss -= pc.ln();
            grad.push(if inside { -T::one() / (pc * n) } else { T::zero() });
        } else {
            loss -= (T::one() - pc).ln();
            grad.push(if inside {
                T::one() / ((T::one() - pc) * n)
            } else {
                T::zero()
            });
        }
    }
    Ok((loss / n, Tensor::from_vec(prob.shape(), grad)?))
}
