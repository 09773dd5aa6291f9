//! The layer primitives used by both networks, each with an explicit backward
//! pass. Convolutions go through im2col and a strided GEMM; the transposed
//! convolution is built from the same two lowering routines in the opposite
//! order, which makes it the exact adjoint of [`conv2d`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Kernel side used throughout both networks.
pub const KERNEL: usize = 4;

/// Stride and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    /// Stride 2, padding 1: with a 4x4 kernel this halves (or, transposed,
    /// doubles) the spatial size exactly.
    fn default() -> Self {
        Conv2dOptions {
            stride: 2,
            padding: 1,
        }
    }
}

/// Whether a layer halves or doubles its input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// One convolutional layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub direction: Direction,
    pub options: Conv2dOptions,
    /// Negative-region slope of the LeakyReLU that follows the layer.
    pub activation_slope: f64,
}

impl ConvSpec {
    pub fn kernel(&self) -> usize {
        KERNEL
    }

    /// Weight tensor shape: `[out, in, k, k]` for downsampling layers and
    /// `[in, out, k, k]` for transposed (upsampling) layers.
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.direction {
            Direction::Down => [self.out_channels, self.in_channels, KERNEL, KERNEL],
            Direction::Up => [self.in_channels, self.out_channels, KERNEL, KERNEL],
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * KERNEL * KERNEL + self.out_channels
    }

    /// Output spatial size for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let op = match self.direction {
            Direction::Down => "conv2d",
            Direction::Up => "conv_transpose2d",
        };
        let g = match self.direction {
            Direction::Down => Geometry::for_conv(op, size, size, KERNEL, self.options)?,
            Direction::Up => Geometry::for_transpose(op, size, size, KERNEL, self.options)?,
        };
        Ok(match self.direction {
            Direction::Down => g.out_h,
            Direction::Up => g.img_h,
        })
    }
}

/// Relationship between the "image" side of a strided convolution (the
/// larger grid) and its "output" side (the grid of kernel positions).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    img_h: usize,
    img_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn for_conv(
        op: &'static str,
        h: usize,
        w: usize,
        k: usize,
        opts: Conv2dOptions,
    ) -> Result<Self> {
        let out = |dim: &'static str, size: usize| -> Result<usize> {
            let padded = size + 2 * opts.padding;
            if opts.stride == 0 || padded < k || !(padded - k).is_multiple_of(opts.stride) {
                return Err(Error::Geometry {
                    op,
                    dim,
                    size,
                    kernel: k,
                    stride: opts.stride,
                    padding: opts.padding,
                });
            }
            Ok((padded - k) / opts.stride + 1)
        };
        Ok(Geometry {
            k,
            stride: opts.stride,
            pad: opts.padding,
            img_h: h,
            img_w: w,
            out_h: out("height", h)?,
            out_w: out("width", w)?,
        })
    }

    fn for_transpose(
        op: &'static str,
        h: usize,
        w: usize,
        k: usize,
        opts: Conv2dOptions,
    ) -> Result<Self> {
        let img = |dim: &'static str, size: usize| -> Result<usize> {
            let full = (size.max(1) - 1) * opts.stride + k;
            if size == 0 || opts.stride == 0 || full <= 2 * opts.padding {
                return Err(Error::Geometry {
                    op,
                    dim,
                    size,
                    kernel: k,
                    stride: opts.stride,
                    padding: opts.padding,
                });
            }
            Ok(full - 2 * opts.padding)
        };
        Ok(Geometry {
            k,
            stride: opts.stride,
            pad: opts.padding,
            img_h: img("height", h)?,
            img_w: img("width", w)?,
            out_h: h,
            out_w: w,
        })
    }

    fn col_rows(&self, channels: usize) -> usize {
        channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Lowers a `[C, img_h, img_w]` plane stack into `[C*k*k, out_h*out_w]`.
    fn im2col<T: Real>(&self, img: &[T], channels: usize, cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        debug_assert_eq!(cols.len(), self.col_rows(channels) * ncols);
        let plane = self.img_h * self.img_w;
        for c in 0..channels {
            let src = &img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.img_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * self.img_w..(iy as usize + 1) * self.img_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.img_w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `[C*k*k, out_h*out_w]` columns back onto the image grid.
    fn col2im<T: Real>(&self, cols: &[T], channels: usize, img: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        let plane = self.img_h * self.img_w;
        for c in 0..channels {
            let dst = &mut img[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.img_h as isize {
                            continue;
                        }
                        let dst_row =
                            &mut dst[iy as usize * self.img_w..(iy as usize + 1) * self.img_w];
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.img_w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Real>(
    op: &'static str,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    in_channels: usize,
    transposed: bool,
) -> Result<(usize, usize)> {
    let [w0, w1, kh, kw] = weight.dims4(op)?;
    let (cin, cout) = if transposed { (w0, w1) } else { (w1, w0) };
    if cin != in_channels {
        return Err(Error::Shape {
            op,
            dim: "input channels",
            expected: cin,
            actual: in_channels,
        });
    }
    if kh != kw {
        return Err(Error::Shape {
            op,
            dim: "kernel width",
            expected: kh,
            actual: kw,
        });
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape {
            op,
            dim: "bias length",
            expected: cout,
            actual: bias.len(),
        });
    }
    Ok((cout, kh))
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(grad_out: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in grad_out.data().chunks_exact(plane).enumerate() {
        let c = i % channels;
        db[c] = db[c] + chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[channels], db).expect("bias length")
}

/// Gradients of a convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Strided cross-correlation over a zero-padded input.
///
/// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4("conv2d")?;
    let (cout, k) = check_weight("conv2d", weight, bias, cin, false)?;
    let g = Geometry::for_conv("conv2d", h, w, k, opts)?;
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = Tensor::zeros(&[n, cout, g.out_h, g.out_w]);
    let in_len = cin * h * w;
    let out_len = cout * ncols;
    for b in 0..n {
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], cin, &mut cols);
        let y = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        gemm(
            Mat::new(weight.data(), cout, rows),
            Mat::new(&cols, rows, ncols),
            T::zero(),
            y,
        );
        add_bias(y, bias.data(), ncols);
    }
    Ok(out)
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    opts: Conv2dOptions,
    want_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [n, cin, h, w] = input.dims4("conv2d_backward")?;
    let [cout, _, k, _] = weight.dims4("conv2d_backward")?;
    let g = Geometry::for_conv("conv2d_backward", h, w, k, opts)?;
    let expected = [n, cout, g.out_h, g.out_w];
    grad_out.check_same_shape("conv2d_backward", &Tensor::zeros(&expected))?;
    let (rows, ncols) = (g.col_rows(cin), g.col_cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = want_input_grad.then(|| Tensor::zeros(input.shape()));
    let in_len = cin * h * w;
    let out_len = cout * ncols;
    for b in 0..n {
        let dy = &grad_out.data()[b * out_len..(b + 1) * out_len];
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], cin, &mut cols);
        gemm(
            Mat::new(dy, cout, ncols),
            Mat::new(&cols, rows, ncols).t(),
            T::one(),
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(weight.data(), cout, rows).t(),
                Mat::new(dy, cout, ncols),
                T::zero(),
                &mut cols,
            );
            g.col2im(&cols, cin, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(grad_out, cout, ncols),
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weights,
/// stride and padding, plus a bias.
///
/// `input` is `[N, Cin, H, W]`, `weight` is `[Cin, Cout, k, k]`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4("conv_transpose2d")?;
    let (cout, k) = check_weight("conv_transpose2d", weight, bias, cin, true)?;
    let g = Geometry::for_transpose("conv_transpose2d", h, w, k, opts)?;
    let (rows, ncols) = (g.col_rows(cout), g.col_cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = Tensor::zeros(&[n, cout, g.img_h, g.img_w]);
    let in_len = cin * ncols;
    let out_len = cout * g.img_h * g.img_w;
    for b in 0..n {
        gemm(
            Mat::new(weight.data(), cin, rows).t(),
            Mat::new(&input.data()[b * in_len..(b + 1) * in_len], cin, ncols),
            T::zero(),
            &mut cols,
        );
        let y = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        g.col2im(&cols, cout, y);
        add_bias(y, bias.data(), g.img_h * g.img_w);
    }
    Ok(out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    opts: Conv2dOptions,
    want_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [n, cin, h, w] = input.dims4("conv_transpose2d_backward")?;
    let [_, cout, k, _] = weight.dims4("conv_transpose2d_backward")?;
    let g = Geometry::for_transpose("conv_transpose2d_backward", h, w, k, opts)?;
    let expected = [n, cout, g.img_h, g.img_w];
    grad_out.check_same_shape("conv_transpose2d_backward", &Tensor::zeros(&expected))?;
    let (rows, ncols) = (g.col_rows(cout), g.col_cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = want_input_grad.then(|| Tensor::zeros(input.shape()));
    let in_len = cin * ncols;
    let out_len = cout * g.img_h * g.img_w;
    for b in 0..n {
        g.im2col(&grad_out.data()[b * out_len..(b + 1) * out_len], cout, &mut cols);
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        gemm(
            Mat::new(x, cin, ncols),
            Mat::new(&cols, rows, ncols).t(),
            T::one(),
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(weight.data(), cin, rows),
                Mat::new(&cols, rows, ncols),
                T::zero(),
                &mut dx.data_mut()[b * in_len..(b + 1) * in_len],
            );
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(grad_out, cout, g.img_h * g.img_w),
    })
}

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    input.map(|v| if v >= T::zero() { v } else { s * v })
}

/// Gradient of [`leaky_relu`]. `activated` may be either the input or the
/// output of the forward pass; both have the same sign for a positive slope.
pub fn leaky_relu_backward<T: Real>(
    activated: &Tensor<T>,
    grad_out: &Tensor<T>,
    slope: f64,
) -> Result<Tensor<T>> {
    activated.check_same_shape("leaky_relu_backward", grad_out)?;
    let s = T::lit(slope);
    let data = activated
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&a, &g)| if a >= T::zero() { g } else { s * g })
        .collect();
    Tensor::from_vec(activated.shape(), data)
}

pub fn tanh<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.tanh())
}

/// Gradient of [`tanh`] in terms of its output.
pub fn tanh_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.check_same_shape("tanh_backward", grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * (T::one() - y * y))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Concatenates along channels: `a` occupies `[0, Ca)`, `b` occupies `[Ca, Ca+Cb)`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4("concat_channels")?;
    let [nb, cb, hb, wb] = b.dims4("concat_channels")?;
    for (dim, x, y) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
        if x != y {
            return Err(Error::Shape {
                op: "concat_channels",
                dim,
                expected: x,
                actual: y,
            });
        }
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: splits at channel `ca`.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, _, _] = t.dims4("split_channels")?;
    Ok((t.slice_channels(0, ca)?, t.slice_channels(ca, c)?))
}

/// Mean absolute difference over all elements, accumulated in `f64`.
pub fn l1_mean<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape("l1_mean", b)?;
    if a.is_empty() {
        return Err(Error::Invalid("l1_mean of empty tensors".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`l1_mean`] with respect to `a`, scaled by `scale`.
/// The derivative of `|u|` at `u = 0` is taken as 0.
pub fn l1_mean_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    a.check_same_shape("l1_mean_grad", b)?;
    let g = T::lit(scale / a.len() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            if x > y {
                g
            } else if x < y {
                -g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution, independent of the im2col path.
    fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, k, _] = w.dims4("t").unwrap();
        let (oh, ow) = (h / 2, wd / 2);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + ci) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_paper_first_layer_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 128, 128]);
        let w = Tensor::<f32>::zeros(&[64, 3, 4, 4]);
        let b = Tensor::<f32>::zeros(&[64]);
        let y = conv2d(&x, &w, &b, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64, 64]);
    }

    #[test]
    fn conv2d_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]);
        let w = random(&[5, 3, 4, 4], &mut rng);
        let y = conv2d(&x, &w, &Tensor::zeros(&[5]), Conv2dOptions::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_ones_counts_valid_taps() {
        // Hand count over the zero-padded 6x6 grid: each 4x4 window at stride 2
        // covers 3 valid rows and 3 valid columns of the 4x4 input.
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let w = random(&[4, 3, 4, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let fast = conv2d(&x, &w, &b, Conv2dOptions::default()).unwrap();
        let slow = conv2d_naive(&x, &w, &b);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 4, 4]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[4]), Conv2dOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                dim: "input channels",
                ..
            }
        ));

        let odd = Tensor::<f32>::zeros(&[1, 3, 7, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 4, 4]);
        let err = conv2d(&odd, &w, &Tensor::zeros(&[4]), Conv2dOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Geometry { dim: "height", .. }));

        let err = conv2d(&x, &w, &Tensor::zeros(&[3]), Conv2dOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "bias length", .. }));
    }

    #[test]
    fn conv_transpose_doubles_and_zero_maps_to_zero() {
        let x = Tensor::<f32>::zeros(&[1, 512, 2, 2]);
        let w = Tensor::<f32>::full(&[512, 512, 4, 4], 0.3);
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[512]), Conv2dOptions::default())
            .unwrap();
        assert_eq!(y.shape(), &[1, 512, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, size) in &[(2, 3, 4), (3, 2, 8)] {
            let w = random(&[cout, cin, 4, 4], &mut rng);
            let x = random(&[1, cin, size, size], &mut rng);
            let y = random(&[1, cout, size / 2, size / 2], &mut rng);
            let zero = Tensor::zeros(&[cout]);
            let lhs = conv2d(&x, &w, &zero, Conv2dOptions::default())
                .unwrap()
                .dot(&y)
                .unwrap();
            let rhs = x
                .dot(&conv_transpose2d(&y, &w, &Tensor::zeros(&[cin]), Conv2dOptions::default()).unwrap())
                .unwrap();
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn transpose_restores_spatial_size() {
        let mut size = 2;
        while size <= 128 {
            let x = Tensor::<f32>::zeros(&[1, 1, size, size]);
            let w = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
            let b = Tensor::<f32>::zeros(&[1]);
            let down = conv2d(&x, &w, &b, Conv2dOptions::default()).unwrap();
            let up = conv_transpose2d(&down, &w, &b, Conv2dOptions::default()).unwrap();
            assert_eq!(up.shape(), x.shape());
            size *= 2;
        }
    }

    #[test]
    fn leaky_relu_examples() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.4, 0.0, 3.0]);
        let one = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(leaky_relu(&one, 0.7).data(), &[1.0]);
        let neg = Tensor::<f64>::from_vec(&[1], vec![-1.0]).unwrap();
        assert_eq!(leaky_relu(&neg, 0.2).data(), &[-0.2]);
    }

    #[test]
    fn concat_then_split_recovers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 3, 4, 4], &mut rng);
        let b = random(&[2, 5, 4, 4], &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 8, 4, 4]);
        let (a2, b2) = split_channels(&c, 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);

        let big = Tensor::<f32>::zeros(&[1, 512, 4, 4]);
        assert_eq!(
            concat_channels(&big, &big).unwrap().shape(),
            &[1, 1024, 4, 4]
        );
        let e = Tensor::<f32>::zeros(&[2, 64, 64, 64]);
        assert_eq!(concat_channels(&e, &e).unwrap().shape(), &[2, 128, 64, 64]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 2, 4, 8]);
        assert!(matches!(
            concat_channels(&a, &b),
            Err(Error::Shape { dim: "width", .. })
        ));
    }

    #[test]
    fn l1_mean_examples() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![0.0, 4.0]).unwrap();
        assert_eq!(l1_mean(&a, &b).unwrap(), 1.5);
        assert_eq!(l1_mean(&a, &a).unwrap(), 0.0);
        let c = 3.0;
        let scaled = l1_mean(&a.scale(c), &b.scale(c)).unwrap();
        assert!((scaled - 4.5).abs() < 1e-12);
        let wrong = Tensor::<f64>::zeros(&[3]);
        assert!(l1_mean(&a, &wrong).is_err());
    }

    #[test]
    fn l1_grad_is_zero_at_ties() {
        let a = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3], vec![0.0, 2.0, 4.0]).unwrap();
        let g = l1_mean_grad(&a, &b, 1.0).unwrap();
        assert_eq!(g.data(), &[1.0 / 3.0, 0.0, -1.0 / 3.0]);
    }
}
