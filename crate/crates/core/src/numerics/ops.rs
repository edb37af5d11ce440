//! Forward and reverse-mode kernels for the layers the RT network needs.
//!
//! Every op works on a leading batch axis. Backward functions take the
//! forward inputs (and, for activations, the forward output) together with
//! the upstream gradient and return gradients for each differentiable input.

use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// (before, after) padding for one axis with stride 1.
    fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = kernel - 1;
                (total / 2, total - total / 2)
            }
        }
    }

    fn out_extent(self, input: usize, kernel: usize) -> usize {
        match self {
            Padding::Same => input,
            Padding::Valid => input + 1 - kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Scalar>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    if act == Activation::Identity {
        return x.clone();
    }
    x.map(|v| act.apply(v))
}

/// Gradient through an activation given its forward output.
pub fn activate_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    act: Activation,
) -> Tensor<T> {
    if act == Activation::Identity {
        return grad_out.clone();
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * act.derivative_from_output(y))
        .collect();
    Tensor::from_vec(output.shape(), data).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(
        op: &'static str,
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (pt, pb) = padding.amounts(kh);
        let (pl, pr) = padding.amounts(kw);
        if kh == 0 || kw == 0 || kh > h + pt + pb || kw > w + pl + pr {
            return Err(Error::shape(
                op,
                format!("kernel ({kh},{kw}) exceeds padded input ({h},{w})"),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            pad_top: pt,
            pad_left: pl,
            out_h: padding.out_extent(h, kh),
            out_w: padding.out_extent(w, kw),
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output x-range for kernel column `b`: input x = ox + b - pad_left.
    #[inline]
    fn x_range(&self, b: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(b);
        let hi = (self.w + self.pad_left).saturating_sub(b).min(self.out_w);
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let ncols = self.col_cols();
        cols.fill(T::zero());
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (x0, x1) = self.x_range(b);
                    for oy in 0..self.out_h {
                        let iy = oy + a;
                        if iy < self.pad_top || iy - self.pad_top >= self.h {
                            continue;
                        }
                        let src_row = &plane[(iy - self.pad_top) * self.w..];
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in x0..x1 {
                            d[ox] = src_row[ox + b - self.pad_left];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let ncols = self.col_cols();
        for ci in 0..self.c_in {
            let plane = &mut grad_input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (x0, x1) = self.x_range(b);
                    for oy in 0..self.out_h {
                        let iy = oy + a;
                        if iy < self.pad_top || iy - self.pad_top >= self.h {
                            continue;
                        }
                        let base = (iy - self.pad_top) * self.w;
                        let s = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in x0..x1 {
                            plane[base + ox + b - self.pad_left] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::shape(op, format!("bias {:?} != [{n}]", b.shape())));
        }
    }
    Ok(())
}

fn conv2d_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, c_in, h, w) = input.dims4("conv2d")?;
    let (c_out, k_in, kh, kw) = kernel.dims4("conv2d")?;
    if k_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, kernel expects {k_in}"),
        ));
    }
    Ok((n, c_out, ConvGeometry::new("conv2d", c_in, h, w, kh, kw, padding)?))
}

/// Stride-1 cross-correlation. `input` is `[N, C_in, H, W]`, `kernel` is
/// `[C_out, C_in, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, c_out, g) = conv2d_geometry(input, kernel, padding)?;
    check_bias("conv2d", bias, c_out)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[n, c_out, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    for i in 0..n {
        let x = input.slice_outer(i);
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        let y = out.slice_outer_mut(i);
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(ncols).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            c_out,
            rows,
            ncols,
            T::one(),
            kernel.data(),
            (rows as isize, 1),
            src,
            (ncols as isize, 1),
            beta,
            y,
            (ncols as isize, 1),
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c_out, g) = conv2d_geometry(input, kernel, padding)?;
    if grad_out.shape() != [n, c_out, g.out_h, g.out_w] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[c_out]);
    let mut d_input = Tensor::zeros(input.shape());
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut d_cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    for i in 0..n {
        let dy = grad_out.slice_outer(i);
        for (co, chunk) in dy.chunks(ncols).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        let x = input.slice_outer(i);
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        // dK += dY · colsᵀ
        T::gemm(
            c_out,
            ncols,
            rows,
            T::one(),
            dy,
            (ncols as isize, 1),
            src,
            (1, ncols as isize),
            T::one(),
            d_kernel.data_mut(),
            (rows as isize, 1),
        );
        // dcols = Kᵀ · dY
        if g.is_pointwise() {
            T::gemm(
                rows,
                c_out,
                ncols,
                T::one(),
                kernel.data(),
                (1, rows as isize),
                dy,
                (ncols as isize, 1),
                T::zero(),
                d_input.slice_outer_mut(i),
                (ncols as isize, 1),
            );
        } else {
            T::gemm(
                rows,
                c_out,
                ncols,
                T::one(),
                kernel.data(),
                (1, rows as isize),
                dy,
                (ncols as isize, 1),
                T::zero(),
                &mut d_cols,
                (ncols as isize, 1),
            );
            g.col2im(&d_cols, d_input.slice_outer_mut(i));
        }
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

fn depthwise_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<(usize, ConvGeometry)> {
    let (n, c, h, w) = input.dims4("depthwise_conv2d")?;
    let (kc, kh, kw) = match kernel.shape()[..] {
        [kc, kh, kw] => (kc, kh, kw),
        _ => {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel must be [C, kh, kw], got {:?}", kernel.shape()),
            ))
        }
    };
    if kc != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input has {c} channels, kernel has {kc}"),
        ));
    }
    Ok((n, ConvGeometry::new("depthwise_conv2d", c, h, w, kh, kw, padding)?))
}

/// Channel-wise convolution with depth multiplier 1, followed by `act`.
/// `kernel` is `[C, kh, kw]`.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    act: Activation,
) -> Result<Tensor<T>> {
    let (n, g) = depthwise_geometry(input, kernel, padding)?;
    check_bias("depthwise_conv2d", bias, g.c_in)?;
    let c = g.c_in;
    let mut out = Tensor::zeros(&[n, c, g.out_h, g.out_w]);
    let (in_plane, out_plane, k_plane) = (g.h * g.w, g.out_h * g.out_w, g.kh * g.kw);
    let kd = kernel.data();
    for i in 0..n {
        let x = input.slice_outer(i);
        let y = out.slice_outer_mut(i);
        for ch in 0..c {
            let xp = &x[ch * in_plane..(ch + 1) * in_plane];
            let yp = &mut y[ch * out_plane..(ch + 1) * out_plane];
            let kp = &kd[ch * k_plane..(ch + 1) * k_plane];
            if let Some(b) = bias {
                yp.fill(b.data()[ch]);
            }
            for oy in 0..g.out_h {
                let yrow = &mut yp[oy * g.out_w..(oy + 1) * g.out_w];
                for a in 0..g.kh {
                    let iy = oy + a;
                    if iy < g.pad_top || iy - g.pad_top >= g.h {
                        continue;
                    }
                    let xrow = &xp[(iy - g.pad_top) * g.w..(iy - g.pad_top + 1) * g.w];
                    for b in 0..g.kw {
                        let kv = kp[a * g.kw + b];
                        let (x0, x1) = g.x_range(b);
                        let off = b as isize - g.pad_left as isize;
                        let xs = &xrow[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                        for (yv, &xv) in yrow[x0..x1].iter_mut().zip(xs) {
                            *yv += kv * xv;
                        }
                    }
                }
            }
            if act != Activation::Identity {
                yp.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
    }
    Ok(out)
}

/// Backward of [`depthwise_conv2d`]; `output` is the forward result
/// (needed for the activation derivative).
pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    act: Activation,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, g) = depthwise_geometry(input, kernel, padding)?;
    let c = g.c_in;
    if grad_out.shape() != [n, c, g.out_h, g.out_w] || output.shape() != grad_out.shape() {
        return Err(Error::shape(
            "depthwise_conv2d_backward",
            format!("grad {:?}", grad_out.shape()),
        ));
    }
    let pre_grad = activate_backward(output, grad_out, act);
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[c]);
    let mut d_input = Tensor::zeros(input.shape());
    let (in_plane, out_plane, k_plane) = (g.h * g.w, g.out_h * g.out_w, g.kh * g.kw);
    let kd = kernel.data();
    for i in 0..n {
        let x = input.slice_outer(i);
        let dy = pre_grad.slice_outer(i);
        let dx = d_input.slice_outer_mut(i);
        for ch in 0..c {
            let xp = &x[ch * in_plane..(ch + 1) * in_plane];
            let dxp = &mut dx[ch * in_plane..(ch + 1) * in_plane];
            let dyp = &dy[ch * out_plane..(ch + 1) * out_plane];
            let kp = &kd[ch * k_plane..(ch + 1) * k_plane];
            d_bias.data_mut()[ch] += dyp.iter().copied().sum::<T>();
            let dk = &mut d_kernel.data_mut()[ch * k_plane..(ch + 1) * k_plane];
            for oy in 0..g.out_h {
                let dyrow = &dyp[oy * g.out_w..(oy + 1) * g.out_w];
                for a in 0..g.kh {
                    let iy = oy + a;
                    if iy < g.pad_top || iy - g.pad_top >= g.h {
                        continue;
                    }
                    let row0 = (iy - g.pad_top) * g.w;
                    for b in 0..g.kw {
                        let kv = kp[a * g.kw + b];
                        let (x0, x1) = g.x_range(b);
                        let s0 = (row0 as isize + x0 as isize + b as isize - g.pad_left as isize)
                            as usize;
                        let len = x1 - x0;
                        let mut acc = T::zero();
                        for (&d, &xv) in dyrow[x0..x1].iter().zip(&xp[s0..s0 + len]) {
                            acc += d * xv;
                        }
                        dk[a * g.kw + b] += acc;
                        for (dxv, &d) in dxp[s0..s0 + len].iter_mut().zip(&dyrow[x0..x1]) {
                            *dxv += kv * d;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

#[derive(Clone, Debug)]
pub struct SeparableGrads<T> {
    pub input: Tensor<T>,
    pub depth_kernel: Tensor<T>,
    pub point_kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Depthwise stage (no bias, no activation) followed by a 1x1 convolution
/// with bias and `act`.
pub fn separable_conv2d<T: Scalar>(
    input: &Tensor<T>,
    depth_kernel: &Tensor<T>,
    point_kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    act: Activation,
) -> Result<Tensor<T>> {
    let (.., kh, kw) = point_kernel.dims4("separable_conv2d")?;
    if (kh, kw) != (1, 1) {
        return Err(Error::shape("separable_conv2d", "pointwise kernel must be 1x1"));
    }
    let mid = depthwise_conv2d(input, depth_kernel, None, padding, Activation::Identity)?;
    let pre = conv2d(&mid, point_kernel, bias, Padding::Valid)?;
    Ok(activate(&pre, act))
}

pub fn separable_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    depth_kernel: &Tensor<T>,
    point_kernel: &Tensor<T>,
    padding: Padding,
    act: Activation,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<SeparableGrads<T>> {
    let mid = depthwise_conv2d(input, depth_kernel, None, padding, Activation::Identity)?;
    let pre_grad = activate_backward(output, grad_out, act);
    let point = conv2d_backward(&mid, point_kernel, Padding::Valid, &pre_grad)?;
    let depth = depthwise_conv2d_backward(
        input,
        depth_kernel,
        padding,
        Activation::Identity,
        &mid,
        &point.input,
    )?;
    Ok(SeparableGrads {
        input: depth.input,
        depth_kernel: depth.kernel,
        point_kernel: point.kernel,
        bias: point.bias,
    })
}

/// 2x2 average pooling, stride 2, same padding. Windows hanging over the
/// bottom/right edge average only their in-bounds cells.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avgpool2d")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in input
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow))
    {
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let count = ys.len() * xs.len();
                let mut acc = T::zero();
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += src[y * w + x];
                    }
                }
                dst[oy * ow + ox] = acc / lit::<T>(count as f64);
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match input_shape[..] {
        [_, _, h, w] => (h, w),
        _ => return Err(Error::shape("avgpool2d_backward", format!("{input_shape:?}"))),
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut d_input = Tensor::zeros(input_shape);
    if grad_out.len() != d_input.len() / (h * w) * (oh * ow) {
        return Err(Error::shape("avgpool2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    for (dst, src) in d_input
        .data_mut()
        .chunks_mut(h * w)
        .zip(grad_out.data().chunks(oh * ow))
    {
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let share = src[oy * ow + ox] / lit::<T>((ys.len() * xs.len()) as f64);
                for y in ys.clone() {
                    for x in xs.clone() {
                        dst[y * w + x] += share;
                    }
                }
            }
        }
    }
    Ok(d_input)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (batch, n) = input.dims2("linear")?;
    let (m, wn) = weight.dims2("linear")?;
    if wn != n {
        return Err(Error::shape(
            "linear",
            format!("input extent {n} does not match weight [{m}, {wn}]"),
        ));
    }
    Ok((batch, n, m))
}

/// Affine map `[B, n] -> [B, m]` with weights `[m, n]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, n, m) = linear_dims(input, weight)?;
    check_bias("linear", Some(bias), m)?;
    let mut out = Tensor::zeros(&[batch, m]);
    for row in out.data_mut().chunks_mut(m) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        batch,
        n,
        m,
        T::one(),
        input.data(),
        (n as isize, 1),
        weight.data(),
        (1, n as isize),
        T::one(),
        out.data_mut(),
        (m as isize, 1),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, n, m) = linear_dims(input, weight)?;
    if grad_out.shape() != [batch, m] {
        return Err(Error::shape("linear_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut d_input = Tensor::zeros(&[batch, n]);
    T::gemm(
        batch,
        m,
        n,
        T::one(),
        grad_out.data(),
        (m as isize, 1),
        weight.data(),
        (n as isize, 1),
        T::zero(),
        d_input.data_mut(),
        (n as isize, 1),
    );
    let mut d_weight = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        batch,
        n,
        T::one(),
        grad_out.data(),
        (1, m as isize),
        input.data(),
        (n as isize, 1),
        T::zero(),
        d_weight.data_mut(),
        (n as isize, 1),
    );
    let mut d_bias = Tensor::zeros(&[m]);
    for row in grad_out.data().chunks(m) {
        for (d, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// Values and gradients retained from one conv-LSTM step.
#[derive(Clone, Debug)]
pub struct ConvLstmCache<T> {
    /// `[x; h]` stacked on the channel axis.
    stacked: Tensor<T>,
    /// Activated gates, `[N, 4*Ch, H, W]` in (input, forget, output, candidate) order.
    gates: Tensor<T>,
    c_prev: Tensor<T>,
    tanh_c: Tensor<T>,
    x_channels: usize,
}

#[derive(Clone, Debug)]
pub struct ConvLstmGrads<T> {
    pub x: Tensor<T>,
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

fn stack_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("conv_lstm_step")?;
    let (nb, cb, hb, wb) = b.dims4("conv_lstm_step")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "conv_lstm_step",
            format!("x {:?} and h {:?} planes differ", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.slice_outer(i));
        data.extend_from_slice(b.slice_outer(i));
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// One conv-LSTM step with same-padded gate convolutions over `[x; h]`.
///
/// `kernel` is `[4*Ch, Cx+Ch, kh, kw]`, `bias` is `[4*Ch]`. Gates are laid out
/// as input, forget, output (logistic) and candidate (tanh).
pub fn conv_lstm_step<T: Scalar>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, ConvLstmCache<T>)> {
    let (n, cx, hh, ww) = x.dims4("conv_lstm_step")?;
    let (_, ch, ..) = h.dims4("conv_lstm_step")?;
    if c.shape() != h.shape() {
        return Err(Error::shape(
            "conv_lstm_step",
            format!("cell {:?} != hidden {:?}", c.shape(), h.shape()),
        ));
    }
    let (k_out, ..) = kernel.dims4("conv_lstm_step")?;
    if k_out != 4 * ch {
        return Err(Error::shape(
            "conv_lstm_step",
            format!("kernel produces {k_out} gate channels, need {}", 4 * ch),
        ));
    }
    let stacked = stack_channels(x, h)?;
    let mut gates = conv2d(&stacked, kernel, Some(bias), Padding::Same)?;
    let plane = hh * ww;
    let mut h_next = Tensor::zeros(h.shape());
    let mut c_next = Tensor::zeros(h.shape());
    let mut tanh_c = Tensor::zeros(h.shape());
    for i in 0..n {
        let g = gates.slice_outer_mut(i);
        let (ifo, cand) = g.split_at_mut(3 * ch * plane);
        ifo.iter_mut().for_each(|v| *v = sigmoid(*v));
        cand.iter_mut().for_each(|v| *v = v.tanh());
        let cp = c.slice_outer(i);
        let cn = c_next.slice_outer_mut(i);
        let span = ch * plane;
        for j in 0..span {
            cn[j] = ifo[span + j] * cp[j] + ifo[j] * cand[j];
        }
        let tc = tanh_c.slice_outer_mut(i);
        for j in 0..span {
            tc[j] = cn[j].tanh();
        }
        let hn = h_next.slice_outer_mut(i);
        for j in 0..span {
            hn[j] = ifo[2 * span + j] * tc[j];
        }
    }
    let cache = ConvLstmCache {
        stacked,
        gates,
        c_prev: c.clone(),
        tanh_c,
        x_channels: cx,
    };
    Ok((h_next, c_next, cache))
}

pub fn conv_lstm_step_backward<T: Scalar>(
    cache: &ConvLstmCache<T>,
    kernel: &Tensor<T>,
    grad_h: &Tensor<T>,
    grad_c: &Tensor<T>,
) -> Result<ConvLstmGrads<T>> {
    let (n, ch, hh, ww) = cache.c_prev.dims4("conv_lstm_step_backward")?;
    if grad_h.shape() != cache.c_prev.shape() || grad_c.shape() != cache.c_prev.shape() {
        return Err(Error::shape("conv_lstm_step_backward", "gradient shape"));
    }
    let span = ch * hh * ww;
    let mut d_gates = Tensor::zeros(cache.gates.shape());
    let mut d_c_prev = Tensor::zeros(cache.c_prev.shape());
    for i in 0..n {
        let g = cache.gates.slice_outer(i);
        let (gi, rest) = g.split_at(span);
        let (gf, rest) = rest.split_at(span);
        let (go, gg) = rest.split_at(span);
        let tc = cache.tanh_c.slice_outer(i);
        let cp = cache.c_prev.slice_outer(i);
        let dh = grad_h.slice_outer(i);
        let dc_in = grad_c.slice_outer(i);
        let dg = d_gates.slice_outer_mut(i);
        let dcp = d_c_prev.slice_outer_mut(i);
        for j in 0..span {
            let dc = dc_in[j] + dh[j] * go[j] * (T::one() - tc[j] * tc[j]);
            let d_o = dh[j] * tc[j];
            let d_i = dc * gg[j];
            let d_f = dc * cp[j];
            let d_g = dc * gi[j];
            dcp[j] = dc * gf[j];
            dg[j] = d_i * gi[j] * (T::one() - gi[j]);
            dg[span + j] = d_f * gf[j] * (T::one() - gf[j]);
            dg[2 * span + j] = d_o * go[j] * (T::one() - go[j]);
            dg[3 * span + j] = d_g * (T::one() - gg[j] * gg[j]);
        }
    }
    let conv = conv2d_backward(&cache.stacked, kernel, Padding::Same, &d_gates)?;
    let cx = cache.x_channels;
    let mut dx = Tensor::zeros(&[n, cx, hh, ww]);
    let mut dh_prev = Tensor::zeros(&[n, ch, hh, ww]);
    for i in 0..n {
        let s = conv.input.slice_outer(i);
        dx.slice_outer_mut(i).copy_from_slice(&s[..cx * hh * ww]);
        dh_prev.slice_outer_mut(i).copy_from_slice(&s[cx * hh * ww..]);
    }
    Ok(ConvLstmGrads {
        x: dx,
        h: dh_prev,
        c: d_c_prev,
        kernel: conv.kernel,
        bias: conv.bias,
    })
}

/// Gradients of [`temporal_spatial_conv`].
#[derive(Clone, Debug)]
pub struct TemporalSpatialGrads<T> {
    pub temporal: Tensor<T>,
    pub temporal_bias: Tensor<T>,
    pub spatial: Tensor<T>,
    pub spatial_bias: Tensor<T>,
}

struct TemporalSpatialDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kw: usize,
    pad_left: usize,
}

fn temporal_spatial_dims<T: Scalar>(
    input: &Tensor<T>,
    temporal: &Tensor<T>,
    spatial: &Tensor<T>,
) -> Result<TemporalSpatialDims> {
    const OP: &str = "temporal_spatial_conv";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (c, tin, th, kw) = temporal.dims4(OP)?;
    if cin != 1 || tin != 1 || th != 1 {
        return Err(Error::shape(OP, "expects one input channel and (1, kw) temporal kernels"));
    }
    if spatial.shape() != [c, h, 1] {
        return Err(Error::shape(
            OP,
            format!("spatial kernel {:?} must be [{c}, {h}, 1]", spatial.shape()),
        ));
    }
    if kw > w + kw - 1 {
        return Err(Error::shape(OP, "temporal kernel exceeds padded width"));
    }
    Ok(TemporalSpatialDims {
        n,
        c,
        h,
        w,
        kw,
        pad_left: (kw - 1) / 2,
    })
}

/// `act(depthwise_valid(conv2d_same(x, temporal) , spatial))` for a
/// single-channel input, where the depthwise kernel spans the full height.
///
/// Both stages are linear, so electrodes are mixed first (`C x H` by
/// `H x W` product) and the `(1, kw)` filter then runs on one row per
/// channel. Output is `[N, C, 1, W]`.
pub fn temporal_spatial_conv<T: Scalar>(
    input: &Tensor<T>,
    temporal: &Tensor<T>,
    temporal_bias: &Tensor<T>,
    spatial: &Tensor<T>,
    spatial_bias: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    let d = temporal_spatial_dims(input, temporal, spatial)?;
    check_bias("temporal_spatial_conv", Some(temporal_bias), d.c)?;
    check_bias("temporal_spatial_conv", Some(spatial_bias), d.c)?;
    let mut out = Tensor::zeros(&[d.n, d.c, 1, d.w]);
    let mut mixed = vec![T::zero(); d.c * d.w];
    let offsets = temporal_spatial_offsets(temporal_bias, spatial, spatial_bias, d.c, d.h);
    for i in 0..d.n {
        mix_electrodes(&d, spatial, input.slice_outer(i), &mut mixed);
        let y = out.slice_outer_mut(i);
        for ch in 0..d.c {
            let yrow = &mut y[ch * d.w..(ch + 1) * d.w];
            yrow.fill(offsets[ch]);
            let zrow = &mixed[ch * d.w..(ch + 1) * d.w];
            let krow = &temporal.data()[ch * d.kw..(ch + 1) * d.kw];
            for (j, &kv) in krow.iter().enumerate() {
                let lo = d.pad_left.saturating_sub(j);
                let hi = (d.w + d.pad_left).saturating_sub(j).min(d.w);
                if lo >= hi {
                    continue;
                }
                let zs = &zrow[lo + j - d.pad_left..hi + j - d.pad_left];
                for (yv, &zv) in yrow[lo..hi].iter_mut().zip(zs) {
                    *yv += kv * zv;
                }
            }
            if act != Activation::Identity {
                yrow.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
    }
    Ok(out)
}

/// Per-channel constant: temporal bias pushed through the spatial filter.
fn temporal_spatial_offsets<T: Scalar>(
    temporal_bias: &Tensor<T>,
    spatial: &Tensor<T>,
    spatial_bias: &Tensor<T>,
    c: usize,
    h: usize,
) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let s: T = spatial.data()[ch * h..(ch + 1) * h].iter().copied().sum();
            temporal_bias.data()[ch] * s + spatial_bias.data()[ch]
        })
        .collect()
}

fn mix_electrodes<T: Scalar>(d: &TemporalSpatialDims, spatial: &Tensor<T>, x: &[T], mixed: &mut [T]) {
    T::gemm(
        d.c,
        d.h,
        d.w,
        T::one(),
        spatial.data(),
        (d.h as isize, 1),
        x,
        (d.w as isize, 1),
        T::zero(),
        mixed,
        (d.w as isize, 1),
    );
}

/// Parameter gradients of [`temporal_spatial_conv`]; the input is data and
/// receives none.
#[allow(clippy::too_many_arguments)]
pub fn temporal_spatial_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    temporal: &Tensor<T>,
    temporal_bias: &Tensor<T>,
    spatial: &Tensor<T>,
    act: Activation,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<TemporalSpatialGrads<T>> {
    let d = temporal_spatial_dims(input, temporal, spatial)?;
    if grad_out.shape() != [d.n, d.c, 1, d.w] || output.shape() != grad_out.shape() {
        return Err(Error::shape(
            "temporal_spatial_conv_backward",
            format!("grad {:?}", grad_out.shape()),
        ));
    }
    let pre_grad = activate_backward(output, grad_out, act);
    let mut d_temporal = Tensor::zeros(temporal.shape());
    let mut d_spatial = Tensor::zeros(spatial.shape());
    let mut d_tb = Tensor::zeros(&[d.c]);
    let mut d_sb = Tensor::zeros(&[d.c]);
    let mut mixed = vec![T::zero(); d.c * d.w];
    let mut d_mixed = vec![T::zero(); d.c * d.w];
    let mut row_sums = vec![T::zero(); d.c];
    for i in 0..d.n {
        let x = input.slice_outer(i);
        mix_electrodes(&d, spatial, x, &mut mixed);
        d_mixed.fill(T::zero());
        let dy = pre_grad.slice_outer(i);
        for ch in 0..d.c {
            let dyrow = &dy[ch * d.w..(ch + 1) * d.w];
            row_sums[ch] += dyrow.iter().copied().sum::<T>();
            let zrow = &mixed[ch * d.w..(ch + 1) * d.w];
            let dzrow = &mut d_mixed[ch * d.w..(ch + 1) * d.w];
            let krow = &temporal.data()[ch * d.kw..(ch + 1) * d.kw];
            let dk = &mut d_temporal.data_mut()[ch * d.kw..(ch + 1) * d.kw];
            for (j, &kv) in krow.iter().enumerate() {
                let lo = d.pad_left.saturating_sub(j);
                let hi = (d.w + d.pad_left).saturating_sub(j).min(d.w);
                if lo >= hi {
                    continue;
                }
                let (s0, s1) = (lo + j - d.pad_left, hi + j - d.pad_left);
                let mut acc = T::zero();
                for (&g, &z) in dyrow[lo..hi].iter().zip(&zrow[s0..s1]) {
                    acc += g * z;
                }
                dk[j] += acc;
                for (dz, &g) in dzrow[s0..s1].iter_mut().zip(&dyrow[lo..hi]) {
                    *dz += kv * g;
                }
            }
        }
        // d spatial += dZ · Xᵀ
        T::gemm(
            d.c,
            d.w,
            d.h,
            T::one(),
            &d_mixed,
            (d.w as isize, 1),
            x,
            (1, d.w as isize),
            T::one(),
            d_spatial.data_mut(),
            (d.h as isize, 1),
        );
    }
    for ch in 0..d.c {
        let s: T = spatial.data()[ch * d.h..(ch + 1) * d.h].iter().copied().sum();
        let tb = temporal_bias.data()[ch];
        d_tb.data_mut()[ch] = s * row_sums[ch];
        d_sb.data_mut()[ch] = row_sums[ch];
        for v in &mut d_spatial.data_mut()[ch * d.h..(ch + 1) * d.h] {
            *v += tb * row_sums[ch];
        }
    }
    Ok(TemporalSpatialGrads {
        temporal: d_temporal,
        temporal_bias: d_tb,
        spatial: d_spatial,
        spatial_bias: d_sb,
    })
}

/// Mean of squared differences, with its gradient with respect to
/// `prediction`. The target is a constant.
pub fn squared_error_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "squared_error_loss",
            format!("{:?} vs {:?}", prediction.shape(), target.shape()),
        ));
    }
    if prediction.is_empty() {
        return Err(Error::shape("squared_error_loss", "empty input"));
    }
    let n = lit::<T>(prediction.len() as f64);
    let mut loss = T::zero();
    let grad = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            lit::<T>(2.0) * d / n
        })
        .collect();
    Ok((loss / n, Tensor::from_vec(prediction.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_same_keeps_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[1, 1, 30, 128], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[32, 1, 1, 64], 0.1, &mut rng);
        let y = conv2d(&x, &k, None, Padding::Same).unwrap();
        assert_eq!(y.shape(), [1, 32, 30, 128]);
    }

    #[test]
    fn conv2d_valid_extent_and_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[2, 1, 5, 7], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[3, 1, 2, 3], 1.0, &mut rng);
        assert_eq!(conv2d(&x, &k, None, Padding::Valid).unwrap().shape(), [2, 3, 4, 5]);
        let id = t(&[1, 1, 1, 1], vec![1.0]);
        assert_eq!(conv2d(&x, &id, None, Padding::Same).unwrap(), x);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &k, None, Padding::Same), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 2, 3, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[2, 2, 2, 4], 1.0, &mut rng);
        let y = conv2d(&x, &k, None, Padding::Same).unwrap();
        // same padding: top 0 / bottom 1, left 1 / right 2
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..6 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for a in 0..2 {
                            for b in 0..4 {
                                let iy = oy as isize + a as isize;
                                let ix = ox as isize + b as isize - 1;
                                if (0..3).contains(&iy) && (0..6).contains(&ix) {
                                    acc += k.data()[((co * 2 + ci) * 2 + a) * 4 + b]
                                        * x.data()[(ci * 3 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 3 + oy) * 6 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_collapses_electrode_axis() {
        let x = Tensor::<f64>::full(&[1, 32, 30, 128], 0.01);
        let k = Tensor::<f64>::full(&[32, 30, 1], 1.0);
        let pre = depthwise_conv2d(&x, &k, None, Padding::Valid, Activation::Identity).unwrap();
        assert_eq!(pre.shape(), [1, 32, 1, 128]);
        assert!(pre.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let act = depthwise_conv2d(&x, &k, None, Padding::Valid, Activation::Tanh).unwrap();
        assert!((act.data()[0] - 0.3f64.tanh()).abs() < 1e-15);
        let bad = Tensor::<f64>::zeros(&[31, 30, 1]);
        assert!(depthwise_conv2d(&x, &bad, None, Padding::Valid, Activation::Tanh).is_err());
    }

    #[test]
    fn separable_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[1, 32, 1, 64], 1.0, &mut rng);
        let d = Tensor::<f64>::uniform(&[32, 1, 16], 0.2, &mut rng);
        let p = Tensor::<f64>::uniform(&[32, 32, 1, 1], 0.2, &mut rng);
        let y = separable_conv2d(&x, &d, &p, None, Padding::Same, Activation::Tanh).unwrap();
        assert_eq!(y.shape(), [1, 32, 1, 64]);
    }

    #[test]
    fn avgpool_cases() {
        let y = avgpool2d(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), [2.5]);
        let y = avgpool2d(&Tensor::<f64>::full(&[1, 32, 1, 128], 1.7)).unwrap();
        assert_eq!(y.shape(), [1, 32, 1, 64]);
        assert!(y.data().iter().all(|&v| v == 1.7));
        // odd extents: edge windows average in-bounds cells only
        let y = avgpool2d(&t(&[1, 1, 1, 3], vec![1.0, 3.0, 5.0])).unwrap();
        assert_eq!(y.data(), [2.0, 5.0]);
    }

    #[test]
    fn linear_identity_and_extent() {
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let x = t(&[1, 3], vec![0.5, -2.0, 3.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let w = Tensor::<f64>::zeros(&[512, 1024]);
        let y = linear(&Tensor::zeros(&[2, 1024]), &w, &Tensor::zeros(&[512])).unwrap();
        assert_eq!(y.shape(), [2, 512]);
        assert!(linear(&Tensor::zeros(&[1, 5]), &w, &Tensor::zeros(&[512])).is_err());
    }

    #[test]
    fn conv_lstm_zero_state() {
        let z = Tensor::<f64>::zeros(&[1, 32, 1, 32]);
        let k = Tensor::<f64>::zeros(&[128, 64, 1, 8]);
        let (h, c, _) = conv_lstm_step(&z, &z, &z, &k, &Tensor::zeros(&[128])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_lstm_forget_gate_retains_cell() {
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Tensor::<f64>::uniform(&[1, 2, 1, 4], 2.0, &mut rng);
        let mut k = Tensor::<f64>::zeros(&[8, 4, 1, 3]);
        k.fill(0.0);
        let mut b = Tensor::<f64>::zeros(&[8]);
        b.data_mut()[0..2].fill(-10.0); // input gate
        b.data_mut()[2..4].fill(10.0); // forget gate
        let (_, c_next, _) = conv_lstm_step(&z, &z, &c, &k, &b).unwrap();
        for (&cn, &cp) in c_next.data().iter().zip(c.data()) {
            assert!((cn - sigmoid(10.0) * cp).abs() < 1e-12);
            assert!((cn - cp).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_lstm_shape_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 4]);
        let h = Tensor::<f64>::zeros(&[1, 2, 1, 5]);
        let k = Tensor::<f64>::zeros(&[8, 4, 1, 3]);
        assert!(conv_lstm_step(&x, &h, &h, &k, &Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn squared_error_values() {
        let p = t(&[1], vec![0.49]);
        let (l, g) = squared_error_loss(&p, &t(&[1], vec![0.0])).unwrap();
        assert!((l - 0.2401).abs() < 1e-15);
        assert!((g.data()[0] - 0.98).abs() < 1e-15);
        let (l, _) = squared_error_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(squared_error_loss(&p, &t(&[2], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
