//! Convolution and transposed convolution via im2col lowering.
//!
//! Columns are built batch-wide: a `[C·k·k, B·Ho·Wo]` matrix whose column
//! index is `b·Ho·Wo + oy·Wo + ox` and whose row index is `(c·k + ky)·k + kx`.
//! The naive loops in [`crate::reference`] are the oracle for these kernels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::kaiming_uniform;
use crate::tensor::{gemm_acc, transpose, Tensor};

/// Sliding-window geometry shared by im2col and col2im.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_dims(&self) -> Option<(usize, usize)> {
        let h = self.height + 2 * self.padding;
        let w = self.width + 2 * self.padding;
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// `x: [B, C, H, W]` → columns `[C·k·k, B·Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], batch: usize, g: Window) -> Vec<f64> {
    let (ho, wo) = g.out_dims().expect("validated geometry");
    let hw = ho * wo;
    let n = batch * hw;
    let mut cols = vec![0.0; g.rows() * n];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[b * hw..(b + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[B, C, H, W]`.
pub(crate) fn col2im(cols: &[f64], batch: usize, g: Window) -> Vec<f64> {
    let (ho, wo) = g.out_dims().expect("validated geometry");
    let hw = ho * wo;
    let n = batch * hw;
    let plane = g.height * g.width;
    let mut x = vec![0.0; batch * g.channels * plane];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let dst = &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src = &src_row[b * hw..(b + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, HW]` (flat) → `[C, B·HW]`.
pub(crate) fn batch_major_to_channel_major(x: &[f64], batch: usize, ch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * hw..(b * ch + c + 1) * hw];
            out[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B·HW]` → `[B, C, HW]` (flat).
pub(crate) fn channel_major_to_batch_major(x: &[f64], batch: usize, ch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..ch {
        for b in 0..batch {
            let src = &x[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw];
            out[(b * ch + c) * hw..(b * ch + c + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// 2-d cross-correlation. Weight `[out_ch, in_ch, k, k]`, bias `[out_ch]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    /// Stride 1, no padding; Kaiming-uniform weights, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::with_geometry(in_ch, out_ch, kernel, 1, 0, rng)
    }

    pub fn with_geometry(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wshape = [out_ch, in_ch, kernel, kernel];
        let mut weight = Tensor::zeros(&wshape);
        kaiming_uniform(rng, in_ch * kernel * kernel, weight.data_mut());
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: Tensor::zeros(&[out_ch]),
            weight,
            bias: Tensor::zeros(&[out_ch]),
            cached_input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn window(&self, x: &Tensor) -> Result<(usize, Window, usize, usize)> {
        let (b, c, h, w) = x.dims4("conv2d")?;
        if c != self.in_ch {
            return Err(Error::Dimension(format!(
                "conv2d channel axis: input has {c} channels, layer expects {}",
                self.in_ch
            )));
        }
        let g = Window {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let (ho, wo) = g.out_dims().ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d spatial axes: {h}x{w} input is smaller than the {k}x{k} kernel",
                k = self.kernel
            ))
        })?;
        Ok((b, g, ho, wo))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let probe = Tensor::zeros(&[1, input[1], input[2], input[3]]);
        let (_, _, ho, wo) = self.window(&probe)?;
        Ok(vec![input[0], self.out_ch, ho, wo])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, g, ho, wo) = self.window(x)?;
        let hw = ho * wo;
        let n = b * hw;
        let cols = im2col(x.data(), b, g);
        let mut out = vec![0.0; self.out_ch * n];
        gemm_acc(self.out_ch, g.rows(), n, self.weight.data(), &cols, &mut out);
        for (co, row) in out.chunks_mut(n).enumerate() {
            let bias = self.bias.data()[co];
            row.iter_mut().for_each(|v| *v += bias);
        }
        let out = channel_major_to_batch_major(&out, b, self.out_ch, hw);
        Tensor::from_vec(&[b, self.out_ch, ho, wo], out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    /// Sets `grad_weight`/`grad_bias` for this batch and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::State("conv2d backward called before forward".into()))?;
        let (b, g, ho, wo) = self.window(&x)?;
        if grad_out.shape() != [b, self.out_ch, ho, wo] {
            return Err(Error::Dimension(format!(
                "conv2d backward: grad_out {:?} does not match output [{b}, {}, {ho}, {wo}]",
                grad_out.shape(),
                self.out_ch
            )));
        }
        let hw = ho * wo;
        let n = b * hw;
        let k = g.rows();
        let dmat = batch_major_to_channel_major(grad_out.data(), b, self.out_ch, hw);

        for (co, row) in dmat.chunks(n).enumerate() {
            self.grad_bias.data_mut()[co] = row.iter().sum();
        }

        let cols = im2col(x.data(), b, g);
        let cols_t = transpose(k, n, &cols);
        let gw = self.grad_weight.data_mut();
        gw.fill(0.0);
        gemm_acc(self.out_ch, n, k, &dmat, &cols_t, gw);

        let w_t = transpose(self.out_ch, k, self.weight.data());
        let mut dcols = vec![0.0; k * n];
        gemm_acc(k, self.out_ch, n, &w_t, &dmat, &mut dcols);
        let dx = col2im(&dcols, b, g);
        Tensor::from_vec(x.shape(), dx)
    }
}

/// Transposed convolution (fractionally strided). Weight `[in_ch, out_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let wshape = [in_ch, out_ch, kernel, kernel];
        let mut weight = Tensor::zeros(&wshape);
        // Each output pixel receives about in_ch·k²/stride² contributions.
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        kaiming_uniform(rng, fan_in, weight.data_mut());
        ConvTranspose2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: Tensor::zeros(&[out_ch]),
            weight,
            bias: Tensor::zeros(&[out_ch]),
            cached_input: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, Window)> {
        let (b, c, h, w) = x.dims4("conv_transpose2d")?;
        if c != self.in_ch {
            return Err(Error::Dimension(format!(
                "conv_transpose2d channel axis: input has {c} channels, layer expects {}",
                self.in_ch
            )));
        }
        let ho = (h - 1) * self.stride + self.kernel;
        let wo = (w - 1) * self.stride + self.kernel;
        if ho < 2 * self.padding + 1 || wo < 2 * self.padding + 1 {
            return Err(Error::Dimension("conv_transpose2d: padding exceeds output".into()));
        }
        let g = Window {
            channels: self.out_ch,
            height: ho - 2 * self.padding,
            width: wo - 2 * self.padding,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        debug_assert_eq!(g.out_dims(), Some((h, w)));
        Ok((b, h, w, g))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, g) = self.geometry(x)?;
        let n = b * h * w;
        let k = g.rows();
        let xmat = batch_major_to_channel_major(x.data(), b, self.in_ch, h * w);
        let w_t = transpose(self.in_ch, k, self.weight.data());
        let mut cols = vec![0.0; k * n];
        gemm_acc(k, self.in_ch, n, &w_t, &xmat, &mut cols);
        let mut y = col2im(&cols, b, g);
        let plane = g.height * g.width;
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bias = self.bias.data()[i % self.out_ch];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        Tensor::from_vec(&[b, self.out_ch, g.height, g.width], y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::State("conv_transpose2d backward called before forward".into()))?;
        let (b, h, w, g) = self.geometry(&x)?;
        if grad_out.shape() != [b, self.out_ch, g.height, g.width] {
            return Err(Error::Dimension(format!(
                "conv_transpose2d backward: grad_out {:?} does not match output",
                grad_out.shape()
            )));
        }
        let n = b * h * w;
        let k = g.rows();
        let plane = g.height * g.width;

        let gb = self.grad_bias.data_mut();
        gb.fill(0.0);
        for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
            gb[i % self.out_ch] += chunk.iter().sum::<f64>();
        }

        let dcols = im2col(grad_out.data(), b, g);
        let xmat = batch_major_to_channel_major(x.data(), b, self.in_ch, h * w);
        let dcols_t = transpose(k, n, &dcols);
        let gw = self.grad_weight.data_mut();
        gw.fill(0.0);
        gemm_acc(self.in_ch, n, k, &xmat, &dcols_t, gw);

        let mut dx = vec![0.0; self.in_ch * n];
        gemm_acc(self.in_ch, k, n, self.weight.data(), &dcols, &mut dx);
        let dx = channel_major_to_batch_major(&dx, b, self.in_ch, h * w);
        Tensor::from_vec(x.shape(), dx)
    }
}
