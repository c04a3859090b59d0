//! Naive nested-loop kernels.
//!
//! These are the oracles for the lowered kernels in [`crate::layers`]. The
//! accumulation order matches the fast path (sum over input channel, then
//! kernel row, then kernel column, starting from zero, bias added last), so
//! forward results agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4("reference conv2d")?;
    let (cout, wcin, k, _) = weight.dims4("reference conv2d weight")?;
    if wcin != cin {
        return Err(Error::Dimension("reference conv2d channel mismatch".into()));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let xd = x.data();
    let wd = weight.data();
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let od = out.data_mut();
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((n * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    od[((n * cout + co) * ho + oy) * wo + ox] = acc + bias.data()[co];
                }
            }
        }
    }
    Ok(out)
}

/// Scatter form of transposed convolution; weight `[cin, cout, k, k]`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4("reference conv_transpose2d")?;
    let (_, cout, k, _) = weight.dims4("reference conv_transpose2d weight")?;
    let ho = (h - 1) * stride + k - 2 * padding;
    let wo = (w - 1) * stride + k - 2 * padding;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for n in 0..b {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = xd[((n * cin + ci) * h + iy) * w + ix];
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * stride + ky) as isize - padding as isize;
                                let ox = (ix * stride + kx) as isize - padding as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                od[((n * cout + co) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * wd[((ci * cout + co) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    for n in 0..b {
        for co in 0..cout {
            for p in 0..ho * wo {
                od[(n * cout + co) * ho * wo + p] += bias.data()[co];
            }
        }
    }
    Ok(out)
}

pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("reference maxpool")?;
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let v = xd[((n * c + ch) * h + oy * stride + ky) * w + ox * stride + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    od[((n * c + ch) * ho + oy) * wo + ox] = best;
                }
            }
        }
    }
    Ok(out)
}

/// `y[b, o] = Σ_i x[b, i]·w[o, i] + bias[o]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, fin) = x.dims2("reference linear")?;
    let (fout, win) = weight.dims2("reference linear weight")?;
    if win != fin {
        return Err(Error::Dimension("reference linear feature mismatch".into()));
    }
    let mut out = Tensor::zeros(&[b, fout]);
    for n in 0..b {
        for o in 0..fout {
            let mut acc = 0.0;
            for i in 0..fin {
                acc += x.data()[n * fin + i] * weight.data()[o * fin + i];
            }
            out.data_mut()[n * fout + o] = acc + bias.data()[o];
        }
    }
    Ok(out)
}
