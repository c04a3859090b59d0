use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling without padding. Ties resolve to the first (row-major) maximum.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            cache: None,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let fits = |n: usize| n >= self.kernel && (n - self.kernel) % self.stride == 0;
        if !fits(h) || !fits(w) {
            return Err(Error::Dimension(format!(
                "maxpool spatial axes: {h}x{w} is not divisible into {k}x{k} windows with stride {s}",
                k = self.kernel,
                s = self.stride
            )));
        }
        Ok(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (ho, wo) = self.out_dims(input[2], input[3])?;
        Ok(vec![input[0], input[1], ho, wo])
    }

    /// Pooled output plus the flat input index chosen for every output element.
    pub fn forward_with_argmax(&self, x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (b, c, h, w) = x.dims4("maxpool")?;
        let (ho, wo) = self.out_dims(h, w)?;
        let xd = x.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0u32; out.len()];
        let mut o = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.kernel {
                        let row = base + (oy * self.stride + ky) * w + ox * self.stride;
                        for kx in 0..self.kernel {
                            let v = xd[row + kx];
                            if v > best {
                                best = v;
                                best_i = row + kx;
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
        Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, arg))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_argmax(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, argmax) = self.forward_with_argmax(x)?;
        self.cache = Some(PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        });
        Ok(y)
    }

    /// Routes each output gradient to its argmax input position only.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("maxpool backward called before forward".into()))?;
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::Dimension(format!(
                "maxpool backward: grad_out {:?} does not match cached output",
                grad_out.shape()
            )));
        }
        let mut dx = Tensor::zeros(&cache.input_shape);
        let d = dx.data_mut();
        for (&i, &g) in cache.argmax.iter().zip(grad_out.data()) {
            d[i as usize] += g;
        }
        Ok(dx)
    }
}

/// `[B, C, H, W]` → `[B, C·H·W]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let rest = x.len() / b.max(1);
        x.clone().reshape(&[b, rest])
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
        grad_out.clone().reshape(&shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn pool_routes_gradient_to_max() {
        let mut pool = MaxPool2d::new(2, 2);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = pool.backward(&Tensor::full(&[1, 1, 1, 1], 1.5)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn pool_rejects_non_divisible() {
        let pool = MaxPool2d::new(2, 2);
        let err = pool.forward(&Tensor::zeros(&[1, 1, 5, 4])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn pool_matches_reference() {
        let mut rng = rng_for(5, "t", &[]);
        let x = Tensor::from_vec(
            &[2, 3, 6, 6],
            (0..216).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pool = MaxPool2d::new(2, 2);
        assert_eq!(pool.forward(&x).unwrap(), reference::maxpool2d(&x, 2, 2).unwrap());
    }

    #[test]
    fn flatten_roundtrip_shape() {
        let mut f = Flatten::new();
        let x = Tensor::zeros(&[2, 3, 2, 2]);
        let y = f.forward_train(&x).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(f.backward(&y).unwrap().shape(), &[2, 3, 2, 2]);
    }
}
