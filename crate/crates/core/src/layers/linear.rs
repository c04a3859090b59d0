use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::kaiming_uniform;
use crate::tensor::{gemm_acc, transpose, Tensor};

/// Fully connected layer. Weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    cached_input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let mut weight = Tensor::zeros(&[out_features, in_features]);
        kaiming_uniform(rng, in_features, weight.data_mut());
        Linear {
            in_features,
            out_features,
            grad_weight: Tensor::zeros(&[out_features, in_features]),
            grad_bias: Tensor::zeros(&[out_features]),
            weight,
            bias: Tensor::zeros(&[out_features]),
            cached_input: None,
        }
    }

    /// Redraw weights (Kaiming) and zero the bias.
    pub fn reinitialize(&mut self, rng: &mut impl Rng) {
        kaiming_uniform(rng, self.in_features, self.weight.data_mut());
        self.bias.fill(0.0);
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let (b, f) = x.dims2("linear")?;
        if f != self.in_features {
            return Err(Error::Dimension(format!(
                "linear feature axis: input has {f} features, layer expects {}",
                self.in_features
            )));
        }
        Ok(b)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &self.weight, &self.bias)
    }

    /// Forward with substitute parameters of the same shape (used to evaluate stored heads).
    pub fn forward_with(&self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let b = self.check(x)?;
        if weight.shape() != self.weight.shape() || bias.shape() != self.bias.shape() {
            return Err(Error::State(format!(
                "linear parameters {:?}/{:?} incompatible with layer {:?}",
                weight.shape(),
                bias.shape(),
                self.weight.shape()
            )));
        }
        let w_t = transpose(self.out_features, self.in_features, weight.data());
        let mut y = vec![0.0; b * self.out_features];
        gemm_acc(b, self.in_features, self.out_features, x.data(), &w_t, &mut y);
        for row in y.chunks_mut(self.out_features) {
            for (v, &bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
        Tensor::from_vec(&[b, self.out_features], y)
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
            .ok_or_else(|| Error::State("linear backward called before forward".into()))?;
        let b = self.check(&x)?;
        if grad_out.shape() != [b, self.out_features] {
            return Err(Error::Dimension(format!(
                "linear backward: grad_out {:?} expected [{b}, {}]",
                grad_out.shape(),
                self.out_features
            )));
        }
        let gb = self.grad_bias.data_mut();
        gb.fill(0.0);
        for row in grad_out.data().chunks(self.out_features) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        let dy_t = transpose(b, self.out_features, grad_out.data());
        let gw = self.grad_weight.data_mut();
        gw.fill(0.0);
        gemm_acc(self.out_features, b, self.in_features, &dy_t, x.data(), gw);

        let mut dx = vec![0.0; b * self.in_features];
        gemm_acc(b, self.out_features, self.in_features, grad_out.data(), self.weight.data(), &mut dx);
        Tensor::from_vec(&[b, self.in_features], dx)
    }
}
