//! The classifier: a stack of conv/pool/linear layers with an activation
//! after every trainable layer except the final two-way head.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;

use crate::activations::{Activation, ActivationKind, ActivationLayer};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Flatten, Linear, MaxPool2d};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    Pool { kernel: usize, stride: usize },
    Flatten,
    Linear { inputs: usize, outputs: usize },
}

/// Which layer stack to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Three conv blocks and three linear layers for 32×32 inputs (6 trainable layers).
    Standard,
    /// Two conv blocks and three linear layers for 16×16 inputs (5 trainable layers).
    Compact,
}

impl Architecture {
    /// Pick the stack whose shapes fit the given image side length.
    pub fn for_image(height: usize, width: usize) -> Result<Self> {
        match (height, width) {
            (32, 32) => Ok(Architecture::Standard),
            (16, 16) => Ok(Architecture::Compact),
            _ => Err(Error::Config(format!(
                "no built-in architecture for {height}x{width} images (supported: 32x32, 16x16)"
            ))),
        }
    }

    pub fn input_side(&self) -> usize {
        match self {
            Architecture::Standard => 32,
            Architecture::Compact => 16,
        }
    }

    pub fn trainable_layers(&self) -> usize {
        match self {
            Architecture::Standard => 6,
            Architecture::Compact => 5,
        }
    }

    pub fn layers(&self, channels: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let pool = Pool { kernel: 2, stride: 2 };
        match self {
            Architecture::Standard => vec![
                Conv { in_ch: channels, out_ch: 32, kernel: 5 },
                pool,
                Conv { in_ch: 32, out_ch: 64, kernel: 3 },
                pool,
                Conv { in_ch: 64, out_ch: 128, kernel: 3 },
                pool,
                Flatten,
                Linear { inputs: 512, outputs: 128 },
                Linear { inputs: 128, outputs: 128 },
                Linear { inputs: 128, outputs: 2 },
            ],
            Architecture::Compact => vec![
                Conv { in_ch: channels, out_ch: 32, kernel: 5 },
                pool,
                Conv { in_ch: 32, out_ch: 64, kernel: 3 },
                pool,
                Flatten,
                Linear { inputs: 256, outputs: 128 },
                Linear { inputs: 128, outputs: 128 },
                Linear { inputs: 128, outputs: 2 },
            ],
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "6-deep" | "standard" => Ok(Architecture::Standard),
            "5-deep" | "compact" => Ok(Architecture::Compact),
            other => Err(Error::Config(format!(
                "unknown network layout {other:?} (expected 6-deep | 5-deep)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Standard => "6-deep",
            Architecture::Compact => "5-deep",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Pool(MaxPool2d),
    Flatten(Flatten),
    Linear(Linear),
    Act(ActivationLayer),
}

/// Identifies one parameter tensor: the trainable layer it belongs to and which slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub slot: ParamSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamSlot {
    Weight,
    Bias,
    /// PAU numerator of the activation that follows the layer.
    PauNumerator,
    PauDenominator,
}

/// Parameters of the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Mutable view of a trainable layer.
pub enum TrainableMut<'a> {
    Conv(&'a mut Conv2d),
    Linear(&'a mut Linear),
}

/// Everything a pure forward pass can report about internal state.
#[derive(Debug, Clone)]
pub struct Probe {
    pub logits: Tensor,
    /// Input to each activation site, one per hidden trainable layer.
    pub preactivations: Vec<Tensor>,
    /// Output of each activation site.
    pub postactivations: Vec<Tensor>,
    pub pool_argmax: Vec<Vec<u32>>,
    /// Input of each trainable layer.
    pub layer_inputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    /// Index into `layers` of each trainable layer, input side first.
    trainable: Vec<usize>,
    /// Index into `layers` of the activation after each trainable layer (none for the head).
    sites: Vec<Option<usize>>,
    names: Vec<String>,
    input_shape: [usize; 3],
    pub(crate) grads_ready: bool,
}

impl Network {
    pub fn new(
        arch: Architecture,
        channels: usize,
        activation: ActivationKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let side = arch.input_side();
        Self::from_specs(&arch.layers(channels), [channels, side, side], activation, rng)
    }

    /// Build from an explicit layer list; an activation follows every trainable
    /// layer but the last. The last layer must be `Linear`.
    pub fn from_specs(
        specs: &[LayerSpec],
        input_shape: [usize; 3],
        activation: ActivationKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let act = Activation::from_kind(activation)?;
        let n_trainable = specs
            .iter()
            .filter(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }))
            .count();
        if !matches!(specs.last(), Some(LayerSpec::Linear { .. })) {
            return Err(Error::Config("network must end in a linear head".into()));
        }
        let mut layers = Vec::new();
        let mut trainable = Vec::new();
        let mut sites = Vec::new();
        let mut names = Vec::new();
        let (mut convs, mut fcs) = (0, 0);
        let mut shape = vec![1, input_shape[0], input_shape[1], input_shape[2]];
        for spec in specs {
            match *spec {
                LayerSpec::Conv { in_ch, out_ch, kernel } => {
                    let conv = Conv2d::new(in_ch, out_ch, kernel, rng);
                    if shape.len() != 4 {
                        return Err(Error::Config("conv after flatten".into()));
                    }
                    shape = conv.output_shape(&shape)?;
                    convs += 1;
                    names.push(format!("conv{convs}"));
                    trainable.push(layers.len());
                    layers.push(Layer::Conv(conv));
                }
                LayerSpec::Linear { inputs, outputs } => {
                    if shape.len() != 2 || shape[1] != inputs {
                        return Err(Error::Dimension(format!(
                            "linear({inputs}, {outputs}) receives shape {shape:?}"
                        )));
                    }
                    shape = vec![1, outputs];
                    trainable.push(layers.len());
                    if trainable.len() == n_trainable {
                        names.push("head".to_string());
                    } else {
                        fcs += 1;
                        names.push(format!("fc{fcs}"));
                    }
                    layers.push(Layer::Linear(Linear::new(inputs, outputs, rng)));
                }
                LayerSpec::Pool { kernel, stride } => {
                    let pool = MaxPool2d::new(kernel, stride);
                    shape = pool.output_shape(&shape)?;
                    layers.push(Layer::Pool(pool));
                }
                LayerSpec::Flatten => {
                    shape = vec![1, shape[1..].iter().product()];
                    layers.push(Layer::Flatten(Flatten::new()));
                }
            }
            if matches!(spec, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }) {
                if trainable.len() < n_trainable {
                    sites.push(Some(layers.len()));
                    layers.push(Layer::Act(ActivationLayer::new(act.clone())));
                } else {
                    sites.push(None);
                }
            }
        }
        Ok(Network {
            layers,
            trainable,
            sites,
            names,
            input_shape,
            grads_ready: false,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.len()
    }

    /// Trainable index of the head (always the last).
    pub fn head_index(&self) -> usize {
        self.trainable.len() - 1
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Hidden trainable layers, i.e. those followed by an activation.
    pub fn num_sites(&self) -> usize {
        self.sites.iter().flatten().count()
    }

    pub fn activation_kind(&self) -> Option<ActivationKind> {
        self.sites
            .iter()
            .flatten()
            .next()
            .map(|&i| match &self.layers[i] {
                Layer::Act(a) => a.activation.kind(),
                _ => unreachable!(),
            })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "network input {:?} does not match [B, {}, {}, {}]",
                s, self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Pure inference.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(l) => l.forward(&h)?,
                Layer::Pool(l) => l.forward(&h)?,
                Layer::Flatten(l) => l.forward(&h)?,
                Layer::Linear(l) => l.forward(&h)?,
                Layer::Act(l) => l.forward(&h),
            };
        }
        Ok(h)
    }

    /// Pure inference with substitute head parameters.
    pub fn forward_with_head(&self, x: &Tensor, head: &HeadParams) -> Result<Tensor> {
        self.check_input(x)?;
        let head_layer = self.trainable[self.head_index()];
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear(l) if i == head_layer => l.forward_with(&h, &head.weight, &head.bias)?,
                Layer::Conv(l) => l.forward(&h)?,
                Layer::Pool(l) => l.forward(&h)?,
                Layer::Flatten(l) => l.forward(&h)?,
                Layer::Linear(l) => l.forward(&h)?,
                Layer::Act(l) => l.forward(&h),
            };
        }
        Ok(h)
    }

    /// Pure forward that also returns activation-site inputs/outputs and pool choices.
    pub fn probe(&self, x: &Tensor) -> Result<Probe> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut argmax = Vec::new();
        let mut inputs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if self.trainable.contains(&i) {
                inputs.push(h.clone());
            }
            h = match layer {
                Layer::Conv(l) => l.forward(&h)?,
                Layer::Pool(l) => {
                    let (y, a) = l.forward_with_argmax(&h)?;
                    argmax.push(a);
                    y
                }
                Layer::Flatten(l) => l.forward(&h)?,
                Layer::Linear(l) => l.forward(&h)?,
                Layer::Act(l) => {
                    let y = l.forward(&h);
                    pre.push(std::mem::replace(&mut h, Tensor::zeros(&[0])));
                    post.push(y.clone());
                    y
                }
            };
        }
        Ok(Probe {
            logits: h,
            preactivations: pre,
            postactivations: post,
            pool_argmax: argmax,
            layer_inputs: inputs,
        })
    }

    /// Forward pass starting at trainable layer `t`, fed from `base`, with
    /// every activation region and pool choice held at the decisions of
    /// `base`. The second value reports whether a free forward pass would
    /// have decided differently anywhere; when it is false the logits are
    /// exactly those of [`Self::forward`].
    pub fn forward_frozen(&self, t: usize, base: &Probe) -> Result<(Tensor, bool)> {
        let start = self.trainable[t];
        let mut site = self.layers[..start].iter().filter(|l| matches!(l, Layer::Act(_))).count();
        let mut pool = self.layers[..start].iter().filter(|l| matches!(l, Layer::Pool(_))).count();
        let mut crossed = false;
        let mut h = base.layer_inputs[t].clone();
        for layer in &self.layers[start..] {
            h = match layer {
                Layer::Conv(l) => l.forward(&h)?,
                Layer::Flatten(l) => l.forward(&h)?,
                Layer::Linear(l) => l.forward(&h)?,
                Layer::Pool(l) => {
                    let (free, arg) = l.forward_with_argmax(&h)?;
                    let fixed = &base.pool_argmax[pool];
                    pool += 1;
                    if arg == *fixed {
                        free
                    } else {
                        crossed = true;
                        let hd = h.data();
                        Tensor::from_vec(free.shape(), fixed.iter().map(|&i| hd[i as usize]).collect())?
                    }
                }
                Layer::Act(l) => {
                    let act = &l.activation;
                    let reference = base.preactivations[site].data();
                    site += 1;
                    let mut y = h;
                    for (v, &r) in y.data_mut().iter_mut().zip(reference) {
                        let region = act.region(r);
                        crossed |= act.region(*v) != region;
                        *v = act.value_in_region(*v, region);
                    }
                    y
                }
            };
        }
        Ok((h, crossed))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.grads_ready = false;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(l) => l.forward_train(&h)?,
                Layer::Pool(l) => l.forward_train(&h)?,
                Layer::Flatten(l) => l.forward_train(&h)?,
                Layer::Linear(l) => l.forward_train(&h)?,
                Layer::Act(l) => l.forward_train(&h),
            };
        }
        Ok(h)
    }

    /// Backpropagate the logit gradient; fills every parameter gradient.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Conv(l) => l.backward(&g)?,
                Layer::Pool(l) => l.backward(&g)?,
                Layer::Flatten(l) => l.backward(&g)?,
                Layer::Linear(l) => l.backward(&g)?,
                Layer::Act(l) => l.backward(&g)?,
            };
        }
        self.grads_ready = true;
        Ok(g)
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn mark_grads_consumed(&mut self) {
        self.grads_ready = false;
    }

    /// Output of activation site `t` from the latest training forward.
    pub fn site_output(&self, t: usize) -> Option<&Tensor> {
        match self.sites.get(t).copied().flatten().map(|i| &self.layers[i]) {
            Some(Layer::Act(a)) => a.last_output(),
            _ => None,
        }
    }

    pub fn trainable_mut(&mut self, t: usize) -> TrainableMut<'_> {
        trainable_view(&mut self.layers[self.trainable[t]])
    }

    /// Mutable views of trainable layers `t` and `t + 1` at once.
    pub fn trainable_pair_mut(&mut self, t: usize) -> (TrainableMut<'_>, TrainableMut<'_>) {
        let (a, b) = (self.trainable[t], self.trainable[t + 1]);
        let (lo, hi) = self.layers.split_at_mut(b);
        // a < b, so lo[a] and hi[0] are disjoint
        (trainable_view(&mut lo[a]), trainable_view(&mut hi[0]))
    }

    pub fn pau_params_mut(&mut self, t: usize) -> Option<&mut crate::activations::PauParams> {
        let idx = self.sites.get(t).copied().flatten()?;
        match &mut self.layers[idx] {
            Layer::Act(ActivationLayer {
                activation: Activation::Pau(p),
                ..
            }) => Some(p),
            _ => None,
        }
    }

    /// Visit every parameter tensor together with its gradient, in a fixed order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKey, &mut [f64], &[f64])) {
        for t in 0..self.trainable.len() {
            match &mut self.layers[self.trainable[t]] {
                Layer::Conv(c) => {
                    f(ParamKey { layer: t, slot: ParamSlot::Weight }, c.weight.data_mut(), c.grad_weight.data());
                    f(ParamKey { layer: t, slot: ParamSlot::Bias }, c.bias.data_mut(), c.grad_bias.data());
                }
                Layer::Linear(l) => {
                    f(ParamKey { layer: t, slot: ParamSlot::Weight }, l.weight.data_mut(), l.grad_weight.data());
                    f(ParamKey { layer: t, slot: ParamSlot::Bias }, l.bias.data_mut(), l.grad_bias.data());
                }
                _ => unreachable!(),
            }
            if let Some(p) = self.pau_params_mut(t) {
                if p.trainable {
                    let gn = p.grad_numerator;
                    let gd = p.grad_denominator;
                    f(ParamKey { layer: t, slot: ParamSlot::PauNumerator }, &mut p.numerator, &gn);
                    f(ParamKey { layer: t, slot: ParamSlot::PauDenominator }, &mut p.denominator, &gd);
                }
            }
        }
    }

    /// Visit every parameter tensor read-only, in the same order as [`Self::visit_params_mut`].
    pub fn visit_params(&self, mut f: impl FnMut(ParamKey, &[f64], &[f64])) {
        for t in 0..self.trainable.len() {
            match &self.layers[self.trainable[t]] {
                Layer::Conv(c) => {
                    f(ParamKey { layer: t, slot: ParamSlot::Weight }, c.weight.data(), c.grad_weight.data());
                    f(ParamKey { layer: t, slot: ParamSlot::Bias }, c.bias.data(), c.grad_bias.data());
                }
                Layer::Linear(l) => {
                    f(ParamKey { layer: t, slot: ParamSlot::Weight }, l.weight.data(), l.grad_weight.data());
                    f(ParamKey { layer: t, slot: ParamSlot::Bias }, l.bias.data(), l.grad_bias.data());
                }
                _ => unreachable!(),
            }
            if let Some(Layer::Act(ActivationLayer {
                activation: Activation::Pau(p),
                ..
            })) = self.sites[t].map(|i| &self.layers[i])
            {
                if p.trainable {
                    f(ParamKey { layer: t, slot: ParamSlot::PauNumerator }, &p.numerator, &p.grad_numerator);
                    f(ParamKey { layer: t, slot: ParamSlot::PauDenominator }, &p.denominator, &p.grad_denominator);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p, _| n += p.len());
        n
    }

    fn head_linear(&self) -> &Linear {
        match &self.layers[self.trainable[self.head_index()]] {
            Layer::Linear(l) => l,
            _ => unreachable!("head is linear"),
        }
    }

    fn head_linear_mut(&mut self) -> &mut Linear {
        let i = self.trainable[self.head_index()];
        match &mut self.layers[i] {
            Layer::Linear(l) => l,
            _ => unreachable!("head is linear"),
        }
    }

    pub fn head(&self) -> HeadParams {
        let l = self.head_linear();
        HeadParams {
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        }
    }

    pub fn set_head(&mut self, head: &HeadParams) -> Result<()> {
        let l = self.head_linear_mut();
        if head.weight.shape() != l.weight.shape() || head.bias.shape() != l.bias.shape() {
            return Err(Error::State("head parameters do not fit the head layer".into()));
        }
        l.weight = head.weight.clone();
        l.bias = head.bias.clone();
        Ok(())
    }

    /// Fresh Kaiming draw for the head weights, zero bias.
    pub fn reset_head(&mut self, rng: &mut impl Rng) {
        self.head_linear_mut().reinitialize(rng);
    }

    /// Digest of every parameter's bit pattern.
    pub fn param_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit_params(|k, p, _| {
            k.hash(&mut h);
            for v in p {
                v.to_bits().hash(&mut h);
            }
        });
        h.finish()
    }
}

fn trainable_view(layer: &mut Layer) -> TrainableMut<'_> {
    match layer {
        Layer::Conv(c) => TrainableMut::Conv(c),
        Layer::Linear(l) => TrainableMut::Linear(l),
        _ => unreachable!("trainable index points at a parameter-free layer"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn standard_stack_shapes() {
        let mut rng = rng_for(1, "net", &[]);
        let net = Network::new(Architecture::Standard, 3, ActivationKind::Relu, &mut rng).unwrap();
        assert_eq!(net.num_trainable(), 6);
        assert_eq!(net.layer_names(), &["conv1", "conv2", "conv3", "fc1", "fc2", "head"]);
        let y = net.forward(&Tensor::zeros(&[3, 3, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        let kinds: Vec<String> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(format!("Conv({},{},{})", c.in_ch, c.out_ch, c.kernel)),
                Layer::Linear(l) => Some(format!("Linear({},{})", l.in_features, l.out_features)),
                Layer::Pool(p) => Some(format!("Pool({},{})", p.kernel, p.stride)),
                Layer::Flatten(_) => Some("Flatten".into()),
                Layer::Act(_) => None,
            })
            .collect();
        assert_eq!(
            kinds.join("→"),
            "Conv(3,32,5)→Pool(2,2)→Conv(32,64,3)→Pool(2,2)→Conv(64,128,3)→Pool(2,2)→Flatten→Linear(512,128)→Linear(128,128)→Linear(128,2)"
        );
    }

    #[test]
    fn compact_stack_shapes() {
        let mut rng = rng_for(1, "net", &[]);
        let net = Network::new(Architecture::Compact, 3, ActivationKind::Tanh, &mut rng).unwrap();
        assert_eq!(net.num_trainable(), 5);
        assert_eq!(net.num_sites(), 4);
        let y = net.forward(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let mut rng = rng_for(1, "net", &[]);
        let net = Network::new(Architecture::Compact, 3, ActivationKind::Relu, &mut rng).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[2, 3, 32, 32])), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_with_own_head_matches_forward() {
        let mut rng = rng_for(2, "net", &[]);
        let net = Network::new(Architecture::Compact, 3, ActivationKind::ReluDown { d: -3.0 }, &mut rng).unwrap();
        let x = Tensor::full(&[2, 3, 16, 16], 0.3);
        assert_eq!(net.forward(&x).unwrap(), net.forward_with_head(&x, &net.head()).unwrap());
    }

    #[test]
    fn same_seed_same_init() {
        let a = Network::new(Architecture::Standard, 3, ActivationKind::Relu, &mut rng_for(5, "n", &[])).unwrap();
        let b = Network::new(Architecture::Standard, 3, ActivationKind::Relu, &mut rng_for(5, "n", &[])).unwrap();
        assert_eq!(a.param_digest(), b.param_digest());
    }

    #[test]
    fn pau_coefficients_are_parameters() {
        let mut rng = rng_for(2, "net", &[]);
        let net = Network::new(Architecture::Compact, 3, ActivationKind::Pau, &mut rng).unwrap();
        let mut slots = 0;
        net.visit_params(|k, _, _| {
            if matches!(k.slot, ParamSlot::PauNumerator | ParamSlot::PauDenominator) {
                slots += 1;
            }
        });
        assert_eq!(slots, 8);
    }

    #[test]
    fn frozen_forward_matches_free_forward_at_the_base_point() {
        for kind in ["relu", "tanh", "reludown", "pau"] {
            let mut rng = rng_for(4, "frozen", &[]);
            let net = Network::new(Architecture::Compact, 3, kind.parse().unwrap(), &mut rng).unwrap();
            let x = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| ((i * 37) % 101) as f64 / 101.0).collect())
                .unwrap();
            let base = net.probe(&x).unwrap();
            for t in 0..net.num_trainable() {
                let (logits, crossed) = net.forward_frozen(t, &base).unwrap();
                assert!(!crossed, "{kind} layer {t}");
                assert_eq!(logits, base.logits, "{kind} layer {t}");
            }
        }
    }

}
