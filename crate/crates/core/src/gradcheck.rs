//! Central finite-difference verification of the hand-written backward passes.
//!
//! Two entry points:
//! - [`grad_check`] perturbs a random subsample of each trainable layer's
//!   parameters in a whole network and compares against backpropagation.
//!   Losses are evaluated with every piecewise decision (activation region,
//!   pool argmax) held where the unperturbed pass put it. That function
//!   equals the loss until a decision would flip and has the same derivative
//!   at the base point, so entries near a kink stay checkable; in deep
//!   nets almost every first-layer perturbation flips some decision at
//!   step 1e-3. Entries whose stencil flipped one are counted as `frozen`.
//! - [`kernel_suite`] checks every layer kind, activation and loss in
//!   isolation over many random small instances, perturbing all inputs and
//!   parameters.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::activations::{pau_init_relu, Activation, ActivationLayer, PauParams};
use crate::error::Result;
use crate::layers::{Conv2d, ConvTranspose2d, Flatten, Linear, MaxPool2d};
use crate::loss::{bce_with_logits, cross_entropy};
use crate::network::{Network, ParamKey};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub type Gradients = BTreeMap<ParamKey, Vec<f64>>;

/// Offsets (in units of the step) at which the objective is evaluated.
const STENCIL: [f64; 4] = [2.0, 1.0, -1.0, -2.0];

/// Fourth-order central difference from values at `+2h, +h, −h, −2h`.
fn central_difference(v: [f64; 4], h: f64) -> f64 {
    (8.0 * (v[1] - v[2]) - (v[0] - v[3])) / (12.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_layer: usize,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is zero are judged on absolute agreement.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            samples_per_layer: 100,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: String,
    pub checked: usize,
    /// Checked entries whose stencil crossed a kink, so that their loss
    /// values came from the decision-frozen forward pass.
    pub frozen: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub loss: f64,
    pub layers: Vec<LayerReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }
}

/// Forward + backward on one batch; returns the loss and a copy of every gradient.
pub fn analytic_gradients(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let logits = net.forward_train(x)?;
    let (loss, grad) = cross_entropy(&logits, labels)?;
    net.backward(&grad)?;
    let mut out = Gradients::new();
    net.visit_params(|k, _, g| {
        out.insert(k, g.to_vec());
    });
    Ok((loss, out))
}

fn set_param(net: &mut Network, key: ParamKey, idx: usize, value: f64) -> f64 {
    let mut old = 0.0;
    net.visit_params_mut(|k, p, _| {
        if k == key {
            old = p[idx];
            p[idx] = value;
        }
    });
    old
}

/// Compare supplied analytic gradients against central differences.
pub fn check_network(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    analytic: &Gradients,
    cfg: &GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LayerReport>> {
    let base = net.probe(x)?;
    let names = net.layer_names().to_vec();
    let mut reports = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let keys: Vec<(ParamKey, usize)> = analytic
            .iter()
            .filter(|(k, _)| k.layer == t)
            .map(|(k, g)| (*k, g.len()))
            .collect();
        let total: usize = keys.iter().map(|(_, n)| n).sum();
        let picks = sample(rng, total, cfg.samples_per_layer.min(total)).into_vec();
        let mut frozen = 0;
        let mut max_err: f64 = 0.0;
        for &flat in &picks {
            let (mut key, mut idx) = (keys[0].0, flat);
            for &(k, n) in &keys {
                if idx < n {
                    key = k;
                    break;
                }
                idx -= n;
            }
            let orig = set_param(net, key, idx, 0.0);
            let mut values = [0.0; 4];
            let mut crossed = false;
            for (v, offset) in values.iter_mut().zip(STENCIL) {
                set_param(net, key, idx, orig + offset * cfg.step);
                let (logits, c) = net.forward_frozen(t, &base)?;
                crossed |= c;
                *v = cross_entropy(&logits, labels)?.0;
            }
            set_param(net, key, idx, orig);
            frozen += usize::from(crossed);
            let numeric = central_difference(values, cfg.step);
            max_err = max_err.max(cfg.relative_error(analytic[&key][idx], numeric));
        }
        reports.push(LayerReport {
            layer: name.clone(),
            checked: picks.len(),
            frozen,
            max_rel_error: max_err,
            passed: !picks.is_empty() && max_err < cfg.tolerance,
        });
    }
    Ok(reports)
}

/// Full check of a network on one batch.
pub fn grad_check(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let (loss, analytic) = analytic_gradients(net, x, labels)?;
    let layers = check_network(net, x, labels, &analytic, cfg, rng)?;
    let label = net
        .activation_kind()
        .map(|k| k.name().to_string())
        .unwrap_or_else(|| "linear".into());
    Ok(GradCheckReport { label, loss, layers })
}

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub instances: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// A scalar objective over a flat parameter vector. `None` marks a
/// perturbation that changed a piecewise decision.
struct Objective<'a> {
    theta: Vec<f64>,
    analytic: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> Option<f64> + 'a>,
}

fn compare(obj: Objective<'_>, cfg: &GradCheckConfig) -> (usize, f64) {
    let mut theta = obj.theta;
    let mut max_err: f64 = 0.0;
    let mut n = 0;
    'entries: for i in 0..theta.len() {
        let orig = theta[i];
        let mut values = [0.0; 4];
        for (v, offset) in values.iter_mut().zip(STENCIL) {
            theta[i] = orig + offset * cfg.step;
            let Some(l) = (obj.eval)(&theta) else {
                theta[i] = orig;
                continue 'entries;
            };
            *v = l;
        }
        theta[i] = orig;
        let numeric = central_difference(values, cfg.step);
        max_err = max_err.max(cfg.relative_error(obj.analytic[i], numeric));
        n += 1;
    }
    (n, max_err)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn split<'t>(theta: &'t [f64], sizes: &[usize]) -> Vec<&'t [f64]> {
    let mut out = Vec::new();
    let mut at = 0;
    for &s in sizes {
        out.push(&theta[at..at + s]);
        at += s;
    }
    out
}

fn conv_objective<'a>(rng: &mut impl Rng, stride: usize, padding: usize, kernel: usize) -> Objective<'a> {
    let (b, cin, cout, side) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(kernel..kernel + 4));
    let mut conv = Conv2d::with_geometry(cin, cout, kernel, stride, padding, rng);
    conv.bias = random_tensor(&[cout], rng);
    let x = random_tensor(&[b, cin, side, side], rng);
    let y = conv.forward_train(&x).expect("conv forward");
    let r = random_tensor(y.shape(), rng);
    let dx = conv.backward(&r).expect("conv backward");
    let xs = x.shape().to_vec();
    let ws = conv.weight.shape().to_vec();
    let sizes = [x.len(), conv.weight.len(), cout];
    let theta = [x.data(), conv.weight.data(), conv.bias.data()].concat();
    let analytic = [dx.data(), conv.grad_weight.data(), conv.grad_bias.data()].concat();
    let eval = move |t: &[f64]| {
        let p = split(t, &sizes);
        let mut c = conv.clone();
        c.weight = Tensor::from_vec(&ws, p[1].to_vec()).ok()?;
        c.bias = Tensor::from_vec(&[cout], p[2].to_vec()).ok()?;
        let y = c.forward(&Tensor::from_vec(&xs, p[0].to_vec()).ok()?).ok()?;
        Some(dot(&y, &r))
    };
    Objective { theta, analytic, eval: Box::new(eval) }
}

fn conv_transpose_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let (b, cin, cout, side) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..5));
    let mut ct = ConvTranspose2d::new(cin, cout, 4, 2, 1, rng);
    ct.bias = random_tensor(&[cout], rng);
    let x = random_tensor(&[b, cin, side, side], rng);
    let y = ct.forward_train(&x).expect("convT forward");
    let r = random_tensor(y.shape(), rng);
    let dx = ct.backward(&r).expect("convT backward");
    let xs = x.shape().to_vec();
    let ws = ct.weight.shape().to_vec();
    let sizes = [x.len(), ct.weight.len(), cout];
    let theta = [x.data(), ct.weight.data(), ct.bias.data()].concat();
    let analytic = [dx.data(), ct.grad_weight.data(), ct.grad_bias.data()].concat();
    let eval = move |t: &[f64]| {
        let p = split(t, &sizes);
        let mut c = ct.clone();
        c.weight = Tensor::from_vec(&ws, p[1].to_vec()).ok()?;
        c.bias = Tensor::from_vec(&[cout], p[2].to_vec()).ok()?;
        let y = c.forward(&Tensor::from_vec(&xs, p[0].to_vec()).ok()?).ok()?;
        Some(dot(&y, &r))
    };
    Objective { theta, analytic, eval: Box::new(eval) }
}

fn linear_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let (b, fin, fout) = (rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..6));
    let mut lin = Linear::new(fin, fout, rng);
    lin.bias = random_tensor(&[fout], rng);
    let x = random_tensor(&[b, fin], rng);
    let y = lin.forward_train(&x).expect("linear forward");
    let r = random_tensor(y.shape(), rng);
    let dx = lin.backward(&r).expect("linear backward");
    let sizes = [x.len(), lin.weight.len(), fout];
    let theta = [x.data(), lin.weight.data(), lin.bias.data()].concat();
    let analytic = [dx.data(), lin.grad_weight.data(), lin.grad_bias.data()].concat();
    let eval = move |t: &[f64]| {
        let p = split(t, &sizes);
        let w = Tensor::from_vec(&[fout, fin], p[1].to_vec()).ok()?;
        let bias = Tensor::from_vec(&[fout], p[2].to_vec()).ok()?;
        let y = lin.forward_with(&Tensor::from_vec(&[b, fin], p[0].to_vec()).ok()?, &w, &bias).ok()?;
        Some(dot(&y, &r))
    };
    Objective { theta, analytic, eval: Box::new(eval) }
}

fn pool_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let side = 2 * rng.random_range(1..4);
    let shape = [2, rng.random_range(1..3), side, side];
    let mut pool = MaxPool2d::new(2, 2);
    let x = random_tensor(&shape, rng);
    let (y, base_arg) = pool.forward_with_argmax(&x).expect("pool");
    pool.forward_train(&x).expect("pool");
    let r = random_tensor(y.shape(), rng);
    let dx = pool.backward(&r).expect("pool backward");
    let theta = x.data().to_vec();
    let eval = move |t: &[f64]| {
        let (y, arg) = pool.forward_with_argmax(&Tensor::from_vec(&shape, t.to_vec()).ok()?).ok()?;
        (arg == base_arg).then(|| dot(&y, &r))
    };
    Objective { theta, analytic: dx.into_vec(), eval: Box::new(eval) }
}

fn flatten_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let shape = [2, rng.random_range(1..4), 3, 2];
    let mut f = Flatten::new();
    let x = random_tensor(&shape, rng);
    let y = f.forward_train(&x).expect("flatten");
    let r = random_tensor(y.shape(), rng);
    let dx = f.backward(&r).expect("flatten backward");
    let eval = move |t: &[f64]| {
        let y = f.forward(&Tensor::from_vec(&shape, t.to_vec()).ok()?).ok()?;
        Some(dot(&y, &r))
    };
    Objective { theta: x.into_vec(), analytic: dx.into_vec(), eval: Box::new(eval) }
}

/// Inputs drawn at least 1e-2 away from every kink of the activation.
fn activation_input(act: &Activation, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = rng.random_range(-6.0..6.0);
        let near_kink = match act {
            Activation::Tanh => false,
            Activation::Relu | Activation::Pau(_) => v.abs() < 1e-2,
            Activation::ReluDown { d } => v.abs() < 1e-2 || (v - d).abs() < 1e-2,
        };
        if !near_kink {
            out.push(v);
        }
    }
    out
}

fn activation_objective<'a>(act: Activation, rng: &mut impl Rng) -> Objective<'a> {
    let n = rng.random_range(4..24);
    let x = Tensor::from_vec(&[n], activation_input(&act, n, rng)).expect("shape");
    let mut layer = ActivationLayer::new(act);
    let y = layer.forward_train(&x);
    let r = random_tensor(y.shape(), rng);
    let dx = layer.backward(&r).expect("activation backward");
    let eval = move |t: &[f64]| {
        let y = layer.forward(&Tensor::from_vec(&[n], t.to_vec()).ok()?);
        Some(dot(&y, &r))
    };
    Objective { theta: x.into_vec(), analytic: dx.into_vec(), eval: Box::new(eval) }
}

/// Gradient of the PAU w.r.t. its ten coefficients, with random coefficients
/// kept away from the |b| kink.
fn pau_coeff_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let mut num = [0.0; 6];
    for v in num.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut den = [0.0; 4];
    for v in den.iter_mut() {
        let m: f64 = rng.random_range(0.1..1.0);
        *v = if rng.random_bool(0.5) { m } else { -m };
    }
    let mut p = PauParams::new(num, den);
    let n = rng.random_range(4..24);
    let x = Tensor::from_vec(&[n], activation_input(&Activation::Pau(p.clone()), n, rng)).expect("shape");
    let r = random_tensor(&[n], rng);
    p.backward(&r, &x).expect("pau backward");
    let theta = [&p.numerator[..], &p.denominator[..]].concat();
    let analytic = [&p.grad_numerator[..], &p.grad_denominator[..]].concat();
    let eval = move |t: &[f64]| {
        let q = PauParams::new(std::array::from_fn(|i| t[i]), std::array::from_fn(|j| t[6 + j]));
        Some(dot(&q.forward(&x), &r))
    };
    Objective { theta, analytic, eval: Box::new(eval) }
}

fn cross_entropy_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let b = rng.random_range(1..6);
    let logits = random_tensor(&[b, 2], rng).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
    let (_, g) = cross_entropy(&logits, &labels).expect("ce");
    let eval = move |t: &[f64]| {
        let l = Tensor::from_vec(&[b, 2], t.to_vec()).ok()?;
        cross_entropy(&l, &labels).ok().map(|(v, _)| v)
    };
    Objective { theta: logits.into_vec(), analytic: g.into_vec(), eval: Box::new(eval) }
}

fn bce_objective<'a>(rng: &mut impl Rng) -> Objective<'a> {
    let n = rng.random_range(2..12);
    let logits = random_tensor(&[2, n], rng).map(|v| 4.0 * v);
    let target = random_tensor(&[2, n], rng).map(|v| 0.5 + 0.5 * v);
    let (_, g) = bce_with_logits(&logits, &target).expect("bce");
    let eval = move |t: &[f64]| {
        let l = Tensor::from_vec(&[2, n], t.to_vec()).ok()?;
        bce_with_logits(&l, &target).ok().map(|(v, _)| v)
    };
    Objective { theta: logits.into_vec(), analytic: g.into_vec(), eval: Box::new(eval) }
}

pub const KERNELS: [&str; 13] = [
    "conv2d",
    "conv2d_s2_p1",
    "conv_transpose2d",
    "maxpool2d",
    "linear",
    "flatten",
    "relu",
    "tanh",
    "reludown",
    "pau_input",
    "pau_coefficients",
    "cross_entropy",
    "bce_with_logits",
];

/// Check every kernel on `instances` random instances each.
pub fn kernel_suite(instances: usize, seed: u64, cfg: &GradCheckConfig) -> Vec<KernelReport> {
    let pau = pau_init_relu(-3.0, 3.0, 1000);
    KERNELS
        .iter()
        .enumerate()
        .map(|(ki, &kernel)| {
            let mut max_err: f64 = 0.0;
            let mut entries = 0;
            for inst in 0..instances {
                let mut rng = rng_for(seed, "kernel-suite", &[ki as u64, inst as u64]);
                let obj = match kernel {
                    "conv2d" => conv_objective(&mut rng, 1, 0, 3),
                    "conv2d_s2_p1" => conv_objective(&mut rng, 2, 1, 4),
                    "conv_transpose2d" => conv_transpose_objective(&mut rng),
                    "maxpool2d" => pool_objective(&mut rng),
                    "linear" => linear_objective(&mut rng),
                    "flatten" => flatten_objective(&mut rng),
                    "relu" => activation_objective(Activation::Relu, &mut rng),
                    "tanh" => activation_objective(Activation::Tanh, &mut rng),
                    "reludown" => {
                        let d = -rng.random_range(0.5..4.0);
                        activation_objective(Activation::ReluDown { d }, &mut rng)
                    }
                    "pau_input" => activation_objective(Activation::Pau(pau.clone()), &mut rng),
                    "pau_coefficients" => pau_coeff_objective(&mut rng),
                    "cross_entropy" => cross_entropy_objective(&mut rng),
                    "bce_with_logits" => bce_objective(&mut rng),
                    _ => unreachable!(),
                };
                let (n, e) = compare(obj, cfg);
                entries += n;
                max_err = max_err.max(e);
            }
            KernelReport {
                kernel,
                instances,
                entries_checked: entries,
                max_rel_error: max_err,
                passed: entries > 0 && max_err < cfg.tolerance,
            }
        })
        .collect()
}
