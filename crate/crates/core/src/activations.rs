//! Elementwise activations: ReLU, Tanh, ReLUDown and the Padé Activation Unit.
//!
//! ReLUDown with hinge `d < 0` is `max(0, x) − max(0, d − x)`: identity for
//! `x ≥ 0`, zero on `[d, 0)`, and `x − d` below the hinge, so the gradient is
//! nonzero on both sides of the zero band.
//!
//! The PAU is a rational function `P(x)/Q(x)` with a degree-5 numerator and
//! the pole-free denominator `Q(x) = 1 + Σ_{j=1..4} |b_j|·|x|^j`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_HINGE: f64 = -3.0;
pub const PAU_NUM_DEGREE: usize = 5;
pub const PAU_DEN_DEGREE: usize = 4;

/// Activation selector as it appears in configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    Tanh,
    ReluDown { d: f64 },
    Pau,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::ReluDown { .. } => "reludown",
            ActivationKind::Pau => "pau",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ActivationKind::ReluDown { d } = *self {
            check_hinge(d)?;
        }
        Ok(())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    /// Parses the name only; ReLUDown gets the default hinge.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            "reludown" => Ok(ActivationKind::ReluDown { d: DEFAULT_HINGE }),
            "pau" => Ok(ActivationKind::Pau),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected relu | tanh | reludown | pau)"
            ))),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_hinge(d: f64) -> Result<()> {
    if !(d < 0.0) || !d.is_finite() {
        return Err(Error::Config(format!(
            "reludown hinge point must be a finite negative number, got {d}"
        )));
    }
    Ok(())
}

#[inline]
pub fn reludown_scalar(x: f64, d: f64) -> f64 {
    if x >= 0.0 {
        x
    } else if x >= d {
        0.0
    } else {
        x - d
    }
}

/// Derivative multiplier; 1 is used at both kinks.
#[inline]
pub fn reludown_slope(x: f64, d: f64) -> f64 {
    if x >= 0.0 || x <= d {
        1.0
    } else {
        0.0
    }
}

pub fn reludown_forward(x: &Tensor, d: f64) -> Result<Tensor> {
    check_hinge(d)?;
    Ok(x.map(|v| reludown_scalar(v, d)))
}

pub fn reludown_backward(grad_out: &Tensor, cached_x: &Tensor, d: f64) -> Result<Tensor> {
    check_same(grad_out, cached_x)?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(cached_x.data()) {
        *gv *= reludown_slope(xv, d);
    }
    Ok(g)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 1 at zero.
pub fn relu_backward(grad_out: &Tensor, cached_x: &Tensor) -> Result<Tensor> {
    check_same(grad_out, cached_x)?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(cached_x.data()) {
        if xv < 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

pub fn tanh_forward(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Uses the cached output: `dy/dx = 1 − y²`.
pub fn tanh_backward(grad_out: &Tensor, cached_y: &Tensor) -> Result<Tensor> {
    check_same(grad_out, cached_y)?;
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(cached_y.data()) {
        *gv *= 1.0 - yv * yv;
    }
    Ok(g)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "activation backward: grad {:?} vs cache {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Trainable Padé coefficients for one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct PauParams {
    /// `a_0..a_5`, lowest degree first.
    pub numerator: [f64; PAU_NUM_DEGREE + 1],
    /// `b_1..b_4`; the constant term of the denominator is fixed at 1.
    pub denominator: [f64; PAU_DEN_DEGREE],
    pub grad_numerator: [f64; PAU_NUM_DEGREE + 1],
    pub grad_denominator: [f64; PAU_DEN_DEGREE],
    pub trainable: bool,
}

struct PauEval {
    p: f64,
    q: f64,
    dp: f64,
    dq: f64,
}

impl PauParams {
    pub fn new(numerator: [f64; 6], denominator: [f64; 4]) -> Self {
        PauParams {
            numerator,
            denominator,
            grad_numerator: [0.0; 6],
            grad_denominator: [0.0; 4],
            trainable: true,
        }
    }

    #[inline]
    fn eval(&self, x: f64) -> PauEval {
        self.eval_on_side(x, x >= 0.0)
    }

    /// Evaluation with `|x|` replaced by `±x`, the smooth branch of the
    /// denominator on the given side of zero.
    #[inline]
    fn eval_on_side(&self, x: f64, positive: bool) -> PauEval {
        let a = &self.numerator;
        let p = a[0] + x * (a[1] + x * (a[2] + x * (a[3] + x * (a[4] + x * a[5]))));
        let dp = a[1] + x * (2.0 * a[2] + x * (3.0 * a[3] + x * (4.0 * a[4] + x * 5.0 * a[5])));
        let ax = if positive { x } else { -x };
        let b: [f64; 4] = self.denominator.map(f64::abs);
        let q = 1.0 + ax * (b[0] + ax * (b[1] + ax * (b[2] + ax * b[3])));
        let dq_abs = b[0] + ax * (2.0 * b[1] + ax * (3.0 * b[2] + ax * 4.0 * b[3]));
        let dq = if positive { dq_abs } else { -dq_abs };
        PauEval { p, q, dp, dq }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let e = self.eval(x);
        e.p / e.q
    }

    /// The denominator as evaluated; at least 1 for every finite input.
    pub fn denominator_at(&self, x: f64) -> f64 {
        self.eval(x).q
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.value(v))
    }

    /// Returns the input gradient and overwrites the coefficient gradients
    /// with their sums over every element of the batch.
    pub fn backward(&mut self, grad_out: &Tensor, cached_x: &Tensor) -> Result<Tensor> {
        check_same(grad_out, cached_x)?;
        let mut gn = [0.0; 6];
        let mut gd = [0.0; 4];
        let signs = self.denominator.map(|b| if b < 0.0 { -1.0 } else { 1.0 });
        let mut gx = grad_out.clone();
        for (g, &x) in gx.data_mut().iter_mut().zip(cached_x.data()) {
            let go = *g;
            let e = self.eval(x);
            let inv_q = 1.0 / e.q;
            let y = e.p * inv_q;
            *g = go * (e.dp - y * e.dq) * inv_q;
            if go != 0.0 {
                let mut xp = go * inv_q;
                for c in gn.iter_mut() {
                    *c += xp;
                    xp *= x;
                }
                let ax = x.abs();
                let mut axp = -go * y * inv_q * ax;
                for (j, c) in gd.iter_mut().enumerate() {
                    *c += axp * signs[j];
                    axp *= ax;
                }
            }
        }
        self.grad_numerator = gn;
        self.grad_denominator = gd;
        Ok(gx)
    }

    pub fn all_finite(&self) -> bool {
        self.numerator.iter().chain(&self.denominator).all(|v| v.is_finite())
    }
}

/// Fit PAU coefficients so that `P/Q ≈ max(0, x)` on an even grid.
///
/// A linearized least-squares solve (`P − t·(Q − 1) = t`) gives the start
/// point, then damped Gauss–Newton iterations minimize the true residual
/// `P/Q − t`. No randomness is involved.
pub fn pau_init_relu(grid_lo: f64, grid_hi: f64, n_points: usize) -> PauParams {
    let xs: Vec<f64> = (0..n_points)
        .map(|i| grid_lo + (grid_hi - grid_lo) * i as f64 / (n_points - 1).max(1) as f64)
        .collect();
    let ts: Vec<f64> = xs.iter().map(|&x| x.max(0.0)).collect();

    let rows = xs.len();
    let mut design = DMatrix::<f64>::zeros(rows, 10);
    let mut rhs = DVector::<f64>::zeros(rows);
    for (r, (&x, &t)) in xs.iter().zip(&ts).enumerate() {
        let mut xp = 1.0;
        for c in 0..6 {
            design[(r, c)] = xp;
            xp *= x;
        }
        let ax = x.abs();
        let mut axp = ax;
        for c in 0..4 {
            design[(r, 6 + c)] = -t * axp;
            axp *= ax;
        }
        rhs[r] = t;
    }
    let theta = solve_normal_equations(&design, &rhs, 0.0);
    let mut params = PauParams::new(
        std::array::from_fn(|i| theta[i]),
        std::array::from_fn(|j| theta[6 + j]),
    );

    let sse = |p: &PauParams| -> f64 {
        xs.iter()
            .zip(&ts)
            .map(|(&x, &t)| (p.value(x) - t).powi(2))
            .sum()
    };
    let mut current = sse(&params);
    let mut damping = 1e-6;
    for _ in 0..200 {
        let mut jac = DMatrix::<f64>::zeros(rows, 10);
        let mut res = DVector::<f64>::zeros(rows);
        for (r, (&x, &t)) in xs.iter().zip(&ts).enumerate() {
            let e = params.eval(x);
            let y = e.p / e.q;
            res[r] = t - y;
            let mut xp = 1.0 / e.q;
            for c in 0..6 {
                jac[(r, c)] = xp;
                xp *= x;
            }
            let ax = x.abs();
            let mut axp = -y / e.q * ax;
            for j in 0..4 {
                let s = if params.denominator[j] < 0.0 { -1.0 } else { 1.0 };
                jac[(r, 6 + j)] = axp * s;
                axp *= ax;
            }
        }
        let step = solve_normal_equations(&jac, &res, damping);
        let mut trial = params.clone();
        for i in 0..6 {
            trial.numerator[i] += step[i];
        }
        for j in 0..4 {
            trial.denominator[j] += step[6 + j];
        }
        let e = sse(&trial);
        if e.is_finite() && e < current {
            let improvement = current - e;
            params = trial;
            current = e;
            damping = (damping * 0.3).max(1e-12);
            if improvement < 1e-14 * (1.0 + current) {
                break;
            }
        } else {
            damping *= 10.0;
            if damping > 1e6 {
                break;
            }
        }
    }
    params
}

/// Solve `(AᵀA + λI) θ = Aᵀb` by Cholesky; retries with a 1e-8 ridge if singular.
fn solve_normal_equations(a: &DMatrix<f64>, b: &DVector<f64>, damping: f64) -> DVector<f64> {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let n = ata.nrows();
    let damped = if damping > 0.0 {
        &ata + DMatrix::<f64>::from_diagonal(&ata.diagonal().map(|v| v * damping))
    } else {
        ata.clone()
    };
    if let Some(ch) = damped.clone().cholesky() {
        let sol = ch.solve(&atb);
        if sol.iter().all(|v| v.is_finite()) {
            return sol;
        }
    }
    warn!("normal equations singular; falling back to ridge-regularized solve (lambda=1e-8)");
    let ridge = damped + DMatrix::<f64>::identity(n, n) * 1e-8;
    match ridge.clone().cholesky() {
        Some(ch) => ch.solve(&atb),
        None => ridge
            .lu()
            .solve(&atb)
            .unwrap_or_else(|| DVector::zeros(n)),
    }
}

/// Activation instance at one site of a network.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Relu,
    Tanh,
    ReluDown { d: f64 },
    Pau(PauParams),
}

impl Activation {
    pub fn from_kind(kind: ActivationKind) -> Result<Self> {
        kind.validate()?;
        Ok(match kind {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::ReluDown { d } => Activation::ReluDown { d },
            ActivationKind::Pau => Activation::Pau(pau_init_relu(-3.0, 3.0, 1000)),
        })
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            Activation::Relu => ActivationKind::Relu,
            Activation::Tanh => ActivationKind::Tanh,
            Activation::ReluDown { d } => ActivationKind::ReluDown { d: *d },
            Activation::Pau(_) => ActivationKind::Pau,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Tanh => tanh_forward(x),
            Activation::ReluDown { d } => x.map(|v| reludown_scalar(v, *d)),
            Activation::Pau(p) => p.forward(x),
        }
    }

    /// The activation as if `x` lay in `region`: the branch chosen there,
    /// continued smoothly past its boundaries.
    pub fn value_in_region(&self, x: f64, region: u8) -> f64 {
        match self {
            Activation::Relu => {
                if region == 1 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::ReluDown { d } => match region {
                2 => x,
                1 => 0.0,
                _ => x - d,
            },
            Activation::Pau(p) => {
                let e = p.eval_on_side(x, region == 1);
                e.p / e.q
            }
        }
    }

    /// Piecewise region of `x`; a change of region between two nearby inputs
    /// means a kink was crossed.
    pub fn region(&self, x: f64) -> u8 {
        match self {
            Activation::Relu => u8::from(x >= 0.0),
            Activation::Tanh => 0,
            Activation::ReluDown { d } => {
                if x >= 0.0 {
                    2
                } else if x >= *d {
                    1
                } else {
                    0
                }
            }
            Activation::Pau(_) => u8::from(x >= 0.0),
        }
    }
}

/// An activation plus the forward cache its backward pass needs.
#[derive(Debug, Clone)]
pub struct ActivationLayer {
    pub activation: Activation,
    cached_input: Option<Tensor>,
    cached_output: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(activation: Activation) -> Self {
        ActivationLayer {
            activation,
            cached_input: None,
            cached_output: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.activation.apply(x)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.activation.apply(x);
        self.cached_input = Some(x.clone());
        self.cached_output = Some(y.clone());
        y
    }

    /// Post-activation output of the most recent training forward.
    pub fn last_output(&self) -> Option<&Tensor> {
        self.cached_output.as_ref()
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
        // The output stays cached for utility tracking after the step.
        let y = self.cached_output.as_ref().expect("cached with input");
        match &mut self.activation {
            Activation::Relu => relu_backward(grad_out, &x),
            Activation::Tanh => tanh_backward(grad_out, y),
            Activation::ReluDown { d } => reludown_backward(grad_out, &x, *d),
            Activation::Pau(p) => p.backward(grad_out, &x),
        }
    }
}
