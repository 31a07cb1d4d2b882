//! Deep unconstrained feature models: parameter stacks, forward passes,
//! losses and gradients.
//!
//! A stack holds `H_1` (d x K), interior weights `W_1..W_{L-1}` (d x d) and the
//! classifier `W_L` (K x d). Everything is indexed so that slot 0 is `H_1` and
//! slot `l` is `W_l`; with that convention `W_0 = H_1` and the output is
//! `Z = W_L ... W_1 H_1` for the linear model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DufmError, Result};
use crate::linalg::{ensure_finite, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStack {
    k: usize,
    d: usize,
    mats: Vec<Matrix>,
}

impl ParamStack {
    /// `mats[0] = H_1`, `mats[l] = W_l`; `L = mats.len() - 1`.
    pub fn new(k: usize, d: usize, mats: Vec<Matrix>) -> Result<Self> {
        if k < 1 {
            return Err(DufmError::dim("K must be at least 1"));
        }
        if d < k {
            return Err(DufmError::dim(format!("width d={d} is smaller than K={k}")));
        }
        if mats.len() < 2 {
            return Err(DufmError::dim("a stack needs H_1 and at least one weight matrix"));
        }
        let l = mats.len() - 1;
        for (i, m) in mats.iter().enumerate() {
            let want = Self::expected_shape(k, d, l, i);
            if m.shape() != want {
                return Err(DufmError::dim(format!(
                    "slot {i} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
            ensure_finite(m, "parameter stack")?;
        }
        Ok(ParamStack { k, d, mats })
    }

    pub fn zeros(k: usize, d: usize, l: usize) -> Result<Self> {
        if l < 1 {
            return Err(DufmError::dim("L must be at least 1"));
        }
        let mats = (0..=l)
            .map(|i| {
                let (r, c) = Self::expected_shape(k, d, l, i);
                Matrix::zeros(r, c)
            })
            .collect();
        Self::new(k, d, mats)
    }

    pub fn expected_shape(k: usize, d: usize, l: usize, slot: usize) -> (usize, usize) {
        if slot == 0 {
            (d, k)
        } else if slot == l {
            (k, d)
        } else {
            (d, d)
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of weight matrices `L`.
    pub fn depth(&self) -> usize {
        self.mats.len() - 1
    }

    pub fn h1(&self) -> &Matrix {
        &self.mats[0]
    }

    /// `W_l` for `1 <= l <= L`; `w(0)` is `H_1`.
    pub fn w(&self, l: usize) -> &Matrix {
        &self.mats[l]
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn into_mats(self) -> Vec<Matrix> {
        self.mats
    }

    pub fn param_count(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm_squared()).sum()
    }

    /// `self + step * dir`, slot by slot.
    pub fn axpy(&self, step: f64, dir: &[Matrix]) -> Result<Self> {
        if dir.len() != self.mats.len() {
            return Err(DufmError::dim("direction has a different number of slots"));
        }
        let mats = self
            .mats
            .iter()
            .zip(dir)
            .map(|(m, g)| {
                if m.shape() != g.shape() {
                    Err(DufmError::dim("direction slot shape mismatch"))
                } else {
                    Ok(m + g * step)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.k, self.d, mats)
    }
}

/// Entrywise nonlinearity used by the MSE model.
#[derive(Clone, Debug)]
pub enum Activation {
    Relu,
    Identity,
    /// `x -> x^p` for an integer `p >= 1`.
    HadamardPower(u32),
    Custom {
        name: String,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Activation::Relu, Activation::Relu) => true,
            (Activation::Identity, Activation::Identity) => true,
            (Activation::HadamardPower(a), Activation::HadamardPower(b)) => a == b,
            (Activation::Custom { name: a, .. }, Activation::Custom { name: b, .. }) => a == b,
            _ => false,
        }
    }
}

impl Activation {
    pub fn hadamard(p: u32) -> Result<Self> {
        if p < 1 {
            return Err(DufmError::param("Hadamard power must be at least 1"));
        }
        Ok(Activation::HadamardPower(p))
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::HadamardPower(p) => x.powi(*p as i32),
            Activation::Custom { f, .. } => f(x),
        }
    }

    /// Derivative, with the convention `relu'(0) = 0`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::HadamardPower(p) => f64::from(*p) * x.powi(*p as i32 - 1),
            Activation::Custom { df, .. } => df(x),
        }
    }

    pub fn map(&self, m: &Matrix) -> Matrix {
        m.map(|x| self.apply(x))
    }

    pub fn map_derivative(&self, m: &Matrix) -> Matrix {
        m.map(|x| self.derivative(x))
    }

    pub fn tag(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Identity => "identity".into(),
            Activation::HadamardPower(p) => format!("hadamard{p}"),
            Activation::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            "square" => Ok(Activation::HadamardPower(2)),
            _ => {
                if let Some(p) = s.strip_prefix("hadamard") {
                    let p: u32 = p
                        .parse()
                        .map_err(|_| DufmError::param(format!("bad Hadamard power in '{s}'")))?;
                    Activation::hadamard(p)
                } else {
                    Err(DufmError::param(format!("unknown activation '{s}'")))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    LinearCe,
    ReluCe,
    MseMinNonlinear(Activation),
}

impl ModelKind {
    pub fn tag(&self) -> String {
        match self {
            ModelKind::LinearCe => "linear-ce".into(),
            ModelKind::ReluCe => "relu-ce".into(),
            ModelKind::MseMinNonlinear(a) => format!("mse-{}", a.tag()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear-ce" => Ok(ModelKind::LinearCe),
            "relu-ce" => Ok(ModelKind::ReluCe),
            _ => match s.strip_prefix("mse-") {
                Some(a) => Ok(ModelKind::MseMinNonlinear(Activation::parse(a)?)),
                None => Err(DufmError::param(format!("unknown model kind '{s}'"))),
            },
        }
    }

    pub fn is_cross_entropy(&self) -> bool {
        !matches!(self, ModelKind::MseMinNonlinear(_))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Regularization strength as a function of depth for sweeps over `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "c", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `lambda = c`
    Fixed(f64),
    /// `lambda = c / L^2`
    InvSquare(f64),
    /// `lambda = c / sqrt(L)`, so `1/lambda` grows like `sqrt(L)`
    SqrtGrowth(f64),
}

impl LambdaSchedule {
    pub fn at(&self, l: usize) -> f64 {
        let lf = l as f64;
        match *self {
            LambdaSchedule::Fixed(c) => c,
            LambdaSchedule::InvSquare(c) => c / (lf * lf),
            LambdaSchedule::SqrtGrowth(c) => c / lf.sqrt(),
        }
    }

    pub fn parse(name: &str, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(DufmError::param("schedule constant must be positive"));
        }
        match name {
            "fixed" => Ok(LambdaSchedule::Fixed(c)),
            "inv_square" => Ok(LambdaSchedule::InvSquare(c)),
            "sqrt_growth" => Ok(LambdaSchedule::SqrtGrowth(c)),
            _ => Err(DufmError::param(format!("unknown lambda schedule '{name}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda: f64,
    pub schedule: Option<LambdaSchedule>,
}

impl HyperParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DufmError::param(format!("lambda must be positive, got {lambda}")));
        }
        Ok(HyperParams { lambda, schedule: None })
    }

    pub fn scheduled(schedule: LambdaSchedule, l: usize) -> Result<Self> {
        let mut hp = Self::new(schedule.at(l))?;
        hp.schedule = Some(schedule);
        Ok(hp)
    }
}

/// Pre-activations `H_1..H_{L+1}` and post-activations `Lambda_1..Lambda_L`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("trace has an output")
    }

    /// `H_l` for `1 <= l <= L+1`.
    pub fn h(&self, l: usize) -> &Matrix {
        &self.pre[l - 1]
    }

    /// `Lambda_l` for `1 <= l <= L`.
    pub fn lambda(&self, l: usize) -> &Matrix {
        &self.post[l - 1]
    }

    pub fn depth(&self) -> usize {
        self.post.len()
    }
}

/// Which activation (if any) acts on `H_l`, for `1 <= l <= L`.
fn layer_activation(kind: &ModelKind, l: usize, depth: usize) -> Option<&Activation> {
    const RELU: Activation = Activation::Relu;
    match kind {
        ModelKind::LinearCe => None,
        // H_1 is a free feature matrix; ReLU acts from H_2 on
        ModelKind::ReluCe => (l >= 2).then_some(&RELU),
        ModelKind::MseMinNonlinear(a) => (l == depth).then_some(a),
    }
}

pub fn forward(params: &ParamStack, kind: &ModelKind) -> ForwardTrace {
    let depth = params.depth();
    let mut pre = Vec::with_capacity(depth + 1);
    let mut post = Vec::with_capacity(depth);
    pre.push(params.h1().clone());
    for l in 1..=depth {
        let h = &pre[l - 1];
        let act = match layer_activation(kind, l, depth) {
            Some(a) => a.map(h),
            None => h.clone(),
        };
        let next = params.w(l) * &act;
        post.push(act);
        pre.push(next);
    }
    ForwardTrace { pre, post }
}

pub fn output(params: &ParamStack, kind: &ModelKind) -> Matrix {
    forward(params, kind).output().clone()
}

fn require_square(z: &Matrix, what: &str) -> Result<()> {
    if z.nrows() != z.ncols() || z.nrows() == 0 {
        return Err(DufmError::dim(format!(
            "{what} needs a nonempty square matrix, got {:?}",
            z.shape()
        )));
    }
    Ok(())
}

/// `logsumexp(Z[:, c]) - Z[c, c]`, i.e. `-log softmax(Z[:, c])[c]`.
fn column_cross_entropy(z: &Matrix, c: usize) -> f64 {
    let col = z.column(c);
    let m = col.max();
    let zc = z[(c, c)];
    if zc >= m {
        // keep precision when the target logit dominates
        let rest: f64 = col
            .iter()
            .enumerate()
            .filter(|(r, _)| *r != c)
            .map(|(_, x)| (x - zc).exp())
            .sum();
        rest.ln_1p()
    } else {
        m - zc + col.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }
}

/// `g(Z) = sum_c [logsumexp(Z[:, c]) - Z[c, c]]`.
pub fn fit_term_ce(z: &Matrix) -> Result<f64> {
    require_square(z, "fit_term_ce")?;
    ensure_finite(z, "fit_term_ce")?;
    Ok((0..z.ncols()).map(|c| column_cross_entropy(z, c)).sum())
}

/// Column softmax `P` and error matrix `M = P - I`.
pub fn probability_error(z: &Matrix) -> Result<(Matrix, Matrix)> {
    require_square(z, "probability_error")?;
    ensure_finite(z, "probability_error")?;
    let k = z.nrows();
    let mut p = Matrix::zeros(k, k);
    for c in 0..k {
        let col = z.column(c);
        let m = col.max();
        let e: Vec<f64> = col.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (r, v) in e.iter().enumerate() {
            p[(r, c)] = v / s;
        }
    }
    let m = &p - Matrix::identity(k, k);
    Ok((p, m))
}

pub fn regularization(params: &ParamStack, lambda: f64) -> f64 {
    0.5 * lambda * params.squared_norm()
}

/// Data term of the loss: `g(Z)/K` for cross-entropy, `||Z - I||^2 / (2K)` for MSE.
pub fn fit_term(z: &Matrix, kind: &ModelKind) -> Result<f64> {
    let k = z.nrows() as f64;
    if kind.is_cross_entropy() {
        Ok(fit_term_ce(z)? / k)
    } else {
        require_square(z, "mse fit")?;
        let resid = z - Matrix::identity(z.nrows(), z.ncols());
        Ok(resid.norm_squared() / (2.0 * k))
    }
}

pub fn loss(params: &ParamStack, kind: &ModelKind, hp: &HyperParams) -> Result<f64> {
    let z = output(params, kind);
    Ok(fit_term(&z, kind)? + regularization(params, hp.lambda))
}

/// Gradient of the loss with respect to every slot, indexed like the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub mats: Vec<Matrix>,
}

impl Gradients {
    pub fn max_norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }

    pub fn total_norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }

    /// Largest slot-wise `||a - b||_F / max(||a||_F, ||b||_F, floor)`.
    pub fn relative_error(&self, other: &Gradients, floor: f64) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| (a - b).norm() / a.norm().max(b.norm()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// `a[l] = A_{l+1} = W_L ... W_{l+1}` (with `A_{L+1} = I_K`) and
/// `b[l] = B_{l-1} = W_{l-1} ... W_1 H_1` (with `B_{-1} = I_K`), for `0 <= l <= L`.
pub(crate) fn chain_products(params: &ParamStack) -> (Vec<Matrix>, Vec<Matrix>) {
    let depth = params.depth();
    let k = params.k();
    let mut a = vec![Matrix::identity(k, k); depth + 1];
    for l in (0..depth).rev() {
        a[l] = &a[l + 1] * params.w(l + 1);
    }
    let mut b = vec![Matrix::identity(k, k); depth + 1];
    for l in 1..=depth {
        b[l] = params.w(l - 1) * &b[l - 1];
    }
    (a, b)
}

/// Closed-form gradients of the linear cross-entropy model:
/// `dL/dW_l = (1/K) A_{l+1}^T M B_{l-1}^T + lambda W_l`.
pub fn analytic_gradients(params: &ParamStack, kind: &ModelKind, hp: &HyperParams) -> Result<Gradients> {
    if *kind != ModelKind::LinearCe {
        return Err(DufmError::UnsupportedKind {
            op: "analytic_gradients",
            kind: kind.tag(),
        });
    }
    let (a, b) = chain_products(params);
    let z = &a[0] * params.h1();
    let (_, m) = probability_error(&z)?;
    let inv_k = 1.0 / params.k() as f64;
    let mats = (0..=params.depth())
        .map(|l| (a[l].transpose() * &m * b[l].transpose()) * inv_k + params.w(l) * hp.lambda)
        .collect();
    Ok(Gradients { mats })
}

/// Reverse-mode gradients for every model kind.
pub fn backprop_gradients(params: &ParamStack, kind: &ModelKind, hp: &HyperParams) -> Result<Gradients> {
    let depth = params.depth();
    let k = params.k();
    let trace = forward(params, kind);
    let z = trace.output();
    let mut delta = if kind.is_cross_entropy() {
        probability_error(z)?.1 / k as f64
    } else {
        ensure_finite(z, "backprop")?;
        (z - Matrix::identity(k, k)) / k as f64
    };
    let mut mats = vec![Matrix::zeros(0, 0); depth + 1];
    for l in (1..=depth).rev() {
        mats[l] = &delta * trace.lambda(l).transpose() + params.w(l) * hp.lambda;
        let mut d_post = params.w(l).transpose() * &delta;
        if let Some(act) = layer_activation(kind, l, depth) {
            d_post.component_mul_assign(&act.map_derivative(trace.h(l)));
        }
        delta = d_post;
    }
    mats[0] = delta + params.h1() * hp.lambda;
    Ok(Gradients { mats })
}

/// Default central-difference step for an entry of size `x`.
pub fn default_fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Central differences of [`loss`]; the step for entry `x` is `step * (1 + |x|)`.
pub fn finite_difference_gradients(
    params: &ParamStack,
    kind: &ModelKind,
    hp: &HyperParams,
    step: f64,
) -> Result<Gradients> {
    if step.is_nan() || step <= 0.0 {
        return Err(DufmError::param("finite-difference step must be positive"));
    }
    let k = params.k();
    let d = params.d();
    let mut work = params.mats().to_vec();
    let mut grads = Vec::with_capacity(work.len());
    for slot in 0..work.len() {
        let mut g = Matrix::zeros(work[slot].nrows(), work[slot].ncols());
        for idx in 0..g.len() {
            let x = work[slot][idx];
            let h = step * (1.0 + x.abs());
            work[slot][idx] = x + h;
            let up = loss_of_slots(k, d, &work, kind, hp)?;
            work[slot][idx] = x - h;
            let down = loss_of_slots(k, d, &work, kind, hp)?;
            work[slot][idx] = x;
            g[idx] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(Gradients { mats: grads })
}

fn loss_of_slots(k: usize, d: usize, mats: &[Matrix], kind: &ModelKind, hp: &HyperParams) -> Result<f64> {
    let stack = ParamStack {
        k,
        d,
        mats: mats.to_vec(),
    };
    loss(&stack, kind, hp)
}
