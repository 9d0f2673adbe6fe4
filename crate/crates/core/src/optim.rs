//! Optimizers: MuSGD (Muon + Nesterov SGD), AdamW, the automatic selection
//! rule, a cosine schedule with warm restarts, and small convex problems to
//! watch them converge.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("Newton-Schulz input is the zero matrix")]
    ZeroMatrix,
    #[error("tensor of rank {0} is not a matrix")]
    NotTwoDimensional(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("loss diverged to {loss} at step {step}")]
    DivergedLoss { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Dense row-major tensor of any rank. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(OptimError::InvalidInput(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(rows, cols)` of the matrix view: first axis by the product of the rest.
    fn matrix_dims(&self) -> Result<(usize, usize)> {
        if self.rank() < 2 {
            return Err(OptimError::NotTwoDimensional(self.rank()));
        }
        Ok((self.shape[0], self.shape[1..].iter().product()))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(OptimError::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    MuSgd,
    AdamW,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::MuSgd => "MuSGD",
            OptimizerKind::AdamW => "AdamW",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerChoice {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: u64,
}

/// Iteration budget above which MuSGD is chosen.
pub const MUSGD_ITERATION_THRESHOLD: u64 = 10_000;

/// Automatic optimizer selection from the training budget.
///
/// `I = epochs × ⌈n_train / batch⌉`; MuSGD with lr 0.01 when `I > 10 000`,
/// otherwise AdamW with lr `0.01 / (4 + n_classes)`. Momentum is 0.9 either way.
pub fn select_optimizer(
    epochs: u64,
    n_train: u64,
    batch: u64,
    n_classes: u64,
) -> Result<OptimizerChoice> {
    if epochs == 0 || n_train == 0 || batch == 0 || n_classes == 0 {
        return Err(OptimError::InvalidInput(
            "epochs, n_train, batch and n_classes must be positive".into(),
        ));
    }
    let iterations = epochs * n_train.div_ceil(batch);
    let (kind, learning_rate) = if iterations > MUSGD_ITERATION_THRESHOLD {
        (OptimizerKind::MuSgd, 0.01)
    } else {
        (OptimizerKind::AdamW, 0.01 / (4.0 + n_classes as f64))
    };
    Ok(OptimizerChoice {
        kind,
        learning_rate,
        momentum: 0.9,
        iterations,
    })
}

/// Quintic Newton–Schulz coefficients `(a, b, c)`.
pub const NS_COEFFICIENTS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aip * b[p * m + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Approximate the orthogonal polar factor `UVᵀ` of `G = UΣVᵀ`.
///
/// `G` is scaled to unit Frobenius norm, then `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`
/// is applied `iters` times. Tall inputs are processed transposed so that
/// `XXᵀ` is the smaller Gram matrix. Tensors of rank > 2 are flattened to
/// `shape[0] × rest`. Singular vectors are preserved exactly; each singular
/// value follows the scalar map `σ ↦ aσ + bσ³ + cσ⁵` from `σ/‖G‖_F`.
pub fn newton_schulz(g: &Tensor, iters: usize) -> Result<Tensor> {
    let (rows, cols) = g.matrix_dims()?;
    let norm = g.frobenius_norm();
    if norm == 0.0 {
        return Err(OptimError::ZeroMatrix);
    }
    let tall = rows > cols;
    let (n, m) = if tall { (cols, rows) } else { (rows, cols) };
    let mut x: Vec<f64> = if tall {
        transpose(&g.data, rows, cols)
    } else {
        g.data.clone()
    };
    for v in &mut x {
        *v /= norm;
    }
    let (a, b, c) = NS_COEFFICIENTS;
    for _ in 0..iters {
        let xt = transpose(&x, n, m);
        let gram = matmul(&x, &xt, n, m, n);
        let gram2 = matmul(&gram, &gram, n, n, n);
        let poly: Vec<f64> = gram
            .iter()
            .zip(&gram2)
            .map(|(g1, g2)| b * g1 + c * g2)
            .collect();
        let px = matmul(&poly, &x, n, n, m);
        x = x.iter().zip(&px).map(|(xi, pi)| a * xi + pi).collect();
    }
    let data = if tall { transpose(&x, n, m) } else { x };
    Ok(Tensor {
        shape: g.shape.clone(),
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuSgdConfig {
    pub w_muon: f64,
    pub w_sgd: f64,
    pub ns_iters: usize,
}

impl Default for MuSgdConfig {
    fn default() -> Self {
        Self {
            w_muon: 0.2,
            w_sgd: 1.0,
            ns_iters: 5,
        }
    }
}

/// Per-parameter momentum buffers for the two MuSGD branches.
#[derive(Debug, Clone, PartialEq)]
pub struct MuSgdState {
    pub config: MuSgdConfig,
    pub muon_buffers: Vec<Tensor>,
    pub sgd_buffers: Vec<Tensor>,
}

impl MuSgdState {
    pub fn new(params: &[Tensor], config: MuSgdConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self {
            config,
            muon_buffers: zeros.clone(),
            sgd_buffers: zeros,
        }
    }
}

/// Nesterov SGD direction: `buf ← μ·buf + g`, returns `g + μ·buf`.
fn nesterov_direction(buf: &mut Tensor, grad: &Tensor, momentum: f64) -> Vec<f64> {
    for (b, g) in buf.data.iter_mut().zip(&grad.data) {
        *b = momentum * *b + g;
    }
    grad.data
        .iter()
        .zip(&buf.data)
        .map(|(g, b)| g + momentum * b)
        .collect()
}

/// One MuSGD step.
///
/// Matrices (rank ≥ 2) get `p ← p − lr·(w_muon·NS(buf_muon) + w_sgd·d_sgd)`
/// where `buf_muon ← μ·buf_muon + g` and `d_sgd` is the Nesterov direction.
/// Scalars and vectors take the SGD branch alone.
pub fn musgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut MuSgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.sgd_buffers.len() {
        return Err(OptimError::InvalidInput(format!(
            "{} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.sgd_buffers.len()
        )));
    }
    let cfg = state.config.clone();
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        check_same_shape(param, grad)?;
        check_same_shape(param, &state.sgd_buffers[i])?;
        let sgd = nesterov_direction(&mut state.sgd_buffers[i], grad, momentum);
        if param.rank() >= 2 && cfg.w_muon != 0.0 {
            let buf = &mut state.muon_buffers[i];
            for (b, g) in buf.data.iter_mut().zip(&grad.data) {
                *b = momentum * *b + g;
            }
            let muon = match newton_schulz(buf, cfg.ns_iters) {
                Ok(t) => t.data,
                Err(OptimError::ZeroMatrix) => vec![0.0; buf.data.len()],
                Err(e) => return Err(e),
            };
            for ((p, m), s) in param.data.iter_mut().zip(&muon).zip(&sgd) {
                *p -= lr * (cfg.w_muon * m + cfg.w_sgd * s);
            }
        } else {
            for (p, s) in param.data.iter_mut().zip(&sgd) {
                *p -= lr * (cfg.w_sgd * s);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// AdamW with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·λ·p`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(OptimError::InvalidInput(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (param, grad) in params.iter().zip(grads) {
        check_same_shape(param, grad)?;
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bias1 = 1.0 - beta1.powf(state.step as f64);
    let bias2 = 1.0 - beta2.powf(state.step as f64);
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i].data;
        let v = &mut state.second_moment[i].data;
        for j in 0..param.data.len() {
            let g = grad.data[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            let p = param.data[j];
            param.data[j] = p - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * p;
        }
    }
    Ok(())
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    MuSgd {
        state: MuSgdState,
        lr: f64,
        momentum: f64,
    },
    AdamW {
        state: AdamWState,
        lr: f64,
    },
}

impl Optimizer {
    pub fn musgd(params: &[Tensor], lr: f64, momentum: f64) -> Self {
        Optimizer::MuSgd {
            state: MuSgdState::new(params, MuSgdConfig::default()),
            lr,
            momentum,
        }
    }

    pub fn adamw(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        Optimizer::AdamW {
            state: AdamWState::new(
                params,
                AdamWConfig {
                    weight_decay,
                    ..AdamWConfig::default()
                },
            ),
            lr,
        }
    }

    pub fn from_choice(choice: &OptimizerChoice, params: &[Tensor], weight_decay: f64) -> Self {
        match choice.kind {
            OptimizerKind::MuSgd => Self::musgd(params, choice.learning_rate, choice.momentum),
            OptimizerKind::AdamW => Self::adamw(params, choice.learning_rate, weight_decay),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::MuSgd { .. } => OptimizerKind::MuSgd,
            Optimizer::AdamW { .. } => OptimizerKind::AdamW,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::MuSgd {
                state,
                lr,
                momentum,
            } => musgd_step(params, grads, state, *lr, *momentum),
            Optimizer::AdamW { state, lr } => adamw_step(params, grads, state, *lr),
        }
    }
}

/// Cosine annealing with warm restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period_epochs: u64,
    /// Epochs at which `t` resets to zero.
    pub restart_epochs: Vec<u64>,
}

impl LrSchedule {
    pub fn new(
        lr_max: f64,
        lr_min: f64,
        period_epochs: u64,
        mut restart_epochs: Vec<u64>,
    ) -> Result<Self> {
        if !(lr_min >= 0.0 && lr_min <= lr_max) || period_epochs == 0 {
            return Err(OptimError::InvalidInput(format!(
                "need 0 <= lr_min <= lr_max and a positive period, got {lr_min}, {lr_max}, {period_epochs}"
            )));
        }
        restart_epochs.sort_unstable();
        restart_epochs.dedup();
        Ok(Self {
            lr_max,
            lr_min,
            period_epochs,
            restart_epochs,
        })
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        let last_restart = self
            .restart_epochs
            .iter()
            .copied()
            .filter(|&r| r <= epoch)
            .max()
            .unwrap_or(0);
        let t = (epoch - last_restart) as f64;
        let period = self.period_epochs as f64;
        let lr = self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t / period).cos());
        lr.clamp(self.lr_min, self.lr_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyProblem {
    QuadraticBowl,
    LeastSquares,
    Logistic,
}

impl std::str::FromStr for ToyProblem {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" | "quadratic-bowl" | "bowl" => Ok(ToyProblem::QuadraticBowl),
            "least-squares" | "lsq" => Ok(ToyProblem::LeastSquares),
            "logistic" => Ok(ToyProblem::Logistic),
            other => Err(OptimError::InvalidInput(format!(
                "unknown problem {other:?}"
            ))),
        }
    }
}

/// A differentiable objective over a fixed set of parameter tensors.
pub trait Objective {
    fn initial_params(&self) -> Vec<Tensor>;
    fn loss_and_grad(&self, params: &[Tensor]) -> (f64, Vec<Tensor>);
}

/// `½ Σ c_ij (W_ij − W*_ij)² + ½ Σ d_k (b_k − b*_k)²` with positive curvatures.
pub struct QuadraticBowl {
    curvature: Vec<Tensor>,
    optimum: Vec<Tensor>,
    start: Vec<Tensor>,
}

impl QuadraticBowl {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "quadratic-bowl");
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let shapes: [&[usize]; 2] = [&[4, 4], &[4]];
        let mut make = |f: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> f64| {
            shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    Tensor::new(s.to_vec(), (0..n).map(|_| f(&mut rng)).collect()).expect("shape")
                })
                .collect::<Vec<_>>()
        };
        let curvature = make(&mut |r| r.random_range(0.5..2.0));
        let optimum = make(&mut |r| normal.sample(r));
        let start = make(&mut |r| normal.sample(r));
        Self {
            curvature,
            optimum,
            start,
        }
    }
}

impl Objective for QuadraticBowl {
    fn initial_params(&self) -> Vec<Tensor> {
        self.start.clone()
    }

    fn loss_and_grad(&self, params: &[Tensor]) -> (f64, Vec<Tensor>) {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(params.len());
        for ((p, c), o) in params.iter().zip(&self.curvature).zip(&self.optimum) {
            let mut g = Tensor::zeros(&p.shape);
            for j in 0..p.data.len() {
                let d = p.data[j] - o.data[j];
                loss += 0.5 * c.data[j] * d * d;
                g.data[j] = c.data[j] * d;
            }
            grads.push(g);
        }
        (loss, grads)
    }
}

/// Multi-output linear regression `Y ≈ X Wᵀ`, loss `‖XWᵀ − Y‖² / 2n`.
pub struct LeastSquares {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    outputs: usize,
    features: usize,
}

impl LeastSquares {
    pub fn new(seed: u64) -> Self {
        let (samples, features, outputs) = (64, 5, 3);
        let mut rng = rng::stream(seed, "least-squares");
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let truth: Vec<f64> = (0..outputs * features)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let mut inputs = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..features).map(|_| normal.sample(&mut rng)).collect();
            let y = (0..outputs)
                .map(|o| {
                    (0..features)
                        .map(|f| truth[o * features + f] * x[f])
                        .sum::<f64>()
                        + 0.01 * normal.sample(&mut rng)
                })
                .collect();
            inputs.push(x);
            targets.push(y);
        }
        Self {
            inputs,
            targets,
            outputs,
            features,
        }
    }
}

impl Objective for LeastSquares {
    fn initial_params(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[self.outputs, self.features])]
    }

    fn loss_and_grad(&self, params: &[Tensor]) -> (f64, Vec<Tensor>) {
        let w = &params[0];
        let n = self.inputs.len() as f64;
        let mut loss = 0.0;
        let mut g = Tensor::zeros(&w.shape);
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let rows = w.data.chunks(self.features);
            let grad_rows = g.data.chunks_mut(self.features);
            for ((row, grad), &target) in rows.zip(grad_rows).zip(y) {
                let pred: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                let r = pred - target;
                loss += 0.5 * r * r / n;
                for (gf, xf) in grad.iter_mut().zip(x) {
                    *gf += r * xf / n;
                }
            }
        }
        (loss, vec![g])
    }
}

/// Two Gaussian blobs, logistic regression with a `1×2` weight and a bias.
pub struct Logistic {
    points: Vec<[f64; 2]>,
    labels: Vec<f64>,
}

impl Logistic {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "logistic");
        let normal = Normal::new(0.0, 0.8).expect("valid normal");
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let (cx, cy, y) = if i % 2 == 0 {
                (-1.0, -1.0, 0.0)
            } else {
                (1.0, 1.0, 1.0)
            };
            points.push([cx + normal.sample(&mut rng), cy + normal.sample(&mut rng)]);
            labels.push(y);
        }
        Self { points, labels }
    }
}

impl Objective for Logistic {
    fn initial_params(&self) -> Vec<Tensor> {
        vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[1])]
    }

    fn loss_and_grad(&self, params: &[Tensor]) -> (f64, Vec<Tensor>) {
        let (w, b) = (&params[0].data, params[1].data[0]);
        let n = self.points.len() as f64;
        let mut loss = 0.0;
        let mut gw = Tensor::zeros(&[1, 2]);
        let mut gb = Tensor::zeros(&[1]);
        for (p, &y) in self.points.iter().zip(&self.labels) {
            let s = w[0] * p[0] + w[1] * p[1] + b;
            loss += (s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()) / n;
            let r = (crate::losses::sigmoid(s) - y) / n;
            gw.data[0] += r * p[0];
            gw.data[1] += r * p[1];
            gb.data[0] += r;
        }
        (loss, vec![gw, gb])
    }
}

pub fn toy_objective(problem: ToyProblem, seed: u64) -> Box<dyn Objective> {
    match problem {
        ToyProblem::QuadraticBowl => Box::new(QuadraticBowl::new(seed)),
        ToyProblem::LeastSquares => Box::new(LeastSquares::new(seed)),
        ToyProblem::Logistic => Box::new(Logistic::new(seed)),
    }
}

/// Loss curve threshold that counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Run `steps` optimizer steps and return the loss before each step plus the
/// final loss (`steps + 1` values).
pub fn toy_train(
    problem: ToyProblem,
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(OptimError::InvalidInput("steps must be at least 1".into()));
    }
    let objective = toy_objective(problem, seed);
    let mut params = objective.initial_params();
    let mut optimizer = match kind {
        OptimizerKind::MuSgd => Optimizer::musgd(&params, lr, 0.9),
        OptimizerKind::AdamW => Optimizer::adamw(&params, lr, 0.0),
    };
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = objective.loss_and_grad(&params);
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(OptimError::DivergedLoss { step, loss });
        }
        curve.push(loss);
        if step < steps {
            optimizer.step(&mut params, &grads)?;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_branches() {
        let big = select_optimizer(300, 2654, 16, 3).unwrap();
        assert_eq!(big.kind, OptimizerKind::MuSgd);
        assert_eq!(big.iterations, 49_800);
        assert_eq!(big.learning_rate, 0.01);
        let small = select_optimizer(300, 2654, 128, 3).unwrap();
        assert_eq!(small.kind, OptimizerKind::AdamW);
        assert_eq!(small.iterations, 6_300);
        assert!((small.learning_rate - 0.001429).abs() < 1e-6);
        // I = 100 × 100 = 10 000 exactly stays on AdamW.
        let edge = select_optimizer(100, 1000, 10, 3).unwrap();
        assert_eq!(edge.iterations, 10_000);
        assert_eq!(edge.kind, OptimizerKind::AdamW);
        assert!(select_optimizer(0, 1, 1, 1).is_err());
    }

    #[test]
    fn newton_schulz_errors() {
        assert_eq!(
            newton_schulz(&Tensor::zeros(&[2, 2]), 5),
            Err(OptimError::ZeroMatrix)
        );
        assert_eq!(
            newton_schulz(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 5),
            Err(OptimError::NotTwoDimensional(1))
        );
    }

    #[test]
    fn newton_schulz_rotation_is_recovered() {
        let th: f64 = 0.3;
        let q = [th.cos(), -th.sin(), th.sin(), th.cos()];
        let g = Tensor::matrix(2, 2, q.iter().map(|v| 2.5 * v).collect()).unwrap();
        let out = newton_schulz(&g, 5).unwrap();
        let dev = out
            .data
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 0.3, "{dev}");
    }

    #[test]
    fn newton_schulz_tall_matches_wide_transposed() {
        let wide = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 2.0]).unwrap();
        let tall = Tensor::matrix(3, 2, transpose(&wide.data, 2, 3)).unwrap();
        let a = newton_schulz(&wide, 5).unwrap();
        let b = newton_schulz(&tall, 5).unwrap();
        let bt = transpose(&b.data, 3, 2);
        for (x, y) in a.data.iter().zip(bt) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn musgd_zero_gradient_is_noop() {
        let mut params = vec![
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::scalar(0.5),
        ];
        let before = params.clone();
        let grads = vec![Tensor::zeros(&[2, 2]), Tensor::scalar(0.0)];
        let mut state = MuSgdState::new(&params, MuSgdConfig::default());
        musgd_step(&mut params, &grads, &mut state, 0.01, 0.9).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn musgd_vector_is_pure_nesterov() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap()];
        let grads = vec![Tensor::new(vec![3], vec![0.2, -0.4, 1.0]).unwrap()];
        let mut state = MuSgdState::new(&params, MuSgdConfig::default());
        let (lr, mu) = (0.1, 0.9);
        // Two steps from zero state: buf1 = g, d1 = g + μg; buf2 = μg + g, d2 = g + μ(μg + g).
        let mut expected = params[0].data.clone();
        for k in 0..2 {
            musgd_step(&mut params, &grads, &mut state, lr, mu).unwrap();
            for (e, g) in expected.iter_mut().zip(&grads[0].data) {
                let buf = if k == 0 { *g } else { mu * g + g };
                *e -= lr * (g + mu * buf);
            }
        }
        for (p, e) in params[0].data.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn musgd_matrix_recomposes() {
        let g = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let p0 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut params = vec![p0.clone()];
        let mut state = MuSgdState::new(&params, MuSgdConfig::default());
        let (lr, mu) = (0.05, 0.9);
        musgd_step(&mut params, std::slice::from_ref(&g), &mut state, lr, mu).unwrap();
        let ns = newton_schulz(&g, 5).unwrap();
        for j in 0..4 {
            let sgd = g.data[j] + mu * g.data[j];
            let want = p0.data[j] - lr * (0.2 * ns.data[j] + 1.0 * sgd);
            assert!((params[0].data[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn musgd_without_muon_is_sgd_bit_for_bit() {
        let g = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.1, 0.4, 1.5, -0.7]).unwrap();
        let p0 = Tensor::matrix(2, 3, vec![1.0, 0.25, -3.0, 0.5, 2.0, 0.125]).unwrap();
        let mut params = vec![p0.clone()];
        let cfg = MuSgdConfig {
            w_muon: 0.0,
            ..MuSgdConfig::default()
        };
        let mut state = MuSgdState::new(&params, cfg);
        let mut reference = p0.clone();
        let mut buf = Tensor::zeros(&[2, 3]);
        for _ in 0..5 {
            musgd_step(&mut params, std::slice::from_ref(&g), &mut state, 0.01, 0.9).unwrap();
            let d = nesterov_direction(&mut buf, &g, 0.9);
            for (p, s) in reference.data.iter_mut().zip(&d) {
                *p -= 0.01 * s;
            }
        }
        assert_eq!(params[0], reference);
    }

    #[test]
    fn adamw_cases() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamWState::new(&params, AdamWConfig::default());
        adamw_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.1).unwrap();
        assert_eq!(params[0].data[0], 1.0);

        let mut params = vec![Tensor::scalar(1.0)];
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(&params, cfg);
        adamw_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.1).unwrap();
        assert!((params[0].data[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_constant_gradient_closed_form() {
        // With a constant gradient the bias-corrected moments are exactly g
        // and g², so each step moves by lr·g/(|g| + eps) plus decay.
        let (g, lr, wd, eps) = (0.3, 0.01, 0.05, 1e-8);
        let mut params = vec![Tensor::scalar(2.0)];
        let cfg = AdamWConfig {
            weight_decay: wd,
            eps,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(&params, cfg);
        let mut expected: f64 = 2.0;
        for _ in 0..100 {
            adamw_step(&mut params, &[Tensor::scalar(g)], &mut state, lr).unwrap();
            expected = expected - lr * g / (g + eps) - lr * wd * expected;
            assert!((params[0].data[0] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut params = vec![Tensor::zeros(&[2, 2])];
        let mut a = AdamWState::new(&params, AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut params, &[Tensor::zeros(&[4])], &mut a, 0.1),
            Err(OptimError::ShapeMismatch(..))
        ));
        let mut m = MuSgdState::new(&params, MuSgdConfig::default());
        assert!(matches!(
            musgd_step(&mut params, &[Tensor::zeros(&[3, 2])], &mut m, 0.1, 0.9),
            Err(OptimError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(0.01, 0.0001, 100, vec![]).unwrap();
        assert_eq!(s.lr_at(0), 0.01);
        assert!((s.lr_at(50) - (0.01 + 0.0001) / 2.0).abs() < 1e-15);
        for e in 0..400 {
            let lr = s.lr_at(e);
            assert!((0.0001..=0.01).contains(&lr));
            assert!((lr - s.lr_at(e + 200)).abs() < 1e-15);
        }
        let r = LrSchedule::new(0.01, 0.0, 300, vec![112, 228]).unwrap();
        assert_eq!(r.lr_at(112), 0.01);
        assert_eq!(r.lr_at(228), 0.01);
        assert!(r.lr_at(111) < 0.01);
        assert!(LrSchedule::new(0.001, 0.01, 10, vec![]).is_err());
    }

    #[test]
    fn toy_problems_converge_and_repeat() {
        let curve = toy_train(
            ToyProblem::QuadraticBowl,
            OptimizerKind::MuSgd,
            0.01,
            200,
            42,
        )
        .unwrap();
        assert!(curve[200] < 0.1 * curve[0]);
        let again = toy_train(
            ToyProblem::QuadraticBowl,
            OptimizerKind::MuSgd,
            0.01,
            200,
            42,
        )
        .unwrap();
        assert_eq!(curve, again);
        let flat = toy_train(ToyProblem::LeastSquares, OptimizerKind::AdamW, 0.0, 20, 1).unwrap();
        assert!(flat.iter().all(|&v| v == flat[0]));
        for problem in [ToyProblem::LeastSquares, ToyProblem::Logistic] {
            for kind in [OptimizerKind::MuSgd, OptimizerKind::AdamW] {
                let c = toy_train(problem, kind, 0.01, 300, 7).unwrap();
                assert!(c[300] < c[0], "{problem:?} {kind:?}");
            }
        }
        assert!(toy_train(ToyProblem::Logistic, OptimizerKind::AdamW, 0.01, 0, 1).is_err());
    }

    // Each singular value follows the scalar quintic applied to σ/‖G‖_F.
    fn scalar_oracle(sigma: f64, norm: f64, iters: usize) -> f64 {
        let (a, b, c) = NS_COEFFICIENTS;
        let mut x = sigma / norm;
        for _ in 0..iters {
            x = a * x + b * x.powi(3) + c * x.powi(5);
        }
        x
    }

    #[test]
    fn newton_schulz_matches_svd_oracle() {
        use nalgebra::DMatrix;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..40 {
            let m = rng.random_range(1..=12);
            let n = rng.random_range(1..=12);
            let data: Vec<f64> = (0..m * n).map(|_| normal.sample(&mut rng)).collect();
            let g = Tensor::matrix(m, n, data.clone()).unwrap();
            let out = newton_schulz(&g, 5).unwrap();
            let norm = g.frobenius_norm();
            let mut want: Vec<f64> = DMatrix::from_row_slice(m, n, &data)
                .singular_values()
                .iter()
                .map(|&s| scalar_oracle(s, norm, 5).abs())
                .collect();
            let mut got: Vec<f64> = DMatrix::from_row_slice(m, n, &out.data)
                .singular_values()
                .iter()
                .copied()
                .collect();
            want.sort_by(f64::total_cmp);
            got.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{m}x{n}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn newton_schulz_rank3_flattens() {
        let g = Tensor::new(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let flat = Tensor::matrix(2, 4, g.data.clone()).unwrap();
        assert_eq!(
            newton_schulz(&g, 5).unwrap().data,
            newton_schulz(&flat, 5).unwrap().data
        );
    }

    proptest::proptest! {
        #[test]
        fn schedule_bounded_and_periodic(lr_max in 1e-4f64..1.0, frac in 0.0f64..1.0, period in 1u64..500, epoch in 0u64..5000) {
            let s = LrSchedule::new(lr_max, lr_max * frac, period, vec![]).unwrap();
            let lr = s.lr_at(epoch);
            proptest::prop_assert!(lr >= s.lr_min && lr <= s.lr_max);
            proptest::prop_assert!((lr - s.lr_at(epoch + 2 * period)).abs() <= 1e-12 * lr_max);
        }

        #[test]
        fn steps_are_deterministic(vals in proptest::collection::vec(-5.0f64..5.0, 12), lr in 1e-4f64..0.1) {
            let p0 = vec![Tensor::matrix(3, 4, vals.clone()).unwrap()];
            let g = vec![Tensor::matrix(3, 4, vals.iter().map(|v| v.sin()).collect()).unwrap()];
            for mut opt in [Optimizer::musgd(&p0, lr, 0.9), Optimizer::adamw(&p0, lr, 0.01)] {
                let mut twin = opt.clone();
                let (mut a, mut b) = (p0.clone(), p0.clone());
                for _ in 0..3 {
                    opt.step(&mut a, &g).unwrap();
                    twin.step(&mut b, &g).unwrap();
                }
                proptest::prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let err = toy_train(
            ToyProblem::QuadraticBowl,
            OptimizerKind::MuSgd,
            50.0,
            200,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::DivergedLoss { .. }));
    }
}
