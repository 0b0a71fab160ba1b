//! Per-patch estimation of SMoE parameters.
//!
//! The objective is `λ_mse·MSE + λ_ssim·(1 − SSIM)` between the decoded
//! model and the target patch, where SSIM is evaluated as one window over
//! the whole patch. Gradients are analytic (chain rule through the SSIM
//! rational form, the softmax gating, the Mahalanobis form and the Cholesky
//! parameterization). Optimization is Adam with global-norm clipping and a
//! reduce-on-plateau learning-rate schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Patch;
use crate::smoe::{init_model, SampleGrid, SmoeModel, PARAMS_PER_KERNEL};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    pub max_iters: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub early_stop_tol: f64,
    /// Half-width of the seeded uniform perturbation applied to the initial
    /// kernel centers. Zero keeps the deterministic grid layout.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 0.5,
            lambda_ssim: 0.5,
            max_iters: 300,
            lr0: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            plateau_patience: 20,
            plateau_factor: 0.5,
            min_lr: 1e-5,
            early_stop_tol: 1e-7,
            init_jitter: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.lambda_ssim >= 0.0)
            || !(self.lambda_mse + self.lambda_ssim > 0.0)
        {
            return Err(invalid("loss weights must be >= 0 with a positive sum"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(invalid(format!(
                "plateau_factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if !(self.lr0 > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.lr0 {
            return Err(invalid("learning rates must satisfy 0 < min_lr <= lr0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip_norm must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(invalid("adam betas must be in [0, 1) and eps > 0"));
        }
        if !(self.early_stop_tol >= 0.0) || !(self.init_jitter >= 0.0) {
            return Err(invalid("early_stop_tol and init_jitter must be >= 0"));
        }
        Ok(())
    }
}

fn check_sizes(a: &Patch, b: &Patch) -> Result<()> {
    if a.k() != b.k() {
        return Err(invalid(format!(
            "patch sizes differ: {} vs {}",
            a.k(),
            b.k()
        )));
    }
    Ok(())
}

struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn moments(a: &[f64], b: &[f64]) -> Moments {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - mean_a, y - mean_b);
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    Moments {
        mean_a,
        mean_b,
        var_a: var_a / n,
        var_b: var_b / n,
        cov: cov / n,
    }
}

fn ssim_terms(m: &Moments) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * m.mean_a * m.mean_b + SSIM_C1;
    let a2 = 2.0 * m.cov + SSIM_C2;
    let b1 = m.mean_a * m.mean_a + m.mean_b * m.mean_b + SSIM_C1;
    let b2 = m.var_a + m.var_b + SSIM_C2;
    (a1, a2, b1, b2)
}

fn ssim_values(a: &[f64], b: &[f64]) -> f64 {
    let (a1, a2, b1, b2) = ssim_terms(&moments(a, b));
    (a1 * a2) / (b1 * b2)
}

fn mse_values(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Single-window SSIM over the whole patch with population moments.
pub fn ssim_block(a: &Patch, b: &Patch) -> Result<f64> {
    check_sizes(a, b)?;
    Ok(ssim_values(a.values(), b.values()))
}

pub fn composite_loss(pred: &Patch, target: &Patch, cfg: &FitConfig) -> Result<f64> {
    check_sizes(pred, target)?;
    Ok(loss_values(pred.values(), target.values(), cfg))
}

fn loss_values(pred: &[f64], target: &[f64], cfg: &FitConfig) -> f64 {
    let mut loss = 0.0;
    if cfg.lambda_mse != 0.0 {
        loss += cfg.lambda_mse * mse_values(pred, target);
    }
    if cfg.lambda_ssim != 0.0 {
        loss += cfg.lambda_ssim * (1.0 - ssim_values(pred, target));
    }
    loss
}

/// `∂loss/∂pred` for every pixel, written into `out`.
fn loss_grad_wrt_pred(pred: &[f64], target: &[f64], cfg: &FitConfig, out: &mut [f64]) {
    let n = pred.len() as f64;
    for (o, (p, t)) in out.iter_mut().zip(pred.iter().zip(target)) {
        *o = cfg.lambda_mse * 2.0 * (p - t) / n;
    }
    if cfg.lambda_ssim != 0.0 {
        let m = moments(pred, target);
        let (a1, a2, b1, b2) = ssim_terms(&m);
        let s = (a1 * a2) / (b1 * b2);
        let lum = 2.0 * m.mean_b / a1 - 2.0 * m.mean_a / b1;
        for (o, (p, t)) in out.iter_mut().zip(pred.iter().zip(target)) {
            let ds = s * (lum + 2.0 * (t - m.mean_b) / a2 - 2.0 * (p - m.mean_a) / b2) / n;
            *o -= cfg.lambda_ssim * ds;
        }
    }
}

/// Reusable buffers for forward/backward passes over one grid.
#[derive(Debug, Clone)]
pub struct Workspace {
    kernels: usize,
    // exp of the log-diagonal Cholesky entries, per kernel
    ea: Vec<f64>,
    ec: Vec<f64>,
    gates: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
    pred: Vec<f64>,
    dpred: Vec<f64>,
}

impl Workspace {
    pub fn new(kernels: usize, pixels: usize) -> Self {
        let z = vec![0.0; kernels * pixels];
        Self {
            kernels,
            ea: vec![0.0; kernels],
            ec: vec![0.0; kernels],
            gates: z.clone(),
            u1: z.clone(),
            u2: z.clone(),
            dx: z.clone(),
            dy: z,
            pred: vec![0.0; pixels],
            dpred: vec![0.0; pixels],
        }
    }

    fn forward(&mut self, params: &[f64], grid: &SampleGrid) {
        let kn = self.kernels;
        for (i, kp) in params.chunks_exact(PARAMS_PER_KERNEL).enumerate() {
            self.ea[i] = kp[2].exp();
            self.ec[i] = kp[4].exp();
        }
        for (p, &(x, y)) in grid.positions().iter().enumerate() {
            let row = p * kn;
            let mut max = f64::NEG_INFINITY;
            for (i, kp) in params.chunks_exact(PARAMS_PER_KERNEL).enumerate() {
                let (dx, dy) = (x - kp[0], y - kp[1]);
                let u1 = self.ea[i] * dx + kp[3] * dy;
                let u2 = self.ec[i] * dy;
                let s = kp[6] - 0.5 * (u1 * u1 + u2 * u2);
                self.dx[row + i] = dx;
                self.dy[row + i] = dy;
                self.u1[row + i] = u1;
                self.u2[row + i] = u2;
                self.gates[row + i] = s;
                max = max.max(s);
            }
            let g = &mut self.gates[row..row + kn];
            let mut sum = 0.0;
            for v in g.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let mut y = 0.0;
            for (v, kp) in g.iter_mut().zip(params.chunks_exact(PARAMS_PER_KERNEL)) {
                *v /= sum;
                y += *v * kp[5];
            }
            self.pred[p] = y;
        }
    }

    /// Loss and its gradient with respect to the flat parameter vector.
    pub fn loss_and_gradient(
        &mut self,
        params: &[f64],
        target: &[f64],
        grid: &SampleGrid,
        cfg: &FitConfig,
        grad: &mut [f64],
    ) -> f64 {
        self.forward(params, grid);
        let loss = loss_values(&self.pred, target, cfg);
        loss_grad_wrt_pred(&self.pred, target, cfg, &mut self.dpred);

        grad.fill(0.0);
        let kn = self.kernels;
        for p in 0..grid.len() {
            let row = p * kn;
            let (y, dl) = (self.pred[p], self.dpred[p]);
            if dl == 0.0 {
                continue;
            }
            for (i, (gk, kp)) in grad
                .chunks_exact_mut(PARAMS_PER_KERNEL)
                .zip(params.chunks_exact(PARAMS_PER_KERNEL))
                .enumerate()
            {
                let g = self.gates[row + i];
                let (u1, u2) = (self.u1[row + i], self.u2[row + i]);
                let (dx, dy) = (self.dx[row + i], self.dy[row + i]);
                let (ea, ec) = (self.ea[i], self.ec[i]);
                gk[5] += dl * g;
                // gate score sᵢ = logitᵢ − ½dᵢ; ∂y/∂sᵢ = gᵢ(wᵢ − y)
                let ds = dl * g * (kp[5] - y);
                gk[6] += ds;
                let dd = -0.5 * ds;
                gk[0] += dd * (-2.0 * u1 * ea);
                gk[1] += dd * (-2.0 * (u1 * kp[3] + u2 * ec));
                gk[2] += dd * (2.0 * u1 * ea * dx);
                gk[3] += dd * (2.0 * u1 * dy);
                gk[4] += dd * (2.0 * u2 * ec * dy);
            }
        }
        loss
    }

    pub fn loss(
        &mut self,
        params: &[f64],
        target: &[f64],
        grid: &SampleGrid,
        cfg: &FitConfig,
    ) -> f64 {
        self.forward(params, grid);
        loss_values(&self.pred, target, cfg)
    }
}

/// Analytic gradient of `composite_loss(decode(model), target)` over all
/// `7K` raw parameters, in [`SmoeModel::to_params`] order.
pub fn loss_gradient(
    model: &SmoeModel,
    target: &Patch,
    grid: &SampleGrid,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    if target.k() != grid.k() {
        return Err(invalid("target and grid sizes differ"));
    }
    let params = model.to_params();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(model.len(), grid.len());
    ws.loss_and_gradient(&params, target.values(), grid, cfg, &mut grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { iteration: 0 });
    }
    Ok(grad)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` onto the ball of radius `clip_norm` when it lies outside.
pub fn clip_gradients(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

fn clip_in_place(g: &mut [f64], clip_norm: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    norm
}

/// Optimizer and scheduler state for one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub iteration: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub lr: f64,
    pub best_loss: f64,
    /// Iterations since the last improvement; reset only by improvement.
    pub since_improvement: usize,
    /// Plateau counter; reset by improvement and by every lr reduction.
    pub plateau_count: usize,
}

impl FitState {
    pub fn new(n_params: usize, cfg: &FitConfig) -> Self {
        Self {
            iteration: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            lr: cfg.lr0,
            best_loss: f64::INFINITY,
            since_improvement: 0,
            plateau_count: 0,
        }
    }

    fn adam_update(&mut self, params: &mut [f64], grad: &[f64], cfg: &FitConfig) {
        self.iteration += 1;
        let t = self.iteration as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Reduce-on-plateau step. Returns the learning rate to use next.
pub fn scheduler_step(state: &mut FitState, loss: f64, cfg: &FitConfig) -> f64 {
    if loss < state.best_loss - cfg.early_stop_tol {
        state.best_loss = loss;
        state.since_improvement = 0;
        state.plateau_count = 0;
    } else {
        state.since_improvement += 1;
        state.plateau_count += 1;
        if state.plateau_count >= cfg.plateau_patience {
            state.lr = (state.lr * cfg.plateau_factor).max(cfg.min_lr);
            state.plateau_count = 0;
        }
    }
    state.lr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: SmoeModel,
    /// Composite loss of `model` against the target.
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
}

pub fn fit_patch(patch: &Patch, kernels: usize, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    fit_patch_inner(patch, kernels, cfg, seed, None)
}

/// [`fit_patch`] that also records one [`TraceRow`] per iteration.
pub fn fit_patch_traced(
    patch: &Patch,
    kernels: usize,
    cfg: &FitConfig,
    seed: u64,
    trace: &mut Vec<TraceRow>,
) -> Result<FitResult> {
    fit_patch_inner(patch, kernels, cfg, seed, Some(trace))
}

fn fit_patch_inner(
    patch: &Patch,
    kernels: usize,
    cfg: &FitConfig,
    seed: u64,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let grid = SampleGrid::new(patch.k());
    let target = patch.values();
    let mut model = init_model(patch, kernels)?;
    let mut ws = Workspace::new(kernels, grid.len());

    if cfg.max_iters == 0 {
        let loss = ws.loss(&model.to_params(), target, &grid, cfg);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        return Ok(FitResult {
            model,
            loss,
            initial_loss: loss,
            iterations: 0,
        });
    }

    if cfg.init_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in &mut model.kernels {
            k.mu_x += rng.random_range(-cfg.init_jitter..=cfg.init_jitter);
            k.mu_y += rng.random_range(-cfg.init_jitter..=cfg.init_jitter);
        }
    }

    let mut params = model.to_params();
    let mut grad = vec![0.0; params.len()];
    let mut state = FitState::new(params.len(), cfg);
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial_loss = f64::NAN;
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        let loss = ws.loss_and_gradient(&params, target, &grid, cfg, &mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration: iter });
        }
        if iter == 0 {
            initial_loss = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(&params);
        }
        let lr_used = state.lr;
        scheduler_step(&mut state, loss, cfg);
        let grad_norm = clip_in_place(&mut grad, cfg.clip_norm);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow {
                iter,
                loss,
                lr: lr_used,
                grad_norm,
            });
        }
        iterations = iter + 1;
        if cfg.early_stop_tol > 0.0 && state.since_improvement >= 2 * cfg.plateau_patience {
            break;
        }
        state.adam_update(&mut params, &grad, cfg);
    }

    // the last update has not been scored yet
    if iterations == cfg.max_iters {
        let loss = ws.loss(&params, target, &grid, cfg);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iterations,
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(&params);
        }
    }

    model.set_params(&best_params);
    Ok(FitResult {
        model,
        loss: best_loss,
        initial_loss,
        iterations,
    })
}
