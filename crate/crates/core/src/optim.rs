//! Adam with decoupled weight decay, warmup + cosine learning rate, and
//! global-norm gradient clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl OptimConfig {
    /// Adam(0.9, 0.98), ε = 1e-6, weight decay 0.1, η_min = 1e-6.
    pub fn new(lr_max: f64, warmup_steps: u64, max_steps: u64, clip_norm: Option<f64>) -> Self {
        Self {
            lr_min: 1e-6,
            lr_max,
            warmup_steps,
            max_steps,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
            clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates need 0 < lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if self.max_steps > 0 && self.warmup_steps >= self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `lr_min` to `lr_max`, then a half cosine back down to
/// `lr_min` at `max_steps`. Steps past `max_steps` stay at `lr_min`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    let span = cfg.lr_max - cfg.lr_min;
    if step >= cfg.max_steps {
        return cfg.lr_min;
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.lr_max;
        }
        return cfg.lr_min + span * step as f64 / cfg.warmup_steps as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * span * (1.0 + (PI * progress).cos())
}

/// Global L2 norm over all gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `bound`; returns
/// the factor applied (1.0 when nothing changed).
pub fn clip_gradients(grads: &mut [Vec<f64>], bound: Option<f64>) -> f64 {
    let Some(bound) = bound else {
        return 1.0;
    };
    let norm = global_norm(grads);
    if norm <= bound || norm == 0.0 {
        return 1.0;
    }
    let factor = bound / norm;
    grads.iter_mut().flatten().for_each(|g| *g *= factor);
    factor
}

/// First and second moment estimates, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(params: &ParamSet) -> Self {
        let z: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One bias-corrected Adam update at `step` (1-based) with learning rate
/// `lr_at(step)`. Weight decay shrinks decaying parameters by `1 − η·wd`
/// before the Adam delta. Non-finite gradients abort the step untouched.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    step: u64,
    cfg: &OptimConfig,
) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("Adam steps are 1-based".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradient buffers and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.len() {
            return Err(Error::Contract(format!("gradient size mismatch on {}", p.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient on {}", p.name)));
        }
    }
    let lr = lr_at(step, cfg);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * shrink - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(lr)
}
