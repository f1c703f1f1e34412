//! Nesterov SGD with a cosine learning-rate schedule.

use std::f64::consts::PI;

/// `lr0 * (1 + cos(pi * step / (total - 1))) / 2`: `lr0` at the first step and
/// exactly 0 at the last.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One Nesterov step: `v = mu v + g`, `p -= lr (g + mu v)`, weight decay folded
/// into `g`. A zero learning rate leaves the parameters untouched.
pub fn nesterov_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, cfg: &SgdConfig) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        *p -= lr * (g + cfg.momentum * *v);
    }
}
