use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected Adam step on the loss gradient `grad`.
    ///
    /// When `clip_norm` is set and `‖grad‖₂` exceeds it, the gradient is
    /// rescaled to that norm first (in place). Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], clip_norm: Option<f64>) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::dims("Adam step", self.m.len(), grad.len().min(params.len())));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if let Some(limit) = clip_norm {
            if norm > limit {
                let scale = limit / norm;
                grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(norm)
    }
}

/// Target-network update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Hard,
    /// `target ← τ·online + (1−τ)·target`.
    Polyak(f64),
}

pub fn target_sync(target: &mut [f64], online: &[f64], mode: SyncMode) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::dims("target sync", online.len(), target.len()));
    }
    match mode {
        SyncMode::Hard => target.copy_from_slice(online),
        SyncMode::Polyak(tau) => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::InvalidParameter(format!("polyak coefficient {tau} outside [0, 1]")));
            }
            for (t, o) in target.iter_mut().zip(online) {
                *t = tau * o + (1.0 - tau) * *t;
            }
        }
    }
    Ok(())
}
