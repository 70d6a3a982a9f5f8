//! AdamW with decoupled weight decay, and the cosine annealing schedule.

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{LgdError, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(1e-4, (0.9, 0.999), 1e-4)
    }
}

impl AdamW {
    pub fn new(base_lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            base_lr,
            betas,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment buffers of `name`, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every trainable parameter of `params` in place.
    ///
    /// Fails without touching any parameter if one of them has no gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(LgdError::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if let Some((name, _)) = params
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(LgdError::MissingGrad(name.to_string()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let grad: Vec<f32> = p.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                let g = f64::from(g);
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let updated = f64::from(*theta) * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                *theta = updated as f32;
            }
        }
        Ok(())
    }
}

/// `base_lr · ½ · (1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(LgdError::InvalidArgument("total_epochs must be > 0".into()));
    }
    if epoch > total_epochs {
        return Err(LgdError::InvalidArgument(format!(
            "epoch {epoch} exceeds total {total_epochs}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
