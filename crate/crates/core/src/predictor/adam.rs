//! Bias-corrected ADAM over groups of parameter slices.

use crate::error::{Error, Result};
use crate::predictor::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments shaped like the parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(group_sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = group_sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// One ADAM update of every group. `groups[i]` pairs a parameter slice with its
/// gradient and must match the shape the state was created with.
pub fn adam_step<T: Real>(
    groups: &mut [(&mut [T], &[T])],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if groups.len() != state.m.len() {
        return Err(Error::dim(format!(
            "optimizer tracks {} groups but {} were given",
            state.m.len(),
            groups.len()
        )));
    }
    for (i, (p, g)) in groups.iter().enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::dim(format!(
                "group {i}: parameter {} / gradient {} / state {} lengths differ",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    for (i, (p, g)) in groups.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            p[j] = T::lit(p[j].as_f64() - update);
        }
    }
    Ok(())
}
