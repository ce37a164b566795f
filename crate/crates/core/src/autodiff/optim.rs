//! SGD with momentum and L2 weight decay over `f32` parameter storage.

use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.001, momentum: 0.9, weight_decay: 0.0001 }
    }
}

/// One parameter tensor to update. `slot` identifies its velocity buffer.
pub struct ParamUpdate<'a> {
    pub slot: usize,
    pub weights: &'a mut [f32],
    pub grad: &'a [f64],
}

/// `v <- m v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    /// Applies one step to every update, or to none of them if any gradient
    /// is non-finite.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_>]) -> Result<(), AutodiffError> {
        for u in updates.iter() {
            assert_eq!(u.weights.len(), u.grad.len(), "gradient length for slot {}", u.slot);
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient { slot: u.slot });
            }
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for u in updates.iter_mut() {
            if self.velocity.len() <= u.slot {
                self.velocity.resize(u.slot + 1, None);
            }
            let v = self.velocity[u.slot].get_or_insert_with(|| vec![0.0; u.grad.len()]);
            for ((w, &g), vi) in u.weights.iter_mut().zip(u.grad).zip(v.iter_mut()) {
                let wf = f64::from(*w);
                *vi = momentum * *vi + (g + weight_decay * wf);
                *w = (wf - lr * *vi) as f32;
            }
        }
        Ok(())
    }
}
