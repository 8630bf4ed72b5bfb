use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::config::AdamWConfig;

#[derive(Clone, Debug, Default)]
struct Slot {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay.
///
/// Per parameter and step: `θ ← θ(1 - lr·wd)`, then the bias-corrected
/// adaptive step `θ ← θ - (lr / (1-β₁ᵗ)) · m / (√v / √(1-β₂ᵗ) + ε)`. Step
/// counts are per parameter and advance only when the parameter has a
/// gradient; parameters without one are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    lr: f64,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, lr: f64, parameter_count: usize) -> Self {
        Self {
            cfg,
            lr,
            slots: vec![Slot::default(); parameter_count],
        }
    }

    /// `names` label parameters in diagnostics.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} slots, {} params, {} grads",
                    self.slots.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        // Check everything before touching any parameter.
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params[i].shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient of {} has the wrong shape", names[i]),
                ));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {}: {bad}",
                    names[i]
                )));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            if slot.m.is_empty() {
                slot.m = vec![0.0; g.numel()];
                slot.v = vec![0.0; g.numel()];
            }
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2_sqrt = (1.0 - beta2.powi(slot.step as i32)).sqrt();
            let step_size = self.lr / bc1;
            let decay = 1.0 - self.lr * weight_decay;
            for (((theta, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&mut slot.m)
                .zip(&mut slot.v)
            {
                *theta *= decay;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *theta -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}
