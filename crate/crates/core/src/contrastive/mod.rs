//! Momentum encoders, negative queues, contrastive losses and the training
//! step.

mod augment;
mod loss;
mod queue;
mod trainer;

use brivl_tensor::ParamSet;

use crate::error::{Error, Result};

pub use augment::{augment, GRAY_PROB, JITTER};
pub use loss::{in_batch_loss, info_nce, total_loss, InBatchLoss, QueueLoss};
pub use queue::NegativeQueue;
pub use trainer::{LossValues, StepMetrics, TrainState, Trainer, TrainingSet, Towers};

/// `theta_m <- m * theta_m + (1 - m) * theta` for every parameter.
pub fn momentum_update(online: &ParamSet, momentum: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {m}")));
    }
    online.ensure_mirrors(momentum)?;
    for (o, t) in online.iter().zip(momentum.iter_mut()) {
        for (&w, wm) in o.value.data().iter().zip(t.value.data_mut()) {
            *wm = (m * *wm as f64 + (1.0 - m) * w as f64) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use brivl_tensor::Tensor;

    use super::*;

    fn scalar_set(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn trivial_momentum_cases() {
        let online = scalar_set(1.0);
        let mut m = scalar_set(0.0);
        momentum_update(&online, &mut m, 1.0).unwrap();
        assert_eq!(m.get(0).value.data(), &[0.0]);
        momentum_update(&online, &mut m, 0.99).unwrap();
        assert_eq!(m.get(0).value.data(), &[0.01]);
        momentum_update(&online, &mut m, 0.0).unwrap();
        assert_eq!(m.get(0).value.data(), &[1.0]);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let online = scalar_set(1.0);
        let mut other = ParamSet::new();
        other.add("w", Tensor::zeros(&[2]));
        assert!(momentum_update(&online, &mut other, 0.5).is_err());
    }
}
