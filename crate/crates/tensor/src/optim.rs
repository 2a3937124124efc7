use crate::error::{Result, TensorError};
use crate::param::{Gradients, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with classic (coupled) weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Checks that `grads` can be applied to `params`, without changing
    /// anything.
    pub fn validate(&self, params: &ParamSet, grads: &Gradients) -> Result<()> {
        if grads.0.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::invalid(
                "adam",
                format!("{} gradients / {} moment slots for {} parameters", grads.0.len(), self.m.len(), params.len()),
            ));
        }
        for (p, g) in params.iter().zip(&grads.0) {
            match g {
                None => return Err(TensorError::MissingGradient(p.name.clone())),
                Some(g) if g.len() != p.value.numel() => {
                    return Err(TensorError::mismatch("adam", &[g.len()], p.value.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// One update of every parameter. Fails without touching anything if a
    /// gradient is missing or mis-sized.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        self.validate(params, grads)?;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, wd) = (c.beta1, c.beta2, c.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_ref().expect("checked above");
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64 + wd * *w as f64;
                let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
                let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                *w -= (c.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = single(0.7);
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..5 {
            adam.step(&mut p, &Gradients(vec![Some(vec![0.0])])).unwrap();
        }
        assert_eq!(p.get(0).value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction -> delta = lr / (1 + eps).
        let mut p = single(0.0);
        let cfg = AdamConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &Gradients(vec![Some(vec![1.0])])).unwrap();
        let want = -(1e-2 / (1.0 + 1e-8));
        assert!((p.get(0).value.data()[0] as f64 - want).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_rejected_without_update() {
        let mut p = single(1.0);
        p.add("b", Tensor::scalar(2.0));
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &Gradients(vec![Some(vec![1.0]), None])).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("b".into()));
        assert_eq!(p.get(0).value.data(), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn reference_defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay), (1e-4, 1e-5));
    }
}
