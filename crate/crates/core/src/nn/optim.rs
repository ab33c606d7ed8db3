use crate::error::{Error, Result};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero rate is legal and freezes the weights.
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-tensor first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every `(param, grad)` pair. The
    /// pairs must arrive in the same order on every call.
    pub fn step<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a mut [T], &'a [T])>) -> Result<()>
    where
        T: 'a,
    {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr_t, eps_hat) = (T::lit(lr_t), T::lit(c.epsilon * (1.0 - c.beta2.powf(t)).sqrt()));
        for (i, (param, grad)) in pairs.into_iter().enumerate() {
            if param.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} entries, gradient {}",
                    param.len(),
                    grad.len()
                )));
            }
            if i == self.m.len() {
                self.m.push(vec![T::zero(); param.len()]);
                self.v.push(vec![T::zero(); param.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != param.len() {
                return Err(Error::Shape(format!("parameter {i} changed size between steps")));
            }
            for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}
