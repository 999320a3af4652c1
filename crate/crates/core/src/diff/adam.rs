use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Rebuilds a state from saved moments (checkpoint restore).
    pub fn from_parts(config: AdamConfig, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::shape("adam moments differ in length"));
        }
        Ok(Self { config, m, v, step })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Advances the moments and returns the additive update `-lr_t * m / (sqrt(v) + eps)`
    /// with `lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)`.
    pub fn update(&mut self, grads: &[f64], lr: f64) -> Result<Vec<f64>> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state holds {} entries, gradient has {}",
                self.m.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        let mut delta = Vec::with_capacity(grads.len());
        for ((m, v), &g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            delta.push(-lr_t * *m / (v.sqrt() + eps));
        }
        Ok(delta)
    }

    /// In-place Euclidean step `params += update(grads, lr)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state holds {} entries, parameters have {}",
                self.m.len(),
                params.len()
            )));
        }
        let delta = self.update(grads, lr)?;
        for (p, d) in params.iter_mut().zip(delta) {
            *p += d;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            st.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.25, 1e-7] {
            let mut st = AdamState::new(1, cfg);
            let d = st.update(&[g], 0.01).unwrap()[0];
            let want = -0.01 * g / (g.abs() + cfg.eps / (1.0 - cfg.beta2).sqrt());
            assert!((d - want).abs() <= 1e-14 * want.abs(), "{d} vs {want}");
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut st = AdamState::new(2, AdamConfig::default());
            let mut p = vec![0.3, 0.7];
            for k in 0..50 {
                let g = [(p[0] - 1.0) * 2.0, (k as f64).sin() * p[1]];
                st.step(&mut p, &g, 0.05).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(st.update(&[1.0], 0.1).is_err());
    }
}
