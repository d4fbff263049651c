use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `x` in place.
pub fn adam_step(x: &mut [f64], grad: &[f64], state: &mut AdamMoments, lr: f64, cfg: &AdamConfig) {
    debug_assert_eq!(x.len(), grad.len());
    debug_assert_eq!(x.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let cfg = AdamConfig::default();
        let mut x = vec![1.0, -2.0, 0.5];
        let g = [0.3, -40.0, 1e-3];
        let mut s = AdamMoments::new(3);
        adam_step(&mut x, &g, &mut s, 0.01, &cfg);
        let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for i in 0..3 {
            // eps shifts the step by at most lr * eps / |g|.
            assert!((x[i] - expect[i]).abs() < 1e-7, "{} vs {}", x[i], expect[i]);
        }
        let mut y = vec![0.0; 2];
        let mut s = AdamMoments::new(2);
        adam_step(&mut y, &[2.0, -1.0], &mut s, 0.1, &cfg);
        assert!((y[0] + 0.1).abs() < 1e-9 && (y[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_values_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut x = vec![1.0];
        let mut s = AdamMoments::new(1);
        adam_step(&mut x, &[1.0], &mut s, 0.1, &cfg);
        let (x1, m1, v1) = (x[0], s.m[0], s.v[0]);
        let mut fresh = vec![3.0];
        let mut zs = AdamMoments::new(1);
        adam_step(&mut fresh, &[0.0], &mut zs, 0.1, &cfg);
        assert_eq!(fresh[0], 3.0);
        adam_step(&mut x, &[0.0], &mut s, 0.1, &cfg);
        assert!((s.m[0] - 0.9 * m1).abs() < 1e-15);
        assert!((s.v[0] - 0.999 * v1).abs() < 1e-15);
        // Momentum keeps moving x even with a zero gradient.
        assert!(x[0] < x1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let cfg = AdamConfig::default();
        let mut x = vec![1.0, -0.5];
        let mut s = AdamMoments::new(2);
        for step in 0..400 {
            let g = [2.0 * x[0], 20.0 * x[1]];
            let lr = 0.1 * 0.98f64.powi(step);
            adam_step(&mut x, &g, &mut s, lr, &cfg);
        }
        assert!((x[0] * x[0] + x[1] * x[1]).sqrt() < 1e-3, "{x:?}");
    }
}
