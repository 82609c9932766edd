use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias-corrected moments. Moments are kept in 32-bit to match
/// the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => (max / norm) as f32,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.epsilon * bc2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grads[i] * clip;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0f32, -2.0];
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            2,
        );
        for _ in 0..2000 {
            let g: Vec<f32> = x.iter().map(|&v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = vec![0.0f32; 3];
        let mut opt = Adam::new(AdamConfig::default(), 3);
        let norm = opt.step(&mut x, &[100.0, -0.5, 0.0]);
        assert!((norm - (10000.25f64).sqrt()).abs() < 1e-6);
        assert!((x[0] + 3e-4).abs() < 1e-7);
        assert!((x[1] - 3e-4).abs() < 1e-7);
        assert_eq!(x[2], 0.0);
    }
}
