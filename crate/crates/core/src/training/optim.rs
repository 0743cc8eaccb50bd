use crate::network::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer; moment arrays parallel the parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[Vec<T>]) -> Self {
        let zeros: Vec<Vec<T>> = shapes.iter().map(|a| vec![T::zero(); a.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter layout");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bias1 = one - T::lit(c.beta1.powi(t));
        let bias2 = one - T::lit(c.beta2.powi(t));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![vec![1.0f64, -2.0]];
        let g = vec![vec![0.5, -3.0]];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.update(&mut p, &g);
        // bias-corrected first step is lr * sign(g) (up to eps)
        assert!((p[0][0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[0][1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![vec![3.0f64]];
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..500 {
            let g = vec![vec![2.0 * p[0][0]]];
            adam.update(&mut p, &g);
        }
        assert!(p[0][0].abs() < 1e-2);
    }
}
