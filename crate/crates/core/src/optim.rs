//! Adam optimizer over a graph's persistent parameters.

use crate::error::{config_err, Result};
use crate::graph::Graph;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second-moment state, one buffer per parameter in registration order.
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, graph: &Graph<T>) -> Self {
        let m = graph
            .params()
            .iter()
            .map(|&p| vec![T::zero(); graph.value(p).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { config, m, v, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffers in parameter registration order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore state saved by [`Adam::moments`] / [`Adam::steps`].
    pub fn restore(&mut self, steps: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return config_err(format!(
                "optimizer state has {} / {} buffers, model has {}",
                m.len(),
                v.len(),
                self.m.len()
            ));
        }
        for (fresh, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if fresh.len() != old.len() {
                return config_err(format!(
                    "optimizer buffer length {} != parameter size {}",
                    fresh.len(),
                    old.len()
                ));
            }
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }

    /// Apply one bias-corrected update from the gradients currently on the
    /// graph. Parameters whose gradient was never touched are left alone.
    pub fn step(&mut self, graph: &mut Graph<T>) {
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        for (idx, p) in graph.params().into_iter().enumerate() {
            let (value, grad) = graph.value_and_grad_mut(p);
            let Some(grad) = grad else { continue };
            let grad = grad.data().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (((x, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    // First Adam step moves every coordinate by exactly lr (bias-corrected
    // moments cancel the gradient magnitude when eps is negligible).
    #[test]
    fn first_step_magnitude() {
        let mut g: Graph<f64> = Graph::new();
        let p = g
            .param(Tensor::from_f64_slice(vec![2], &[1.0, -3.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &g);
        let x = g.value(p).clone();
        let loss = {
            let doubled = g.scale(p, 1.0);
            let s = g.sum(doubled);
            g.scale(s, 5.0)
        };
        g.backward(loss).unwrap();
        opt.step(&mut g);
        let lr = opt.config.learning_rate;
        for (after, before) in g.value(p).data().iter().zip(x.data()) {
            let moved = before - after;
            assert!((moved - lr).abs() < 1e-9, "moved {moved}, want {lr}");
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn untouched_params_stay_fixed() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(Tensor::scalar(0.5)).unwrap();
        let b = g.param(Tensor::scalar(0.25)).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &g);
        let loss = g.sum(a);
        g.backward(loss).unwrap();
        opt.step(&mut g);
        assert!(g.value(a).data()[0] != 0.5);
        assert_eq!(g.value(b).data()[0], 0.25);
    }
}
