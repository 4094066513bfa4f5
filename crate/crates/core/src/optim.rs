//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`:
    ///
    /// ```text
    /// p <- p (1 - lr wd)
    /// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
    /// p <- p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Matrix>, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        let mut n = 0;
        for (k, p) in params.into_iter().enumerate() {
            let g = &grads[k];
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for tensor {k}");
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
                let gi = g.as_slice()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            n += 1;
        }
        assert_eq!(n, grads.len(), "parameter/gradient count mismatch");
    }
}

/// Linear warmup from 0 to `peak` over the first `round(warmup_frac * total)`
/// steps, then cosine decay to 0 at `step = total`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_frac: f64, peak: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let step = step.min(total_steps);
    let warmup = (warmup_frac * total_steps as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total_steps - warmup;
    if span == 0 {
        return peak;
    }
    let progress = (step - warmup) as f64 / span as f64;
    0.5 * peak * (1.0 + (PI * progress).cos())
}
