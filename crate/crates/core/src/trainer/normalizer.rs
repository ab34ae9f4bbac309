use serde::{Deserialize, Serialize};

const MIN_VARIANCE: f64 = 1e-8;

/// Running mean and variance of value targets (parallel-merge update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    pub enabled: bool,
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl ValueNormalizer {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }

    pub fn update(&mut self, xs: &[f64]) {
        if !self.enabled || xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            self.mean = mean;
            self.var = var;
        } else {
            let total = self.count + n;
            let delta = mean - self.mean;
            let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
            self.mean += delta * n / total;
            self.var = m2 / total;
        }
        self.var = self.var.max(MIN_VARIANCE);
        self.count += n;
    }

    fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.enabled {
            (x - self.mean) / self.std()
        } else {
            x
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        if self.enabled {
            y * self.std() + self.mean
        } else {
            y
        }
    }
}
