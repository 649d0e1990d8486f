use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::safety::SafetyLabel;

/// Full-batch gradient descent on a softmax regression over standardized
/// features; zero initialization makes the fit deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            lr: 0.5,
            iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Row-major 3 × (dim + 1); the last column is the bias.
    weights: Vec<f64>,
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let dim = x.first().map(Vec::len).ok_or_else(|| Error::InsufficientData("probe needs samples".into()))?;
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("probe rows differ in length".into()));
    }
    Ok(dim)
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[SafetyLabel], cfg: &ProbeConfig) -> Result<Self> {
        let dim = check_rows(x)?;
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.len(), y.len())));
        }
        if y.iter().all(|l| *l == y[0]) {
            return Err(Error::InsufficientData(format!(
                "probe training set contains only class {}",
                y[0]
            )));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in x {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // constant features keep unit scale so they standardize to 0
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; 3 * (dim + 1)],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let w = dim + 1;
        let mut grad = vec![0.0; 3 * w];
        for _ in 0..cfg.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (r, l) in xs.iter().zip(y) {
                let p = softmax(&probe.logits_std(r));
                for c in 0..3 {
                    let e = (p[c] - if c == l.index() { 1.0 } else { 0.0 }) / n;
                    for (g, v) in grad[c * w..c * w + dim].iter_mut().zip(r) {
                        *g += e * v;
                    }
                    grad[c * w + dim] += e;
                }
            }
            for c in 0..3 {
                for k in 0..dim {
                    grad[c * w + k] += cfg.l2 * probe.weights[c * w + k];
                }
            }
            for (wt, g) in probe.weights.iter_mut().zip(&grad) {
                *wt -= cfg.lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logits_std(&self, r: &[f64]) -> Vec<f64> {
        let w = r.len() + 1;
        (0..3)
            .map(|c| {
                let row = &self.weights[c * w..(c + 1) * w];
                row[..r.len()].iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + row[r.len()]
            })
            .collect()
    }

    /// Highest-logit class; ties resolve to the lower class index.
    pub fn predict(&self, r: &[f64]) -> Result<SafetyLabel> {
        if r.len() != self.mean.len() {
            return Err(Error::Shape(format!("probe expects {} features, got {}", self.mean.len(), r.len())));
        }
        let l = self.logits_std(&self.standardize(r));
        let mut best = 0;
        for c in 1..3 {
            if l[c] > l[best] {
                best = c;
            }
        }
        Ok(SafetyLabel::ALL[best])
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[SafetyLabel]) -> Result<f64> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.len(), y.len())));
        }
        let mut hit = 0usize;
        for (r, l) in x.iter().zip(y) {
            if self.predict(r)? == *l {
                hit += 1;
            }
        }
        Ok(hit as f64 / x.len() as f64)
    }
}

/// Fits on the training split and returns held-out accuracy.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[SafetyLabel],
    test_x: &[Vec<f64>],
    test_y: &[SafetyLabel],
    cfg: &ProbeConfig,
) -> Result<f64> {
    LinearProbe::fit(train_x, train_y, cfg)?.accuracy(test_x, test_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_classes_are_recovered() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            x.push(vec![c as f64 * 3.0 + (i as f64 * 0.01).sin(), 100.0 + (i as f64).cos()]);
            y.push(SafetyLabel::ALL[c]);
        }
        let acc = linear_probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_class_training_is_an_error() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![SafetyLabel::Neutral; 2];
        match LinearProbe::fit(&x, &y, &ProbeConfig::default()) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("neutral")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_feature_is_harmless() {
        let x = vec![vec![1.0, 5.0], vec![-1.0, 5.0], vec![1.1, 5.0], vec![-1.2, 5.0]];
        let y = vec![SafetyLabel::Safe, SafetyLabel::Unsafe, SafetyLabel::Safe, SafetyLabel::Unsafe];
        let p = LinearProbe::fit(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&x, &y).unwrap(), 1.0);
    }
}
