//! Logistic-regression probes used as unimodal and bag-of-tokens baselines.

use crate::error::{Error, Result};
use crate::numerics::{bce_term, sigmoid};
use crate::text::Vocabulary;

/// Standardised-feature logistic regression fitted by full-batch gradient descent.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.5, l2: 1e-4 }
    }
}

impl LogisticProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[u8], opts: ProbeOptions) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::invalid(format!("{n} feature rows for {} labels", labels.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("ragged feature rows"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut scale = vec![0.0; d];
        for f in features {
            scale.iter_mut().zip(f).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let xs: Vec<Vec<f64>> =
            features.iter().map(|f| f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect()).collect();
        let mut probe = Self { weights: vec![0.0; d], bias: 0.0, mean, scale };
        for _ in 0..opts.epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let err = probe.raw(x) - y as f64;
                gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v / n as f64);
                gb += err / n as f64;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= opts.learning_rate * (g + opts.l2 * *w);
            }
            probe.bias -= opts.learning_rate * gb;
        }
        Ok(probe)
    }

    fn raw(&self, standardised: &[f64]) -> f64 {
        sigmoid(self.bias + self.weights.iter().zip(standardised).map(|(w, x)| w * x).sum::<f64>())
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect();
        self.raw(&z)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &y)| u8::from(self.predict(f) >= 0.5) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }

    pub fn loss(&self, features: &[Vec<f64>], labels: &[u8]) -> f64 {
        features.iter().zip(labels).map(|(f, &y)| bce_term(self.predict(f), y as f64)).sum::<f64>() / labels.len().max(1) as f64
    }
}

/// Token counts over the vocabulary.
pub fn bag_of_tokens(text: &str, vocab: &Vocabulary) -> Vec<f64> {
    let mut v = vec![0.0; vocab.len()];
    for w in text.split_whitespace() {
        v[vocab.id(&w.to_lowercase())] += 1.0;
    }
    v
}
