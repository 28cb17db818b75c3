//! Rumor head, decision rule, BCE loss and evaluation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{ParamStore, Rng, Tape, Var};

pub const THRESHOLD: f64 = 0.5;

/// `y = sigmoid(w2 · LayerNorm(ReLU(Dropout(w1 · F + b1))) + b2)`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub first: Linear,
    pub norm: LayerNorm,
    pub second: Linear,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            first: Linear::new(store, &format!("{name}.first"), d_in, hidden, true, 1.0 / (d_in as f64).sqrt(), rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden)?,
            second: Linear::new(store, &format!("{name}.second"), hidden, 1, true, 1.0 / (hidden as f64).sqrt(), rng)?,
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    /// Rumor probabilities `[batch, 1]`. Dropout is active only on training tapes.
    pub fn forward(&self, tape: &mut Tape<'_>, fused: Var) -> Result<Var> {
        let shape = tape.shape(fused);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::invalid(format!("classifier expects width {}, got {shape:?}", self.in_dim())));
        }
        let d1 = self.first.forward(tape, fused)?;
        let d1 = tape.dropout(d1, self.dropout)?;
        let h = tape.relu(d1);
        let h = self.norm.forward(tape, h)?;
        let logit = self.second.forward(tape, h)?;
        Ok(tape.sigmoid(logit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    NonRumor,
    Rumor,
}

impl Class {
    pub fn label(self) -> u8 {
        match self {
            Class::NonRumor => 0,
            Class::Rumor => 1,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::NonRumor => "non-rumor",
            Class::Rumor => "rumor",
        })
    }
}

/// Rumor iff `y >= 0.5`.
pub fn decide(y: f64) -> Class {
    if y >= THRESHOLD {
        Class::Rumor
    } else {
        Class::NonRumor
    }
}

/// Batch-mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(tape: &mut Tape<'_>, probs: Var, labels: &[f64]) -> Result<Var> {
    Ok(tape.bce(probs, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Result<Self> {
        let total = tp + tn + fp + fn_;
        if total == 0 {
            return Err(Error::invalid("metrics over an empty set"));
        }
        let (tpf, fpf, fnf) = (tp as f64, fp as f64, fn_ as f64);
        let precision = ratio(tpf, tpf + fpf);
        let recall = ratio(tpf, tpf + fnf);
        Ok(Self {
            tp,
            tn,
            fp,
            fn_,
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        })
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub const CSV_HEADER: &'static str = "dataset,split,acc,prec,rec,f1,tp,tn,fp,fn";

    pub fn csv_row(&self, dataset: &str, split: &str) -> String {
        format!(
            "{dataset},{split},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.accuracy, self.precision, self.recall, self.f1, self.tp, self.tn, self.fp, self.fn_
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  (tp {} tn {} fp {} fn {})",
            self.accuracy, self.precision, self.recall, self.f1, self.tp, self.tn, self.fp, self.fn_
        )
    }
}

/// Confusion counts with rumor (label 1) as the positive class.
pub fn compute_metrics(predictions: &[Class], labels: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (Class::Rumor, 1) => tp += 1,
            (Class::NonRumor, 0) => tn += 1,
            (Class::Rumor, 0) => fp += 1,
            (Class::NonRumor, 1) => fn_ += 1,
            (_, other) => return Err(Error::invalid(format!("label {other} is not 0 or 1"))),
        }
    }
    MetricsReport::from_counts(tp, tn, fp, fn_)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{bce_term, Tensor};

    #[test]
    fn decide_threshold() {
        assert_eq!(decide(0.7), Class::Rumor);
        assert_eq!(decide(0.5), Class::Rumor);
        assert_eq!(decide(0.49), Class::NonRumor);
        let mut prev = Class::NonRumor.label();
        for i in 0..=100 {
            let c = decide(i as f64 / 100.0).label();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_term(0.5, 1.0) - 0.693147).abs() < 1e-6);
        assert!(bce_term(1.0, 1.0) < 1e-11);
        assert!(bce_term(0.0, 0.0) < 1e-11);
        assert!((bce_term(0.9, 0.0) - 2.302585).abs() < 1e-6);
        let mut tape = Tape::detached();
        let p = tape.constant(Tensor::vector(vec![0.2, 0.9, 0.6]));
        let q = tape.constant(Tensor::vector(vec![0.6, 0.2, 0.9]));
        let a = bce_loss(&mut tape, p, &[0.0, 1.0, 1.0]).unwrap();
        let b = bce_loss(&mut tape, q, &[1.0, 0.0, 1.0]).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-15);
    }

    #[test]
    fn metrics_reference_case() {
        let preds: Vec<Class> = [1, 1, 1, 0, 0, 0, 0, 1, 0, 0]
            .iter()
            .map(|&c| if c == 1 { Class::Rumor } else { Class::NonRumor })
            .collect();
        let labels = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1];
        let m = compute_metrics(&preds, &labels).unwrap();
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (3, 4, 1, 2));
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let again = MetricsReport::from_counts(m.tp, m.tn, m.fp, m.fn_).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn metrics_edge_cases() {
        let perfect = compute_metrics(&[Class::Rumor, Class::NonRumor], &[1, 0]).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
        let none = compute_metrics(&[Class::NonRumor; 3], &[0, 0, 0]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[Class::Rumor], &[2]).is_err());
        assert_eq!(perfect.csv_row("synthetic", "test"), "synthetic,test,1.000000,1.000000,1.000000,1.000000,1,1,0,0");
    }

    #[test]
    fn zero_output_weights_give_half() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "c", 4, 3, 0.3, &mut Rng::new(1)).unwrap();
        store.get_mut(head.second.weight).tensor.data_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::matrix(2, 4, Rng::new(2).uniform_vec(8, -1.0, 1.0)).unwrap());
        let y = head.forward(&mut tape, f).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
        let y2 = head.forward(&mut tape, f).unwrap();
        assert_eq!(tape.data(y), tape.data(y2));
        let bad = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(head.forward(&mut tape, bad).is_err());
    }

    #[test]
    fn hand_evaluated_head() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "c", 2, 2, 0.3, &mut Rng::new(1)).unwrap();
        // w1 stored [in, out]
        store.get_mut(head.first.weight).tensor.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        store.get_mut(head.first.bias.unwrap()).tensor.data_mut().copy_from_slice(&[0.1, 0.2]);
        store.get_mut(head.norm.gamma).tensor.data_mut().copy_from_slice(&[1.5, 0.5]);
        store.get_mut(head.norm.beta).tensor.data_mut().copy_from_slice(&[0.1, -0.1]);
        store.get_mut(head.second.weight).tensor.data_mut().copy_from_slice(&[0.8, -0.6]);
        store.get_mut(head.second.bias.unwrap()).tensor.data_mut()[0] = 0.05;
        let f = [0.3, 0.7];
        let d1 = [(0.5 * f[0] + 2.0 * f[1] + 0.1f64).max(0.0), (-1.0 * f[0] + 0.25 * f[1] + 0.2f64).max(0.0)];
        let mean = (d1[0] + d1[1]) / 2.0;
        let var = ((d1[0] - mean).powi(2) + (d1[1] - mean).powi(2)) / 2.0;
        let n: Vec<f64> = d1.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let h = [1.5 * n[0] + 0.1, 0.5 * n[1] - 0.1];
        let logit = 0.8 * h[0] - 0.6 * h[1] + 0.05;
        let expected = 1.0 / (1.0 + (-logit).exp());
        let mut tape = Tape::new(&store);
        let fv = tape.constant(Tensor::matrix(1, 2, f.to_vec()).unwrap());
        let y = head.forward(&mut tape, fv).unwrap();
        assert!((tape.data(y)[0] - expected).abs() < 1e-12);
    }
}
