use std::collections::HashMap;

use super::{Objective, Result, SelectError};
use crate::features::FeatureMatrix;

/// `−Σ (p − 0.5)²`, maximized at the box center; ignores the mask.
#[derive(Debug, Clone)]
pub struct Sphere {
    dim: usize,
}

impl Sphere {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Objective for Sphere {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&mut self, position: &[f64], _: &[bool]) -> Result<f64> {
        Ok(-position.iter().map(|p| (p - 0.5) * (p - 0.5)).sum::<f64>())
    }
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Logistic regression fitted by full-batch gradient descent from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProxy {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProxy {
    pub const EPOCHS: usize = 200;
    pub const LR: f64 = 0.5;

    /// `x` is row-major `n × k`.
    pub fn fit(x: &[f64], k: usize, y: &[bool], epochs: usize, lr: f64) -> Self {
        let n = y.len();
        let mut w = vec![0.0; k];
        let mut b = 0.0;
        let mut gw = vec![0.0; k];
        for _ in 0..epochs {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &t) in x.chunks_exact(k).zip(y) {
                let z = b + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let e = sigmoid(z) - f64::from(u8::from(t));
                gb += e;
                gw.iter_mut().zip(row).for_each(|(g, a)| *g += e * a);
            }
            let s = lr / n as f64;
            w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= s * g);
            b -= s * gb;
        }
        Self { weights: w, bias: b }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<bool> {
        let k = self.weights.len();
        x.chunks_exact(k)
            .map(|row| self.bias + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() >= 0.0)
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Validation F1 of a [`LogisticProxy`] on the masked columns, minus
/// `λ·|mask|/d`. Results are memoized per mask.
#[derive(Debug, Clone)]
pub struct MaskFitness {
    train: FeatureMatrix,
    train_y: Vec<bool>,
    val: FeatureMatrix,
    val_y: Vec<bool>,
    lambda: f64,
    cache: HashMap<Vec<bool>, f64>,
}

impl MaskFitness {
    pub fn new(train: FeatureMatrix, train_y: Vec<bool>, val: FeatureMatrix, val_y: Vec<bool>, lambda: f64) -> Result<Self> {
        if train.rows() != train_y.len() || val.rows() != val_y.len() || train.cols() != val.cols() {
            return Err(SelectError::Fitness("feature/label extents disagree".into()));
        }
        if train.cols() == 0 || val.rows() == 0 {
            return Err(SelectError::Fitness("empty feature set".into()));
        }
        if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
            return Err(SelectError::Fitness("training split holds a single class".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(SelectError::Param(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self { train, train_y, val, val_y, lambda, cache: HashMap::new() })
    }

    /// Fitness assigned to the empty mask; below any reachable score.
    pub fn sentinel(&self) -> f64 {
        -1.0 - self.lambda
    }

    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }

    fn score(&self, mask: &[bool]) -> Result<f64> {
        let k = mask.iter().filter(|&&m| m).count();
        if k == 0 {
            return Ok(self.sentinel());
        }
        let xt = self.train.select_columns(mask).map_err(|e| SelectError::Fitness(e.to_string()))?;
        let xv = self.val.select_columns(mask).map_err(|e| SelectError::Fitness(e.to_string()))?;
        let model = LogisticProxy::fit(xt.data(), k, &self.train_y, LogisticProxy::EPOCHS, LogisticProxy::LR);
        let f1 = f1_score(&model.predict(xv.data()), &self.val_y);
        Ok(f1 - self.lambda * k as f64 / mask.len() as f64)
    }
}

impl Objective for MaskFitness {
    fn dim(&self) -> usize {
        self.train.cols()
    }

    fn evaluate(&mut self, _: &[f64], mask: &[bool]) -> Result<f64> {
        if mask.len() != self.dim() {
            return Err(SelectError::Param(format!("mask of {} for {} features", mask.len(), self.dim())));
        }
        if let Some(&f) = self.cache.get(mask) {
            return Ok(f);
        }
        let f = self.score(mask)?;
        self.cache.insert(mask.to_vec(), f);
        Ok(f)
    }
}
