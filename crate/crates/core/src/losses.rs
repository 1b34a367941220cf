//! Per-example convex losses on class scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `log Σ_j exp(a_j − a_y)`.
    #[default]
    MulticlassLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    kind: LossKind,
    num_classes: usize,
}

impl LossModel {
    pub fn multiclass_logistic(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            kind: LossKind::MulticlassLogistic,
            num_classes,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Bound on `‖∇ℓ_y(a)‖₂` over all scores and labels.
    pub fn lipschitz_constant(&self) -> f64 {
        match self.kind {
            // ‖softmax(a) − e_y‖² = (1 − s_y)² + Σ_{j≠y} s_j² < 2.
            LossKind::MulticlassLogistic => std::f64::consts::SQRT_2,
        }
    }

    fn check(&self, scores: &[f64], label: usize) -> Result<()> {
        if scores.len() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {} classes",
                scores.len(),
                self.num_classes
            )));
        }
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn value(&self, scores: &[f64], label: usize) -> Result<f64> {
        self.check(scores, label)?;
        let top = argmax(scores);
        let max = scores[top];
        let rest: f64 = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &a)| (a - max).exp())
            .sum();
        Ok((max - scores[label]) + rest.ln_1p())
    }

    pub fn grad(&self, scores: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut g = vec![0.0; scores.len()];
        self.value_and_grad_into(scores, label, &mut g)?;
        Ok(g)
    }

    /// Writes `softmax(a) − e_y` into `grad` and returns the loss.
    pub fn value_and_grad_into(&self, scores: &[f64], label: usize, grad: &mut [f64]) -> Result<f64> {
        self.check(scores, label)?;
        if grad.len() != scores.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient buffer has {} entries, expected {}",
                grad.len(),
                scores.len()
            )));
        }
        let top = argmax(scores);
        let max = scores[top];
        let mut rest = 0.0;
        for (j, (g, &a)) in grad.iter_mut().zip(scores).enumerate() {
            *g = (a - max).exp();
            if j != top {
                rest += *g;
            }
        }
        let sum = 1.0 + rest;
        for g in grad.iter_mut() {
            *g /= sum;
        }
        grad[label] -= 1.0;
        Ok((max - scores[label]) + rest.ln_1p())
    }

    /// Index of the largest score (first on ties).
    pub fn predict(scores: &[f64]) -> usize {
        argmax(scores)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in xs.iter().enumerate() {
        if s > xs[best] {
            best = j;
        }
    }
    best
}
