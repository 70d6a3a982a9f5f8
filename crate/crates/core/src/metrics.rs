//! Confusion matrix, accuracy, macro-F1 and Cohen's kappa.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LgdError, Result};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(LgdError::InvalidShape(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(LgdError::InvalidShape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        for v in [truth, predicted] {
            if v >= k {
                return Err(LgdError::InvalidLabel(v));
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    /// Elementwise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(LgdError::InvalidShape("class counts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(LgdError::UndefinedMetric("confusion matrix is empty".into())),
            n => Ok(n as f64),
        }
    }
}

/// Fraction of samples on the diagonal.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty_total()?)
}

/// Unweighted mean of per-class F1; a class with no true and no predicted
/// samples (or no hits) contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty_total()?;
    let k = cm.classes();
    let sum: f64 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = (cm.row_sum(c) + cm.col_sum(c)) as f64;
            // 2PR/(P+R) simplifies to 2TP/(row + col)
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    Ok(sum / k as f64)
}

/// Cohen's kappa `(p_o - p_e)/(1 - p_e)`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty_total()?;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return if p_o >= 1.0 {
            Ok(1.0)
        } else {
            Err(LgdError::UndefinedMetric(
                "chance agreement is 1 but observed agreement is not".into(),
            ))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
    pub n: u64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            kappa: cohen_kappa(&confusion)?,
            n: confusion.total(),
            confusion,
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::from_confusion(ConfusionMatrix::from_predictions(classes, truth, predicted)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc={:.4} f1={:.4} kappa={:.4} n={}",
            self.accuracy, self.macro_f1, self.kappa, self.n
        )
    }
}
