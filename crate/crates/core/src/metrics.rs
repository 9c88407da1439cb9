//! Confusion-matrix metrics: per-class, micro and macro F1.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::NUM_CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("class index {0} out of range")]
    Class(usize),
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    Length { preds: usize, labels: usize },
    #[error("metric undefined on an empty confusion matrix")]
    Empty,
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Predicted as `class` but belonging elsewhere.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    /// Belonging to `class` but predicted elsewhere.
    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.nonempty_total()?;
        let tp: u64 = (0..NUM_CLASSES).map(|c| self.true_positives(c)).sum();
        Ok(tp as f64 / total as f64)
    }

    fn nonempty_total(&self) -> Result<u64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::Empty),
            t => Ok(t),
        }
    }
}

pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::Length {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        for c in [p, t] {
            if c >= NUM_CLASSES {
                return Err(MetricsError::Class(c));
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Micro-averaged precision and recall from pooled counts, combined as their
/// arithmetic mean.
pub fn micro_f1(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.nonempty_total()?;
    let tp: u64 = (0..NUM_CLASSES).map(|c| cm.true_positives(c)).sum();
    let tp_fp: u64 = (0..NUM_CLASSES)
        .map(|c| cm.true_positives(c) + cm.false_positives(c))
        .sum();
    let tp_fn: u64 = (0..NUM_CLASSES)
        .map(|c| cm.true_positives(c) + cm.false_negatives(c))
        .sum();
    let precision = tp as f64 / tp_fp as f64;
    let recall = tp as f64 / tp_fn as f64;
    Ok((precision + recall) / 2.0)
}

/// `2PR / (P + R)` for one class; 0 when the class has no true positives.
pub fn per_class_f1(cm: &ConfusionMatrix, class: usize) -> Result<f64, MetricsError> {
    if class >= NUM_CLASSES {
        return Err(MetricsError::Class(class));
    }
    cm.nonempty_total()?;
    let tp = cm.true_positives(class) as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + cm.false_positives(class) as f64);
    let recall = tp / (tp + cm.false_negatives(class) as f64);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    for c in 0..NUM_CLASSES {
        sum += per_class_f1(cm, c)?;
    }
    Ok(sum / NUM_CLASSES as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_f1: [f64; NUM_CLASSES],
    pub f1_grade_iv: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let mut per_class = [0.0; NUM_CLASSES];
        for (c, f) in per_class.iter_mut().enumerate() {
            *f = per_class_f1(cm, c)?;
        }
        Ok(Self {
            per_class_f1: per_class,
            f1_grade_iv: per_class[2],
            f1_micro: micro_f1(cm)?,
            f1_macro: macro_f1(cm)?,
            accuracy: cm.accuracy()?,
            samples: cm.total(),
            confusion: *cm,
        })
    }
}

/// One exported embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub grade: usize,
    pub values: Vec<f64>,
}

/// Writes `sample_id,grade,e0..e{d-1}` rows. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_embeddings_csv(rows: &[EmbeddingRow], path: &Path) -> std::io::Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "grade".to_string()];
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.sample_id.clone(), r.grade.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Reads a file written by [`write_embeddings_csv`].
pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| {
            csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("invalid {what} at line {}", rec.position().map_or(0, |p| p.line())),
            ))
        };
        rows.push(EmbeddingRow {
            sample_id: rec[0].to_string(),
            grade: rec[1].parse().map_err(|_| bad("grade"))?,
            values: rec
                .iter()
                .skip(2)
                .map(|v| v.parse().map_err(|_| bad("value")))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm.counts, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(confusion(&[], &[]).unwrap().total(), 0);
        let cm = confusion(&[0, 0], &[1, 2]).unwrap();
        assert_eq!(cm.counts[1][0], 1);
        assert_eq!(cm.counts[2][0], 1);
        assert_eq!(confusion(&[3], &[0]), Err(MetricsError::Class(3)));
        assert!(confusion(&[0], &[]).is_err());
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts([[4, 0, 0], [0, 2, 0], [0, 0, 9]]);
        assert_eq!(micro_f1(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
        for c in 0..3 {
            assert_eq!(per_class_f1(&cm, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn hand_evaluated_matrix() {
        let cm = ConfusionMatrix::from_counts([[5, 1, 0], [2, 4, 0], [0, 0, 0]]);
        assert_eq!(micro_f1(&cm).unwrap(), 0.75);
        let p: f64 = 5.0 / 7.0;
        let r: f64 = 5.0 / 6.0;
        let f0 = per_class_f1(&cm, 0).unwrap();
        assert!((f0 - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f0 - 0.769).abs() < 1e-3);
        // class 2 absent from both predictions and labels
        assert_eq!(per_class_f1(&cm, 2).unwrap(), 0.0);
    }

    #[test]
    fn absent_class_pulls_macro_down() {
        let cm = confusion(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(per_class_f1(&cm, 2).unwrap(), 0.0);
        assert!((macro_f1(&cm).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let cm = ConfusionMatrix::default();
        assert_eq!(micro_f1(&cm), Err(MetricsError::Empty));
        assert_eq!(macro_f1(&cm), Err(MetricsError::Empty));
        assert!(MetricsReport::from_confusion(&cm).is_err());
    }
}
