//! Confusion matrices and IoU reporting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape(format!("confusion matrix must be square, got {k} rows of lengths {:?}", rows.iter().map(Vec::len).collect::<Vec<_>>())));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose label is not `ignore_index`.
    pub fn update(&mut self, predictions: &[usize], labels: &[usize], ignore_index: usize) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &t) in predictions.iter().zip(labels) {
            if t == ignore_index {
                continue;
            }
            if t >= self.k || p >= self.k {
                return Err(Error::Data(format!("class id out of range: truth {t}, prediction {p}, K = {}", self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_update(
    conf: &mut ConfusionMatrix,
    predictions: &[usize],
    labels: &[usize],
    ignore_index: usize,
) -> Result<()> {
    conf.update(predictions, labels, ignore_index)
}

/// Per-class IoU (`None` where the class has zero union) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl MetricsReport {
    /// `class,iou` rows in percent with one decimal, `n/a` for excluded
    /// classes, then an `mIoU` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{k},{}", percent(*v)),
                None => writeln!(out, "{k},n/a"),
            }
            .expect("write to String");
        }
        writeln!(out, "mIoU,{}", percent(self.miou)).expect("write to String");
        out
    }
}

/// `100·v` with one decimal.
pub fn percent(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// `IoU_k = c_kk / (row_k + col_k − c_kk)`, averaged over classes with a
/// nonzero denominator.
pub fn miou(conf: &ConfusionMatrix) -> Result<MetricsReport> {
    if conf.total() == 0 {
        return Err(Error::Data("empty confusion matrix: no evaluated pixels".into()));
    }
    let k = conf.k;
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf.get(c, c);
            let row: u64 = (0..k).map(|j| conf.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| conf.get(i, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let applicable: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = applicable.iter().sum::<f64>() / applicable.len() as f64;
    Ok(MetricsReport { per_class_iou, miou })
}
