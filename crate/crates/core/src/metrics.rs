//! Confusion-matrix metrics: per-class IoU, mIoU, and pixel accuracy.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;

/// `K × K` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    /// Adds every pixel whose truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(shape_err!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.shape(),
                truth.shape()
            ));
        }
        let [_, h, w] = truth.shape();
        let locate = |i: usize| (i / (h * w), (i / w) % h, i % w);
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if p as usize >= self.k {
                let (n, y, x) = locate(i);
                return Err(Error::Data(format!(
                    "predicted class {p} at (sample {n}, row {y}, col {x}) is outside 0..{}",
                    self.k
                )));
            }
            if t == ignore {
                continue;
            }
            if t as usize >= self.k {
                let (n, y, x) = locate(i);
                return Err(Error::Data(format!(
                    "label {t} at (sample {n}, row {y}, col {x}) is outside 0..{}",
                    self.k
                )));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(shape_err!(
                "cannot merge {}-class and {}-class matrices",
                self.k,
                other.k
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` if the class never occurs in truth
    /// or prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let row: u64 = (0..self.k).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.k).map(|t| self.get(t, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|c| self.iou(c)).collect()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Contract("confusion matrix holds no pixels".into()));
        }
        Ok(())
    }

    /// Mean IoU over classes observed in truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(self.trace() as f64 / self.total() as f64)
    }
}

/// One model's scores for an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub miou: f64,
    pub pa: f64,
    pub per_class: Vec<Option<f64>>,
}

impl EvalRow {
    pub fn from_matrix(model: impl Into<String>, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(EvalRow {
            model: model.into(),
            miou: cm.miou()?,
            pa: cm.pixel_accuracy()?,
            per_class: cm.per_class_iou(),
        })
    }
}

/// Fixed-width text report: a `Model mIoU PA` table in percent with one
/// decimal, followed by per-class IoU for each row.
pub fn format_report(rows: &[EvalRow], ignore: u8) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# mIoU averages classes observed in truth or prediction; PA excludes pixels labelled {ignore}"
    );
    let _ = writeln!(s, "{:<16}{:>8}{:>8}", "Model", "mIoU", "PA");
    for r in rows {
        let _ = writeln!(s, "{:<16}{:>8.1}{:>8.1}", r.model, r.miou * 100.0, r.pa * 100.0);
    }
    for r in rows {
        let _ = writeln!(s);
        let _ = writeln!(s, "Per-class IoU ({})", r.model);
        let _ = writeln!(s, "{:<16}{:>8}", "Class", "IoU");
        for (c, iou) in r.per_class.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "{:<16}{:>8.1}", c, v * 100.0);
                }
                None => {
                    let _ = writeln!(s, "{:<16}{:>8}", c, "-");
                }
            }
        }
    }
    s
}

/// Machine-readable twin of [`format_report`]: fractions with 9 significant
/// digits, one column per class IoU (empty when the class was not observed).
pub fn report_csv(rows: &[EvalRow]) -> String {
    let k = rows.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    let mut s = String::from("model,miou,pa");
    for c in 0..k {
        let _ = write!(s, ",iou_{c}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.model, sig9(r.miou), sig9(r.pa));
        for c in 0..k {
            s.push(',');
            if let Some(Some(v)) = r.per_class.get(c) {
                s.push_str(&sig9(*v));
            }
        }
        s.push('\n');
    }
    s
}

/// Scientific notation with 9 significant digits.
pub fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}
