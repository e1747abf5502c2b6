//! Confusion matrices and the per-class accuracy / IoU metrics derived from them.
//!
//! Rows are ground truth, columns predictions: entry `(i, j)` counts pixels
//! of true class `i` predicted as `j`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::LabelMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: m,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn accumulate(&mut self, predicted: &LabelMask, truth: &LabelMask) -> Result<()> {
        if (predicted.width, predicted.height) != (truth.width, truth.height) {
            return Err(Error::Data(format!(
                "prediction {}x{} and truth {}x{} differ",
                predicted.width, predicted.height, truth.width, truth.height
            )));
        }
        predicted.validate(self.classes)?;
        truth.validate(self.classes)?;
        for (&p, &t) in predicted.data.iter().zip(&truth.data) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; merging per-worker matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        crate::error::check_dim("ConfusionMatrix::merge", "classes", self.classes, other.classes)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        metrics(self)
    }

    /// Raw counts as CSV, one row per ground-truth class.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("truth\\predicted");
        for j in 0..self.classes {
            let _ = write!(out, ",{}", name(class_names, j));
        }
        out.push('\n');
        for i in 0..self.classes {
            out.push_str(&name(class_names, i));
            for j in 0..self.classes {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

fn name(names: &[&str], i: usize) -> String {
    names.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `n_ii / t_i`; `None` when the class is absent from the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean of the per-class accuracies over present classes.
    pub mean_class_accuracy: f64,
    pub mean_iou: f64,
    /// Correct pixels over all pixels.
    pub overall_accuracy: f64,
    /// Classes excluded from the means because they have no ground-truth pixels.
    pub absent_classes: Vec<usize>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if cm.classes == 0 || total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let mut acc = Vec::with_capacity(cm.classes);
    let mut iou = Vec::with_capacity(cm.classes);
    let mut absent = Vec::new();
    let mut trace = 0u64;
    for i in 0..cm.classes {
        let t = cm.row_sum(i);
        let n_ii = cm.get(i, i);
        trace += n_ii;
        if t == 0 {
            absent.push(i);
            acc.push(None);
            iou.push(None);
            continue;
        }
        acc.push(Some(n_ii as f64 / t as f64));
        let denom = t + cm.col_sum(i) - n_ii;
        iou.push(Some(n_ii as f64 / denom as f64));
    }
    let present = (cm.classes - absent.len()) as f64;
    let mean = |v: &[Option<f64>]| v.iter().flatten().sum::<f64>() / present;
    Ok(Metrics {
        mean_class_accuracy: mean(&acc),
        mean_iou: mean(&iou),
        overall_accuracy: trace as f64 / total as f64,
        per_class_accuracy: acc,
        per_class_iou: iou,
        absent_classes: absent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub values: Vec<Option<f64>>,
}

impl Report {
    /// Per-class accuracy and IoU, then mean class accuracy, mean IoU, and
    /// overall pixel accuracy.
    pub fn new(cm: &ConfusionMatrix, class_names: &[&str]) -> Result<Self> {
        if class_names.len() != cm.classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.classes
            )));
        }
        let m = metrics(cm)?;
        let mut header = Vec::new();
        let mut values = Vec::new();
        for (i, n) in class_names.iter().enumerate() {
            header.push(format!("{n}_OA"));
            values.push(m.per_class_accuracy[i]);
            header.push(format!("{n}_IoU"));
            values.push(m.per_class_iou[i]);
        }
        header.extend(["mOA".to_string(), "mIoU".to_string(), "overall_accuracy".to_string()]);
        values.extend([Some(m.mean_class_accuracy), Some(m.mean_iou), Some(m.overall_accuracy)]);
        Ok(Self { header, values })
    }

    pub fn to_csv(&self) -> String {
        let cells: Vec<String> = self
            .values
            .iter()
            .map(|v| v.map_or_else(String::new, |v| v.to_string()))
            .collect();
        format!("{}\n{}\n", self.header.join(","), cells.join(","))
    }

    pub fn to_text(&self) -> String {
        let width = self.header.iter().map(String::len).max().unwrap_or(0).max(8);
        let mut out = String::new();
        for h in &self.header {
            let _ = write!(out, "{h:>width$} ");
        }
        out.push('\n');
        for v in &self.values {
            match v {
                Some(v) => {
                    let _ = write!(out, "{v:>width$.4} ");
                }
                None => {
                    let _ = write!(out, "{:>width$} ", "n/a");
                }
            }
        }
        out.push('\n');
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let (Some(h), Some(v)) = (lines.next(), lines.next()) else {
            return Err(Error::Data("report CSV needs a header and a value row".into()));
        };
        let header: Vec<String> = h.split(',').map(str::to_string).collect();
        let values = v
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Data(format!("bad report value `{c}`: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, values })
    }
}
