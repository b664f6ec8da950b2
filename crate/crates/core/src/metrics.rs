//! Confusion-matrix accumulation, Mean IoU and Global Avg.

use crate::data::{pad_to_16, Sample};
use crate::error::{data_err, Error, Result};
use crate::sdn::SdnModel;
use crate::tensor::LabelMap;

/// `t[i][j]` counts pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalAccumulator {
    classes: usize,
    t: Vec<u64>,
}

/// Mean IoU with the classes that took part in it.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub mean: f64,
    /// IoU per class; `None` when the class never occurs in prediction or
    /// ground truth.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

impl EvalAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            t: vec![0; classes * classes],
        }
    }

    /// Build from a row-major `classes x classes` matrix.
    pub fn from_matrix(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(data_err!("confusion matrix must be square"));
        }
        Ok(Self {
            classes,
            t: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.t[truth * self.classes + pred]
    }

    /// `T_i`, the number of pixels whose true class is `i`.
    pub fn class_total(&self, i: usize) -> u64 {
        self.t[i * self.classes..(i + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.t.iter().sum()
    }

    /// Add every pixel whose ground truth is not `ignore`.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(data_err!(
                "prediction {}x{}x{} and ground truth {}x{}x{} differ in shape",
                pred.n,
                pred.h,
                pred.w,
                truth.n,
                truth.h,
                truth.w
            ));
        }
        for (&p, &g) in pred.data.iter().zip(&truth.data) {
            if g == ignore {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.classes || g >= self.classes {
                return Err(data_err!("label {} outside 0..{}", p.max(g), self.classes));
            }
            self.t[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(data_err!(
                "cannot merge {} and {} class accumulators",
                self.classes,
                other.classes
            ));
        }
        for (a, b) in self.t.iter_mut().zip(&other.t) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou_report(&self) -> Result<IouReport> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|i| {
                let tii = self.count(i, i);
                let column: u64 = (0..c).map(|j| self.count(j, i)).sum();
                let union = self.class_total(i) + column - tii;
                (union > 0).then(|| tii as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Undefined("mean IoU of an empty accumulator".into()));
        }
        let excluded = (0..c).filter(|&i| per_class[i].is_none()).collect();
        Ok(IouReport {
            mean: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            excluded,
        })
    }

    /// Mean over classes of `t_ii / (T_i + sum_j t_ji - t_ii)`, skipping
    /// classes with an empty union.
    pub fn mean_iou(&self) -> Result<f64> {
        self.iou_report().map(|r| r.mean)
    }

    /// `sum_i t_ii / sum_i T_i`.
    pub fn global_avg(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined("global average over zero pixels".into()));
        }
        let diag: u64 = (0..self.classes).map(|i| self.count(i, i)).sum();
        Ok(diag as f64 / total as f64)
    }
}

/// Predict every sample (padded with `mean` as needed) and accumulate the
/// confusion matrix against its labels.
pub fn evaluate(
    model: &mut SdnModel<f32>,
    samples: &[Sample],
    mean: &[f64; 3],
) -> Result<EvalAccumulator> {
    let classes = model.config().num_classes;
    let ignore = model.config().ignore_index;
    let mut acc = EvalAccumulator::new(classes);
    for s in samples {
        let (padded, (h, w)) = pad_to_16(&s.image, mean)?;
        let pred = model.predict(&padded)?.crop(h, w);
        acc.add(&pred, &s.labels, ignore)?;
    }
    Ok(acc)
}
