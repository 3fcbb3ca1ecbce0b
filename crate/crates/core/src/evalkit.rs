//! Precision, recall and F1 over (image, cell) pairs.
//!
//! Counting is per (cell, class): a true positive needs both the ground-truth
//! bit and the decided bit, a false positive only the decided bit, a false
//! negative only the ground-truth bit. The binary view collapses each cell to
//! Risk (any object) or Road (none) and counts both classes symmetrically.
//! "All" rows are unweighted means over the rows above them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeom::LabelLayout;
use crate::decode::{to_binary, Binary, CellPrediction};
use crate::labelkit::CellLabelVector;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("ground truth has layout {expected:?}, prediction {found:?}")]
    LayoutMismatch { expected: LabelLayout, found: LabelLayout },
    #[error("{found} class names for {expected} classes")]
    ClassNames { expected: usize, found: usize },
    #[error("{gt} ground-truth images but {pred} predictions")]
    ImageCount { gt: usize, pred: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Tally {
    fn add(&mut self, gt: bool, pred: bool) {
        match (gt, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn merge(&mut self, o: &Tally) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn metrics(&self) -> Prf {
        prf(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn prf(tp: u64, fp: u64, fn_: u64) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Unweighted mean of each column.
pub fn macro_mean(rows: &[Prf]) -> Prf {
    if rows.is_empty() {
        return Prf::default();
    }
    let n = rows.len() as f64;
    Prf {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
    }
}

/// Running counts; additive across images and mergeable across workers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub layout: LabelLayout,
    pub per_class: Vec<Tally>,
    pub risk: Tally,
    pub road: Tally,
    pub images: u64,
}

impl Counts {
    pub fn new(layout: LabelLayout) -> Self {
        Self {
            layout,
            per_class: vec![Tally::default(); layout.n_classes],
            risk: Tally::default(),
            road: Tally::default(),
            images: 0,
        }
    }

    pub fn accumulate(&mut self, gt: &CellLabelVector, preds: &[CellPrediction]) -> Result<(), EvalError> {
        let found = LabelLayout::new(preds.len(), preds.first().map_or(self.layout.n_classes, |p| p.object_probs.len()));
        if gt.layout() != self.layout || found != self.layout {
            return Err(EvalError::LayoutMismatch {
                expected: self.layout,
                found: if gt.layout() != self.layout { gt.layout() } else { found },
            });
        }
        for (cell, p) in preds.iter().enumerate() {
            for (k, t) in self.per_class.iter_mut().enumerate() {
                t.add(gt.object(cell, k), p.decided.contains(&k));
            }
        }
        self.add_binary(&binary_truth(gt), &to_binary(preds));
        self.images += 1;
        Ok(())
    }

    fn add_binary(&mut self, gt: &[Binary], pred: &[Binary]) {
        for (&g, &p) in gt.iter().zip(pred) {
            self.risk.add(g == Binary::Risk, p == Binary::Risk);
            self.road.add(g == Binary::Road, p == Binary::Road);
        }
    }

    pub fn merge(&mut self, other: &Counts) -> Result<(), EvalError> {
        if other.layout != self.layout {
            return Err(EvalError::LayoutMismatch {
                expected: self.layout,
                found: other.layout,
            });
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.merge(b);
        }
        self.risk.merge(&other.risk);
        self.road.merge(&other.road);
        self.images += other.images;
        Ok(())
    }
}

fn binary_truth(gt: &CellLabelVector) -> Vec<Binary> {
    (0..gt.n_cells())
        .map(|c| if gt.classes(c).is_empty() { Binary::Road } else { Binary::Risk })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub counts: Tally,
    pub metrics: Prf,
}

impl Row {
    fn new(name: &str, counts: Tally) -> Self {
        Self {
            name: name.to_string(),
            counts,
            metrics: counts.metrics(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub risk: Row,
    pub road: Row,
    pub all: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: u64,
    pub cells: usize,
    pub classes: Vec<Row>,
    pub all: Prf,
    pub binary: BinaryReport,
}

fn binary_report(risk: Tally, road: Tally) -> BinaryReport {
    let risk = Row::new("Risk", risk);
    let road = Row::new("Road", road);
    let all = macro_mean(&[risk.metrics, road.metrics]);
    BinaryReport { risk, road, all }
}

pub fn finalize(counts: &Counts, class_names: &[String]) -> Result<MetricsReport, EvalError> {
    if class_names.len() != counts.per_class.len() {
        return Err(EvalError::ClassNames {
            expected: counts.per_class.len(),
            found: class_names.len(),
        });
    }
    let classes: Vec<Row> = class_names
        .iter()
        .zip(&counts.per_class)
        .map(|(n, &t)| Row::new(n, t))
        .collect();
    let all = macro_mean(&classes.iter().map(|r| r.metrics).collect::<Vec<_>>());
    Ok(MetricsReport {
        images: counts.images,
        cells: counts.layout.n_cells,
        classes,
        all,
        binary: binary_report(counts.risk, counts.road),
    })
}

/// Risk/Road precision, recall and F1 over paired images.
pub fn binary_metrics(gt: &[CellLabelVector], preds: &[Vec<CellPrediction>]) -> Result<BinaryReport, EvalError> {
    if gt.len() != preds.len() {
        return Err(EvalError::ImageCount {
            gt: gt.len(),
            pred: preds.len(),
        });
    }
    let (mut risk, mut road) = (Tally::default(), Tally::default());
    for (g, p) in gt.iter().zip(preds) {
        if g.n_cells() != p.len() {
            return Err(EvalError::LayoutMismatch {
                expected: g.layout(),
                found: LabelLayout::new(p.len(), g.n_classes()),
            });
        }
        for (gb, pb) in binary_truth(g).into_iter().zip(to_binary(p)) {
            risk.add(gb == Binary::Risk, pb == Binary::Risk);
            road.add(gb == Binary::Road, pb == Binary::Road);
        }
    }
    Ok(binary_report(risk, road))
}

/// Accumulates every pair and finalizes.
pub fn evaluate(
    layout: LabelLayout,
    class_names: &[String],
    gt: &[CellLabelVector],
    preds: &[Vec<CellPrediction>],
) -> Result<MetricsReport, EvalError> {
    if gt.len() != preds.len() {
        return Err(EvalError::ImageCount {
            gt: gt.len(),
            pred: preds.len(),
        });
    }
    let mut counts = Counts::new(layout);
    for (g, p) in gt.iter().zip(preds) {
        counts.accumulate(g, p)?;
    }
    finalize(&counts, class_names)
}

impl MetricsReport {
    /// Aligned plain-text table with counts.
    pub fn to_text(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|r| r.name.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = format!("images {}  cells {}\n", self.images, self.cells);
        let header = |out: &mut String| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}  {:>8}  {:>8}",
                "class", "precision", "recall", "f1", "tp", "fp", "fn"
            );
        };
        let row = |out: &mut String, name: &str, m: &Prf, c: Option<&Tally>| {
            let _ = write!(out, "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}", m.precision, m.recall, m.f1);
            if let Some(c) = c {
                let _ = write!(out, "  {:>8}  {:>8}  {:>8}", c.tp, c.fp, c.fn_);
            }
            out.push('\n');
        };
        header(&mut out);
        for r in &self.classes {
            row(&mut out, &r.name, &r.metrics, Some(&r.counts));
        }
        row(&mut out, "All", &self.all, None);
        out.push('\n');
        header(&mut out);
        for r in [&self.binary.risk, &self.binary.road] {
            row(&mut out, &r.name, &r.metrics, Some(&r.counts));
        }
        row(&mut out, "All", &self.binary.all, None);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
