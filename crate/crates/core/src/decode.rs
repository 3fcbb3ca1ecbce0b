//! Per-cell threshold decoding with background precedence, plus the
//! `yolic-pred/1` dump format.
//!
//! Each cell is decided from its own `M + 1` probabilities only:
//! - background probability `>= theta`: background, whatever the objects say
//! - otherwise every class with probability `>= theta` is decided
//! - nothing clears `theta`: background, flagged low-confidence

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeom::LabelLayout;
use crate::labelkit::CellLabelVector;

pub const PREDICTION_VERSION: &str = "yolic-pred/1";
pub const DEFAULT_THETA: f32 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("expected {expected} probabilities, got {found}")]
    Length { expected: usize, found: usize },
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("threshold {0} is outside [0, 1]")]
    BadTheta(f32),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub object_probs: Vec<f32>,
    pub background_prob: f32,
    pub decided: Vec<usize>,
    pub is_background: bool,
    /// Background only because no output cleared the threshold.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Binary {
    Risk,
    Road,
}

/// Decides one cell from its `M + 1` block (objects first, background last).
pub fn decode_cell(block: &[f32], theta: f32) -> CellPrediction {
    let (objects, bg) = block.split_at(block.len() - 1);
    let background_prob = bg[0];
    let (decided, low_confidence) = if background_prob >= theta {
        (Vec::new(), false)
    } else {
        let d: Vec<usize> = (0..objects.len()).filter(|&k| objects[k] >= theta).collect();
        let empty = d.is_empty();
        (d, empty)
    };
    CellPrediction {
        object_probs: objects.to_vec(),
        background_prob,
        is_background: decided.is_empty(),
        decided,
        low_confidence,
    }
}

pub fn decode(probs: &[f32], layout: LabelLayout, theta: f32) -> Result<Vec<CellPrediction>, DecodeError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(DecodeError::BadTheta(theta));
    }
    if probs.len() != layout.n_outputs() {
        return Err(DecodeError::Length {
            expected: layout.n_outputs(),
            found: probs.len(),
        });
    }
    if let Some((index, &value)) = probs.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(DecodeError::OutOfRange { index, value });
    }
    Ok(probs
        .chunks_exact(layout.block_len())
        .map(|b| decode_cell(b, theta))
        .collect())
}

pub fn to_binary(preds: &[CellPrediction]) -> Vec<Binary> {
    preds
        .iter()
        .map(|p| if p.decided.is_empty() { Binary::Road } else { Binary::Risk })
        .collect()
}

/// Ground truth as certain predictions: bit 1 becomes probability 1.
pub fn labels_to_predictions(labels: &CellLabelVector) -> Vec<CellPrediction> {
    let probs: Vec<f32> = labels.bits().iter().map(|&b| f32::from(b)).collect();
    probs
        .chunks_exact(labels.layout().block_len())
        .map(|b| decode_cell(b, DEFAULT_THETA))
        .collect()
}

/// Writes the prediction dump: a header `yolic-pred/1 N M THETA`, then per
/// cell the `M + 1` probabilities, a `|`, and the decided classes, `bg` for
/// background, or `bg?` for low-confidence background.
pub fn write_predictions(preds: &[CellPrediction], theta: f32) -> String {
    let m = preds.first().map_or(0, |p| p.object_probs.len());
    let mut out = format!("{PREDICTION_VERSION} {} {m} {theta:.6}\n", preds.len());
    for p in preds {
        for v in p.object_probs.iter().chain([&p.background_prob]) {
            let _ = write!(out, "{v:.6} ");
        }
        out.push('|');
        if p.decided.is_empty() {
            out.push_str(if p.low_confidence { " bg?" } else { " bg" });
        }
        for k in &p.decided {
            let _ = write!(out, " {k}");
        }
        out.push('\n');
    }
    out
}

/// Parses a prediction dump, returning the layout, threshold and cells.
pub fn read_predictions(text: &str) -> Result<(LabelLayout, f32, Vec<CellPrediction>), DecodeError> {
    let ferr = |line: usize, message: String| DecodeError::Format { line, message };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ferr(1, "empty document".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != PREDICTION_VERSION {
        return Err(ferr(1, format!("expected `{PREDICTION_VERSION} N M THETA`, got {header:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| ferr(1, format!("bad count {s:?}")));
    let (n, m) = (num(fields[1])?, num(fields[2])?);
    let theta: f32 = fields[3].parse().map_err(|_| ferr(1, format!("bad threshold {:?}", fields[3])))?;
    let layout = LabelLayout::new(n, m);
    let mut preds = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (probs, decision) = line
            .split_once('|')
            .ok_or_else(|| ferr(ln, "missing `|` separator".into()))?;
        let probs: Vec<f32> = probs
            .split_whitespace()
            .map(|s| s.parse::<f32>().map_err(|_| ferr(ln, format!("bad probability {s:?}"))))
            .collect::<Result<_, _>>()?;
        if probs.len() != m + 1 {
            return Err(ferr(ln, format!("expected {} probabilities, got {}", m + 1, probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ferr(ln, format!("probability {p} outside [0, 1]")));
        }
        let tokens: Vec<&str> = decision.split_whitespace().collect();
        let (decided, low_confidence) = match tokens.as_slice() {
            ["bg"] => (Vec::new(), false),
            ["bg?"] => (Vec::new(), true),
            [] => return Err(ferr(ln, "missing decision".into())),
            ks => {
                let d = ks
                    .iter()
                    .map(|s| match s.parse::<usize>() {
                        Ok(k) if k < m => Ok(k),
                        _ => Err(ferr(ln, format!("bad class {s:?}"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (d, false)
            }
        };
        preds.push(CellPrediction {
            object_probs: probs[..m].to_vec(),
            background_prob: probs[m],
            is_background: decided.is_empty(),
            decided,
            low_confidence,
        });
    }
    if preds.len() != n {
        return Err(ferr(0, format!("expected {n} cells, got {}", preds.len())));
    }
    Ok((layout, theta, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs_for(cells: &[&[f32]]) -> Vec<f32> {
        cells.iter().flat_map(|c| c.iter().copied()).collect()
    }

    #[test]
    fn background_takes_precedence() {
        let p = decode(&[0.7, 0.6], LabelLayout::new(1, 1), 0.5).unwrap();
        assert!(p[0].is_background && !p[0].low_confidence);
        assert!(p[0].decided.is_empty());
    }

    #[test]
    fn objects_over_threshold_are_decided() {
        let p = decode(&[0.8, 0.6, 0.1, 0.2], LabelLayout::new(1, 3), 0.5).unwrap();
        assert_eq!(p[0].decided, vec![0, 1]);
        assert!(!p[0].is_background);
    }

    #[test]
    fn nothing_over_threshold_is_low_confidence_background() {
        let p = decode(&[0.3, 0.49, 0.4], LabelLayout::new(1, 2), 0.5).unwrap();
        assert!(p[0].is_background && p[0].low_confidence);
    }

    #[test]
    fn tie_counts_as_over() {
        let p = decode(&[0.5, 0.2], LabelLayout::new(1, 1), 0.5).unwrap();
        assert_eq!(p[0].decided, vec![0]);
        let p = decode(&[0.9, 0.5], LabelLayout::new(1, 1), 0.5).unwrap();
        assert!(p[0].is_background);
    }

    #[test]
    fn precedence_can_release_objects_when_theta_rises() {
        // the background bit sits between the two thresholds
        let b = [0.9, 0.4];
        assert!(decode_cell(&b, 0.3).is_background);
        assert_eq!(decode_cell(&b, 0.5).decided, vec![0]);
    }

    #[test]
    fn input_validation() {
        let l = LabelLayout::new(2, 1);
        assert_eq!(decode(&[0.1; 3], l, 0.5), Err(DecodeError::Length { expected: 4, found: 3 }));
        assert!(matches!(decode(&[0.1, 1.5, 0.0, 0.0], l, 0.5), Err(DecodeError::OutOfRange { index: 1, .. })));
        assert!(matches!(decode(&[0.1, f32::NAN, 0.0, 0.0], l, 0.5), Err(DecodeError::OutOfRange { .. })));
        assert_eq!(decode(&[0.1; 4], l, 1.5), Err(DecodeError::BadTheta(1.5)));
    }

    #[test]
    fn binary_view() {
        let preds = decode(&probs_for(&[&[0.1, 0.9], &[0.9, 0.1], &[0.1, 0.1]]), LabelLayout::new(3, 1), 0.5).unwrap();
        assert_eq!(to_binary(&preds), vec![Binary::Road, Binary::Risk, Binary::Road]);
    }

    #[test]
    fn lifted_labels() {
        let gt = CellLabelVector::from_classes(3, &[vec![], vec![2]]);
        let preds = labels_to_predictions(&gt);
        assert_eq!(to_binary(&preds), vec![Binary::Road, Binary::Risk]);
        assert_eq!(preds[1].decided, vec![2]);
    }

    #[test]
    fn dump_round_trip() {
        let probs = probs_for(&[&[0.8, 0.6, 0.1, 0.2], &[0.2, 0.1, 0.3, 0.9], &[0.1, 0.2, 0.3, 0.4]]);
        let preds = decode(&probs, LabelLayout::new(3, 3), 0.5).unwrap();
        let text = write_predictions(&preds, 0.5);
        assert!(text.starts_with("yolic-pred/1 3 3 0.500000\n0.800000 0.600000 0.100000 0.200000 | 0 1\n"));
        assert!(text.contains("| bg\n") && text.contains("| bg?\n"));
        let (layout, theta, back) = read_predictions(&text).unwrap();
        assert_eq!(layout, LabelLayout::new(3, 3));
        assert_eq!(theta, 0.5);
        assert_eq!(back, preds);
    }

    #[test]
    fn dump_errors_name_lines() {
        let bad = "yolic-pred/1 1 1 0.5\n0.1 0.2 | 7\n";
        assert!(matches!(read_predictions(bad), Err(DecodeError::Format { line: 2, .. })));
        assert!(read_predictions("yolic-pred/1 2 1 0.5\n0.1 0.2 | bg\n").is_err());
        assert!(read_predictions("something else").is_err());
    }

    fn block(m: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(0.0f32..=1.0, m + 1)
    }

    proptest! {
        #[test]
        fn lifting_then_decoding_recovers_labels(
            cells in proptest::collection::vec(proptest::collection::btree_set(0usize..4, 0..3), 1..8)
        ) {
            let cells: Vec<Vec<usize>> = cells.into_iter().map(|s| s.into_iter().collect()).collect();
            let gt = CellLabelVector::from_classes(4, &cells);
            let preds = labels_to_predictions(&gt);
            for (p, want) in preds.iter().zip(&cells) {
                prop_assert_eq!(&p.decided, want);
                prop_assert!(!p.low_confidence);
            }
        }

        #[test]
        fn binary_agrees_with_background_flag(probs in proptest::collection::vec(0.0f32..=1.0, 4 * 5)) {
            let preds = decode(&probs, LabelLayout::new(5, 3), 0.5).unwrap();
            for (p, b) in preds.iter().zip(to_binary(&preds)) {
                prop_assert_eq!(p.is_background, b == Binary::Road);
                prop_assert_eq!(p.is_background, p.decided.is_empty());
            }
        }

        #[test]
        fn raising_theta_never_adds(b in block(4), t1 in 0.0f32..=1.0, t2 in 0.0f32..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let bg = b[4];
            prop_assume!(!(lo..hi).contains(&bg));
            let a = decode_cell(&b, lo);
            let c = decode_cell(&b, hi);
            prop_assert!(c.decided.iter().all(|k| a.decided.contains(k)));
            prop_assert!(!(a.is_background && !c.is_background));
        }

        #[test]
        fn background_bit_decides_alone(b in block(3), others in block(3), theta in 0.0f32..=1.0) {
            prop_assume!(b[3] >= theta);
            let mut swapped = others.clone();
            swapped[3] = b[3];
            prop_assert_eq!(decode_cell(&b, theta).decided, decode_cell(&swapped, theta).decided);
            prop_assert!(decode_cell(&b, theta).is_background);
        }
    }
}
