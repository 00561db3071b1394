//! Pixel-level confusion matrices and F1 scores.
//!
//! Per-class F1 is the harmonic mean of precision and recall. Degenerate
//! cases follow one convention everywhere: `TP = FP = FN = 0` scores 1 (the
//! class is absent and was never predicted), otherwise `TP = 0` scores 0.
//! The damage Macro-F1 averages the four damage classes; background is
//! excluded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{run_two_stage_prebuilt, PipelineSpec};
use crate::augment::build_input;
use crate::raster::{BinaryMask, DamageClass, DamageMask, ImagePair};

/// Square count matrix, `counts[t * k + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Five classes: background plus the four damage levels.
    pub fn damage() -> Self {
        Self::new(5)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Scores every pixel of a label pair.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(bad) = pred.iter().chain(truth).find(|v| **v as usize >= self.k) {
            return Err(Error::invalid(format!("label {bad} outside a {}-class matrix", self.k)));
        }
        for (p, t) in pred.iter().zip(truth) {
            self.counts[*t as usize * self.k + *p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, FP, FN)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

/// Adds the pixels of `pred` vs `gt` to `cm`.
pub fn accumulate_confusion(pred: &DamageMask, gt: &DamageMask, mut cm: ConfusionMatrix) -> Result<ConfusionMatrix> {
    if cm.classes() != 5 {
        return Err(Error::invalid("damage confusion matrix must have 5 classes"));
    }
    if !pred.same_shape(gt.width(), gt.height()) {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    cm.accumulate(pred.data(), gt.data())?;
    Ok(cm)
}

/// F1 from raw counts, with the degenerate conventions above.
pub fn f1_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    if tp == 0 {
        return if fp == 0 && fneg == 0 { 1.0 } else { 0.0 };
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1_per_class(cm: &ConfusionMatrix, class: usize) -> f64 {
    let (tp, fp, fneg) = cm.class_counts(class);
    f1_from_counts(tp, fp, fneg)
}

/// Mean of exactly four per-class F1 scores.
pub fn macro_f1(per_class: &[f64]) -> Result<f64> {
    if per_class.len() != 4 {
        return Err(Error::invalid(format!(
            "Macro-F1 averages 4 damage classes, got {} values",
            per_class.len()
        )));
    }
    Ok(per_class.iter().sum::<f64>() / 4.0)
}

/// Binary F1 of the building class.
pub fn localization_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_shape(gt.width(), gt.height()) {
        return Err(Error::invalid("localization masks differ in size"));
    }
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(pred.data(), gt.data())?;
    Ok(f1_per_class(&cm, 1))
}

/// The six numeric columns of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub localization_f1: f64,
    /// No-Damage, Minor, Major, Destroyed.
    pub per_class_f1: [f64; 4],
    pub macro_f1: f64,
}

pub const COLUMN_NAMES: [&str; 6] = ["Localization", "No-Damage", "Minor", "Major", "Destroyed", "Macro F1"];

impl F1Report {
    /// Report from pooled damage counts and pooled building counts.
    pub fn from_matrices(damage: &ConfusionMatrix, localization: &ConfusionMatrix) -> Self {
        let per_class_f1 = DamageClass::ALL.map(|c| f1_per_class(damage, c.label() as usize));
        Self {
            localization_f1: f1_per_class(localization, 1),
            macro_f1: per_class_f1.iter().sum::<f64>() / 4.0,
            per_class_f1,
        }
    }

    pub fn columns(&self) -> [f64; 6] {
        let p = self.per_class_f1;
        [self.localization_f1, p[0], p[1], p[2], p[3], self.macro_f1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Single-row aligned table.
    pub fn to_table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), Some(self.clone()))], &[[false; 6]])
    }
}

/// Aligned text table: method label plus six 4-decimal columns. `marks`
/// flags cells to suffix with `*`; rows without metrics print `ERROR`.
pub fn format_table(rows: &[(String, Option<F1Report>)], marks: &[[bool; 6]]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let col_w = COLUMN_NAMES.iter().map(|c| c.len()).max().unwrap_or(0).max(8) + 2;
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Method");
    for c in COLUMN_NAMES {
        let _ = write!(out, "{c:>col_w$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + 6 * col_w));
    out.push('\n');
    for (i, (label, report)) in rows.iter().enumerate() {
        let _ = write!(out, "{label:<label_w$}");
        match report {
            Some(r) => {
                for (j, v) in r.columns().iter().enumerate() {
                    let mark = if marks.get(i).is_some_and(|m| m[j]) { "*" } else { " " };
                    let cell = format!("{v:.4}{mark}");
                    let _ = write!(out, "{cell:>col_w$}");
                }
            }
            None => {
                for _ in 0..6 {
                    let _ = write!(out, "{:>col_w$}", "ERROR ");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Pools predicted `(footprint, damage)` masks against ground truth.
/// Ground-truth footprints are `gt > 0`.
pub fn evaluate_predictions(predictions: &[(BinaryMask, DamageMask)], truth: &[DamageMask]) -> Result<F1Report> {
    if predictions.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty split"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::invalid("prediction and ground-truth counts differ"));
    }
    let mut damage = ConfusionMatrix::damage();
    let mut loc = ConfusionMatrix::new(2);
    for ((pred_loc, pred), gt) in predictions.iter().zip(truth) {
        damage = accumulate_confusion(pred, gt, damage)?;
        if !pred_loc.same_shape(gt.width(), gt.height()) {
            return Err(Error::invalid("localization mask differs in size from ground truth"));
        }
        loc.accumulate(pred_loc.data(), gt.footprint().data())?;
    }
    Ok(F1Report::from_matrices(&damage, &loc))
}

/// Runs the pipeline on every pair of the split and pools the counts.
pub fn evaluate_split(spec: &PipelineSpec, split: &[(ImagePair, DamageMask)]) -> Result<F1Report> {
    if split.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty split"));
    }
    let mut preds = Vec::with_capacity(split.len());
    let mut truth = Vec::with_capacity(split.len());
    for (pair, gt) in split {
        let input = build_input(pair, &spec.aug_config)?;
        preds.push(run_two_stage_prebuilt(spec, pair, &input)?);
        truth.push(gt.clone());
    }
    evaluate_predictions(&preds, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(w: usize, h: usize, rng: &mut impl Rng) -> DamageMask {
        DamageMask::new(w, h, (0..w * h).map(|_| rng.random_range(0..5u8)).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_mask(6, 5, &mut rng);
        let cm = accumulate_confusion(&gt, &gt, ConfusionMatrix::damage()).unwrap();
        for t in 0..5 {
            for p in 0..5 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        assert_eq!(cm.total(), 30);
    }

    #[test]
    fn two_pixel_case() {
        let gt = DamageMask::new(2, 1, vec![1, 4]).unwrap();
        let pred = DamageMask::new(2, 1, vec![1, 3]).unwrap();
        let cm = accumulate_confusion(&pred, &gt, ConfusionMatrix::damage()).unwrap();
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(4, 3), 1);
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn matrix_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_mask(8, 8, &mut rng);
        let pred = random_mask(8, 8, &mut rng);
        let cm = accumulate_confusion(&pred, &gt, ConfusionMatrix::damage()).unwrap();
        for t in 0..5u8 {
            for p in 0..5u8 {
                let mut n = 0;
                for y in 0..8 {
                    for x in 0..8 {
                        if gt.get(x, y) == t && pred.get(x, y) == p {
                            n += 1;
                        }
                    }
                }
                assert_eq!(cm.get(t as usize, p as usize), n);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DamageMask::zeros(2, 2);
        let b = DamageMask::zeros(4, 1);
        assert!(accumulate_confusion(&a, &b, ConfusionMatrix::damage()).is_err());
        assert!(accumulate_confusion(&a, &a, ConfusionMatrix::new(4)).is_err());
        assert!(localization_f1(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(1, 4)).is_err());
    }

    #[test]
    fn f1_spot_values() {
        assert_eq!(f1_from_counts(5, 0, 0), 1.0);
        assert!((f1_from_counts(2, 1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_from_counts(0, 5, 0), 0.0);
        assert_eq!(f1_from_counts(0, 0, 0), 1.0);
    }

    #[test]
    fn macro_f1_values() {
        let a = macro_f1(&[0.7182, 0.4313, 0.5558, 0.5156]).unwrap();
        assert_eq!(format!("{a:.4}"), "0.5552");
        let b = macro_f1(&[0.7108, 0.4463, 0.5420, 0.5073]).unwrap();
        assert_eq!(format!("{b:.4}"), "0.5516");
        assert_eq!(macro_f1(&[1.0; 4]).unwrap(), 1.0);
        assert!(macro_f1(&[1.0; 5]).is_err());
        assert!(macro_f1(&[]).is_err());
    }

    #[test]
    fn localization_cases() {
        let gt = BinaryMask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(localization_f1(&gt, &gt).unwrap(), 1.0);
        assert_eq!(localization_f1(&BinaryMask::zeros(4, 1), &gt).unwrap(), 0.0);
        let pred = BinaryMask::new(4, 1, vec![1, 0, 1, 0]).unwrap();
        assert!((localization_f1(&pred, &gt).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_predictions_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<DamageMask> = (0..3).map(|_| random_mask(5, 5, &mut rng)).collect();
        let preds: Vec<_> = gts.iter().map(|g| (g.footprint(), g.clone())).collect();
        let r = evaluate_predictions(&preds, &gts).unwrap();
        assert_eq!(r.columns(), [1.0; 6]);
    }

    #[test]
    fn all_background_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gts: Vec<DamageMask> = (0..2).map(|_| random_mask(6, 6, &mut rng)).collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| (BinaryMask::zeros(6, 6), DamageMask::zeros(g.width(), g.height())))
            .collect();
        let r = evaluate_predictions(&preds, &gts).unwrap();
        assert_eq!(r.per_class_f1, [0.0; 4]);
        assert_eq!(r.macro_f1, 0.0);
        assert!(evaluate_predictions(&[], &[]).is_err());
    }

    #[test]
    fn pooled_two_image_split_matches_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts: Vec<DamageMask> = (0..2).map(|_| random_mask(4, 3, &mut rng)).collect();
        let preds: Vec<DamageMask> = (0..2).map(|_| random_mask(4, 3, &mut rng)).collect();
        let pairs: Vec<_> = preds.iter().map(|p| (p.footprint(), p.clone())).collect();
        let r = evaluate_predictions(&pairs, &gts).unwrap();
        // Single pass over the concatenated pixels.
        let all_gt: Vec<u8> = gts.iter().flat_map(|g| g.data().to_vec()).collect();
        let all_pred: Vec<u8> = preds.iter().flat_map(|g| g.data().to_vec()).collect();
        for c in 1..=4u8 {
            let tp = all_gt.iter().zip(&all_pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
            let fp = all_gt.iter().zip(&all_pred).filter(|(g, p)| **g != c && **p == c).count() as f64;
            let fneg = all_gt.iter().zip(&all_pred).filter(|(g, p)| **g == c && **p != c).count() as f64;
            let expect = if tp == 0.0 {
                if fp + fneg == 0.0 { 1.0 } else { 0.0 }
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            };
            assert!((r.per_class_f1[c as usize - 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn table_has_six_numeric_columns() {
        let r = F1Report { localization_f1: 0.8494, per_class_f1: [0.7108, 0.4463, 0.5420, 0.5073], macro_f1: 0.5516 };
        let t = r.to_table("RGB only + DA");
        let line = t.lines().nth(2).unwrap();
        assert!(line.starts_with("RGB only + DA"));
        assert_eq!(line.split_whitespace().filter(|c| c.parse::<f64>().is_ok()).count(), 6);
        assert!(line.contains("0.5516"));
    }

    proptest! {
        #[test]
        fn f1_matches_precision_recall_oracle(counts in prop::collection::vec(0u64..50, 25), c in 0usize..5) {
            let mut cm = ConfusionMatrix::damage();
            for t in 0..5 {
                for p in 0..5 {
                    let n = counts[t * 5 + p];
                    let pred = vec![p as u8; n as usize];
                    let truth = vec![t as u8; n as usize];
                    cm.accumulate(&pred, &truth).unwrap();
                }
            }
            let f1 = f1_per_class(&cm, c);
            prop_assert!((0.0..=1.0).contains(&f1));
            let tp = counts[c * 5 + c] as f64;
            let predicted: f64 = (0..5).map(|t| counts[t * 5 + c] as f64).sum();
            let actual: f64 = (0..5).map(|p| counts[c * 5 + p] as f64).sum();
            let expect = if tp == 0.0 {
                if predicted == 0.0 && actual == 0.0 { 1.0 } else { 0.0 }
            } else {
                let (pr, rc) = (tp / predicted, tp / actual);
                2.0 * pr * rc / (pr + rc)
            };
            prop_assert!((f1 - expect).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_is_permutation_invariant(v in prop::collection::vec(0.0f64..=1.0, 4)) {
            let m = macro_f1(&v).unwrap();
            prop_assert!((m - (v[0] + v[1] + v[2] + v[3]) / 4.0).abs() < 1e-12);
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            prop_assert!((macro_f1(&rev).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn accumulation_is_order_independent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<(DamageMask, DamageMask)> =
                (0..4).map(|_| (random_mask(3, 3, &mut rng), random_mask(3, 3, &mut rng))).collect();
            let fold = |order: &[usize]| {
                order.iter().fold(ConfusionMatrix::damage(), |cm, i| {
                    accumulate_confusion(&items[*i].0, &items[*i].1, cm).unwrap()
                })
            };
            prop_assert_eq!(fold(&[0, 1, 2, 3]), fold(&[3, 1, 0, 2]));
        }
    }
}
