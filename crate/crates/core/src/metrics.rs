//! Evaluation metrics: ranking and threshold scores, calibrated Dice, IoU,
//! representation statistics and pseudo-label quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Matrix};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bag_auc: f64,
    pub instance_auc: f64,
    pub instance_auprc: f64,
    pub instance_max_f1: f64,
    pub dice: f64,
    pub iou: f64,
    pub inter_class_distance: f64,
    pub intra_class_deviation_pos: f64,
    pub intra_class_deviation_neg: f64,
    pub pseudo_label_precision: f64,
    pub pseudo_label_recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceCalibration {
    pub a: f64,
    pub b: f64,
}

fn check_len(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels, {} scores",
            labels.len(),
            scores.len()
        )));
    }
    Ok(())
}

/// Indices sorted by descending score, with contiguous groups of equal
/// scores reported as `(start, end)` ranges.
fn descending_groups(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && scores[idx[e]] == scores[idx[s]] {
            e += 1;
        }
        groups.push((s, e));
        s = e;
    }
    (idx, groups)
}

/// Mann–Whitney AUC; tied pairs count one half.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_len(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let (idx, groups) = descending_groups(scores);
    // Walk from the highest score; each positive beats every negative seen
    // later and ties with negatives in its own group.
    let mut neg_above = 0usize;
    let mut wins = 0.0;
    for (s, e) in groups {
        let p = idx[s..e].iter().filter(|&&i| labels[i] == 1).count();
        let n = (e - s) - p;
        wins += p as f64 * (n_neg - neg_above - n) as f64 + 0.5 * (p * n) as f64;
        neg_above += n;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision–recall curve with step interpolation:
/// `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds.
pub fn aupr(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_len(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs a positive".into()));
    }
    let (idx, groups) = descending_groups(scores);
    let (mut tp, mut fp, mut prev_r, mut area) = (0usize, 0usize, 0.0, 0.0);
    for (s, e) in groups {
        let p = idx[s..e].iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        fp += (e - s) - p;
        let r = tp as f64 / n_pos as f64;
        area += (r - prev_r) * tp as f64 / (tp + fp) as f64;
        prev_r = r;
    }
    Ok(area)
}

/// Best F1 over thresholds at observed scores, predicting positive when
/// `score ≥ threshold`. Ties keep the lowest threshold.
pub fn max_f1(labels: &[u8], scores: &[f64]) -> Result<(f64, f64)> {
    check_len(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("max F1 needs a positive".into()));
    }
    let (idx, groups) = descending_groups(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (-1.0, f64::NAN);
    for (s, e) in groups {
        let p = idx[s..e].iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        fp += (e - s) - p;
        let f1 = 2.0 * tp as f64 / (tp + fp + n_pos) as f64;
        if f1 >= best.0 {
            best = (f1, scores[idx[s]]);
        }
    }
    Ok(best)
}

/// Soft Dice `2Σ y p / (Σ y + Σ p)`; an all-empty pair scores 1.
pub fn dice(labels: &[u8], probs: &[f64]) -> Result<f64> {
    check_len(labels, probs)?;
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&y, &p) in labels.iter().zip(probs) {
        let y = f64::from(y);
        inter += y * p;
        sy += y;
        sp += p;
    }
    Ok(if sy + sp == 0.0 {
        1.0
    } else {
        2.0 * inter / (sy + sp)
    })
}

/// Dice after the linear calibration `p = σ(a·s + b)`.
pub fn dice_at(labels: &[u8], scores: &[f64], cal: DiceCalibration) -> Result<f64> {
    let p: Vec<f64> = scores.iter().map(|&s| sigmoid(cal.a * s + cal.b)).collect();
    dice(labels, &p)
}

/// The calibration grid: `a` in `[-5, 5]` step 0.1, `b` log-spaced over
/// `[0.1, 10]` with 100 points.
pub fn dice_grid() -> Vec<DiceCalibration> {
    let mut g = Vec::with_capacity(101 * 100);
    for i in 0..=100 {
        let a = -5.0 + 0.1 * i as f64;
        for j in 0..100 {
            let b = 10f64.powf(-1.0 + 2.0 * j as f64 / 99.0);
            g.push(DiceCalibration { a, b });
        }
    }
    g
}

/// Picks `(a, b)` maximizing validation Dice (first grid point on ties) and
/// reports test Dice there together with the best validation Dice.
pub fn dice_calibrated(
    labels: &[u8],
    scores: &[f64],
    val_labels: &[u8],
    val_scores: &[f64],
) -> Result<(f64, DiceCalibration, f64)> {
    if val_labels.is_empty() || !val_labels.contains(&1) {
        return Err(Error::Config(
            "Dice calibration needs a validation split with a positive".into(),
        ));
    }
    check_len(val_labels, val_scores)?;
    let mut best: Option<(f64, DiceCalibration)> = None;
    for cal in dice_grid() {
        let d = dice_at(val_labels, val_scores, cal)?;
        if best.is_none_or(|(b, _)| d > b) {
            best = Some((d, cal));
        }
    }
    let (val_dice, cal) = best.expect("grid is nonempty");
    Ok((dice_at(labels, scores, cal)?, cal, val_dice))
}

/// Intersection over union of binary masks; two empty masks give 1.
pub fn iou(labels: &[u8], preds: &[u8]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} labels, {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let inter = labels
        .iter()
        .zip(preds)
        .filter(|(&y, &p)| y == 1 && p == 1)
        .count();
    let union = labels
        .iter()
        .zip(preds)
        .filter(|(&y, &p)| y == 1 || p == 1)
        .count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn class_moments(features: &Matrix, rows: &[usize]) -> (Vec<f64>, Matrix) {
    let d = features.cols();
    let n = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for &r in rows {
        for (m, &x) in mu.iter_mut().zip(features.row(r)) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix::zeros(d, d);
    for &r in rows {
        let c: Vec<f64> = features
            .row(r)
            .iter()
            .zip(&mu)
            .map(|(x, m)| x - m)
            .collect();
        for i in 0..d {
            let row = cov.row_mut(i);
            for j in 0..d {
                row[j] += c[i] * c[j];
            }
        }
    }
    cov.data_mut().iter_mut().for_each(|v| *v /= n);
    (mu, cov)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix, found
/// with cyclic Jacobi rotations. Negative round-off is clamped to zero.
pub fn spectral_norm_psd(m: &Matrix) -> f64 {
    let d = m.rows();
    if d == 0 {
        return 0.0;
    }
    let mut a = m.clone();
    let off = |a: &Matrix| -> f64 {
        (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum()
    };
    let scale: f64 = a.data().iter().map(|v| v * v).sum();
    for _ in 0..100 {
        if off(&a) <= f64::EPSILON * f64::EPSILON * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the rotation in the (p, q) plane.
                for k in 0..d {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..d).map(|i| a.get(i, i)).fold(0.0, f64::max)
}

/// `(‖μ₊ − μ₋‖, √λmax(Σ₊), √λmax(Σ₋))` with population covariances.
pub fn class_stats(features: &Matrix, labels: &[u8]) -> Result<(f64, f64, f64)> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(
            "class statistics need both classes".into(),
        ));
    }
    let (mp, cp) = class_moments(features, &pos);
    let (mn, cn) = class_moments(features, &neg);
    let inter = mp
        .iter()
        .zip(&mn)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((
        inter,
        spectral_norm_psd(&cp).sqrt(),
        spectral_norm_psd(&cn).sqrt(),
    ))
}

/// Precision and recall of positive pseudo labels over the selected ids.
/// No positive predictions gives precision 1; no true positives gives
/// recall 1.
pub fn pseudo_quality(truth: &[u8], pseudo: &[u8], selected: &[usize]) -> Result<(f64, f64)> {
    if truth.len() != pseudo.len() {
        return Err(Error::Shape(format!(
            "{} truths, {} pseudo labels",
            truth.len(),
            pseudo.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &i in selected {
        let (t, p) = (
            *truth
                .get(i)
                .ok_or_else(|| Error::Shape(format!("id {i} out of range")))?,
            pseudo[i],
        );
        match (t == 1, p == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    Ok((precision, recall))
}

/// Brute-force reference implementations used by tests and the acceptance
/// harness.
pub mod reference {

    pub fn roc_auc(labels: &[u8], scores: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
        let mut t = scores.to_vec();
        t.sort_by(|a, b| b.total_cmp(a));
        t.dedup();
        t
    }

    fn confusion(labels: &[u8], scores: &[f64], t: f64) -> (f64, f64, f64) {
        let mut c = (0.0, 0.0, 0.0);
        for (&y, &s) in labels.iter().zip(scores) {
            match (s >= t, y == 1) {
                (true, true) => c.0 += 1.0,
                (true, false) => c.1 += 1.0,
                (false, true) => c.2 += 1.0,
                _ => {}
            }
        }
        c
    }

    pub fn aupr(labels: &[u8], scores: &[f64]) -> f64 {
        let mut prev_r = 0.0;
        let mut area = 0.0;
        for t in thresholds_desc(scores) {
            let (tp, fp, fneg) = confusion(labels, scores, t);
            let r = tp / (tp + fneg);
            area += (r - prev_r) * tp / (tp + fp);
            prev_r = r;
        }
        area
    }

    pub fn max_f1(labels: &[u8], scores: &[f64]) -> (f64, f64) {
        let mut best = (-1.0, f64::NAN);
        for t in thresholds_desc(scores) {
            let (tp, fp, fneg) = confusion(labels, scores, t);
            let f1 = 2.0 * tp / (2.0 * tp + fp + fneg);
            if f1 >= best.0 {
                best = (f1, t);
            }
        }
        best
    }

    pub fn dice(labels: &[u8], probs: &[f64]) -> f64 {
        let num: f64 = labels
            .iter()
            .zip(probs)
            .map(|(&y, &p)| 2.0 * f64::from(y) * p)
            .sum();
        let den: f64 =
            labels.iter().map(|&y| f64::from(y)).sum::<f64>() + probs.iter().sum::<f64>();
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    }

    pub fn iou(labels: &[u8], preds: &[u8]) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for (&y, &p) in labels.iter().zip(preds) {
            inter += f64::from(y & p);
            union += f64::from(y | p);
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0, 1], &[0.1, 0.9]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1], &[0.9, 0.1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0, 1, 1, 0], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[1, 1], &[0.1, 0.2]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(aupr(&[0, 1, 1], &[0.1, 0.8, 0.9]).unwrap(), 1.0);
        let v = aupr(&[0, 1, 0, 0, 1], &[0.3; 5]).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert!(aupr(&[0, 0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn f1_cases() {
        let (f, t) = max_f1(&[1, 0, 1], &[0.9, 0.8, 0.7]).unwrap();
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(t, 0.7);
        assert_eq!(max_f1(&[1, 0], &[0.9, 0.1]).unwrap().0, 1.0);
        assert_eq!(max_f1(&[1, 1, 1], &[0.2, 0.5, 0.9]).unwrap(), (1.0, 0.2));
    }

    #[test]
    fn dice_cases() {
        assert_eq!(dice(&[1, 0, 1], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(dice(&[1, 0], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(matches!(
            dice_calibrated(&[1], &[0.5], &[], &[]),
            Err(Error::Config(_))
        ));
        let g = dice_grid();
        assert_eq!(g.len(), 10_100);
        assert!((g[0].b - 0.1).abs() < 1e-15 && (g[99].b - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dice_calibration_is_grid_max() {
        let vl = [1, 0, 0, 1, 0, 1, 0, 0];
        let vs = [0.9, 0.2, 0.4, 0.7, 0.1, 0.6, 0.5, 0.3];
        let (_, _, best) = dice_calibrated(&vl, &vs, &vl, &vs).unwrap();
        for cal in dice_grid().into_iter().step_by(37) {
            assert!(dice_at(&vl, &vs, cal).unwrap() <= best);
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(iou(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(iou(&[1, 1, 0], &[1, 0, 0]).unwrap(), 0.5);
        assert_eq!(iou(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn class_stats_cases() {
        let f = Matrix::from_rows(&[vec![0.0, -1.0], vec![0.0, 1.0], vec![3.0, 4.0]]).unwrap();
        let (inter, dp, dn) = class_stats(&f, &[0, 0, 1]).unwrap();
        assert!((inter - 5.0).abs() < 1e-9);
        assert!((dn - 1.0).abs() < 1e-9);
        assert!(dp.abs() < 1e-9);
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let (_, dp, dn) = class_stats(&f, &[1, 0]).unwrap();
        assert_eq!((dp, dn), (0.0, 0.0));
        assert!(class_stats(&f, &[1, 1]).is_err());
    }

    #[test]
    fn class_stats_rotation_invariant() {
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let x = i as f64;
                vec![
                    (x * 0.7).sin() * 2.0 + if i % 2 == 0 { 1.0 } else { -1.0 },
                    (x * 1.3).cos(),
                    0.1 * x,
                ]
            })
            .collect();
        let labels: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let (c, s) = (0.4f64.cos(), 0.4f64.sin());
        let rot: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]])
            .collect();
        let a = class_stats(&Matrix::from_rows(&pts).unwrap(), &labels).unwrap();
        let b = class_stats(&Matrix::from_rows(&rot).unwrap(), &labels).unwrap();
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
    }

    #[test]
    fn pseudo_quality_cases() {
        let all = [0, 1, 2];
        assert_eq!(
            pseudo_quality(&[1, 0, 1], &[1, 0, 1], &all).unwrap(),
            (1.0, 1.0)
        );
        assert_eq!(
            pseudo_quality(&[1, 0, 1], &[0, 0, 0], &all).unwrap(),
            (1.0, 0.0)
        );
        assert_eq!(
            pseudo_quality(&[1, 1, 0], &[1, 0, 0], &all).unwrap(),
            (1.0, 0.5)
        );
    }

    fn data() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (2usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec(0u8..8, n),
            )
                .prop_map(|(l, s)| (l, s.into_iter().map(|v| v as f64 / 8.0).collect()))
        })
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force((mut labels, scores) in data()) {
            labels[0] = 1;
            labels[1] = 0;
            prop_assert!((roc_auc(&labels, &scores).unwrap() - reference::roc_auc(&labels, &scores)).abs() <= 1e-12);
            prop_assert!((aupr(&labels, &scores).unwrap() - reference::aupr(&labels, &scores)).abs() <= 1e-12);
            let (f, t) = max_f1(&labels, &scores).unwrap();
            let (rf, rt) = reference::max_f1(&labels, &scores);
            prop_assert!((f - rf).abs() <= 1e-12);
            prop_assert_eq!(t, rt);
            prop_assert!((dice(&labels, &scores).unwrap() - reference::dice(&labels, &scores)).abs() <= 1e-12);
            let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
            prop_assert_eq!(iou(&labels, &preds).unwrap(), reference::iou(&labels, &preds));
        }

        #[test]
        fn auc_invariant_under_monotone_transform((mut labels, scores) in data()) {
            labels[0] = 1;
            labels[1] = 0;
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&labels, &scores).unwrap(), roc_auc(&labels, &t).unwrap());
        }
    }
}
