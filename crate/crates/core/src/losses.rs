//! Contrastive losses over unit-norm projections and the instance
//! cross-entropy used by the CE-finetuning baseline.
//!
//! All denominators are evaluated in log space. Adjoints are closed-form and
//! are attached to the tape through [`Tape::linearized`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, logsumexp, Matrix, Tape, Var};
use crate::par;

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub temperature: f64,
}

impl SimilarityConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

/// Loss value with adjoints for every input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_same: Vec<Vec<f64>>,
    pub d_diff: Vec<Vec<f64>>,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// `exp(z1·z2/τ)` for unit vectors.
pub fn similarity(z1: &[f64], z2: &[f64], cfg: SimilarityConfig) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Shape(format!(
            "similarity of lengths {} and {}",
            z1.len(),
            z2.len()
        )));
    }
    check_unit(z1, "z1")?;
    check_unit(z2, "z2")?;
    Ok((dot(z1, z2) / cfg.temperature).exp())
}

/// InfoNCE for one anchor: the supervised loss with `S = {aug}`.
pub fn info_nce(
    anchor: &[f64],
    aug: &[f64],
    diffs: &[&[f64]],
    cfg: SimilarityConfig,
) -> Result<ContrastiveLoss> {
    sup_con(anchor, &[aug], diffs, cfg)
}

/// Supervised contrastive loss for one anchor.
///
/// The denominator is shared by every `S_x` term and covers `S_x ∪ D_x`
/// only; the anchor itself is not part of it.
pub fn sup_con(
    anchor: &[f64],
    same: &[&[f64]],
    diff: &[&[f64]],
    cfg: SimilarityConfig,
) -> Result<ContrastiveLoss> {
    if same.is_empty() {
        return Err(Error::Contract("same-label set is empty".into()));
    }
    check_unit(anchor, "anchor")?;
    for (i, v) in same.iter().chain(diff).enumerate() {
        if v.len() != anchor.len() {
            return Err(Error::Shape(format!("vector {i} has length {}", v.len())));
        }
        check_unit(v, "contrast vector")?;
    }
    let tau = cfg.temperature;
    let logits: Vec<f64> = same
        .iter()
        .chain(diff)
        .map(|v| dot(anchor, v) / tau)
        .collect();
    let lse = logsumexp(&logits)?;
    let ns = same.len() as f64;
    let loss = lse - logits[..same.len()].iter().sum::<f64>() / ns;

    // dL/dlogit_j = softmax_j − [j ∈ S]/|S|
    let coef: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &l)| (l - lse).exp() - if j < same.len() { 1.0 / ns } else { 0.0 })
        .collect();
    let mut d_anchor = vec![0.0; anchor.len()];
    let mut per_vec = Vec::with_capacity(coef.len());
    for (v, &c) in same.iter().chain(diff).zip(&coef) {
        for (da, &x) in d_anchor.iter_mut().zip(v.iter()) {
            *da += c * x / tau;
        }
        per_vec.push(anchor.iter().map(|&a| c * a / tau).collect::<Vec<f64>>());
    }
    let d_diff = per_vec.split_off(same.len());
    Ok(ContrastiveLoss {
        loss,
        d_anchor,
        d_same: per_vec,
        d_diff,
    })
}

/// `−[y log s + (1−y) log(1−s)]` with `s` clamped to `[1e-12, 1 − 1e-12]`.
/// Returns the loss and its derivative in `s`.
pub fn bce_instance(score: f64, label: u8) -> (f64, f64) {
    let s = score.clamp(1e-12, 1.0 - 1e-12);
    let y = f64::from(label.min(1));
    let loss = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
    let grad = (s - y) / (s * (1.0 - s));
    (loss, grad)
}

/// Row indices into a projection matrix for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorRows {
    pub anchor: usize,
    pub same: Vec<usize>,
    pub diff: Vec<usize>,
}

/// Mean supervised contrastive loss over anchors whose vectors are rows of
/// `z`, with its adjoint w.r.t. `z`.
///
/// Per-anchor terms are evaluated in parallel and summed in anchor order.
pub fn batch_sup_con(z: &Matrix, anchors: &[AnchorRows], tau: f64) -> Result<(f64, Matrix)> {
    if anchors.is_empty() {
        return Err(Error::Contract("no anchors in batch".into()));
    }
    let cfg = SimilarityConfig::new(tau)?;
    let terms = par::map_slice(anchors, |a| {
        let same: Vec<&[f64]> = a.same.iter().map(|&r| z.row(r)).collect();
        let diff: Vec<&[f64]> = a.diff.iter().map(|&r| z.row(r)).collect();
        sup_con(z.row(a.anchor), &same, &diff, cfg)
    });
    let n = anchors.len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for (a, t) in anchors.iter().zip(terms) {
        let t = t?;
        total += t.loss;
        add_scaled(grad.row_mut(a.anchor), &t.d_anchor, 1.0 / n);
        for (&r, d) in a.same.iter().zip(&t.d_same) {
            add_scaled(grad.row_mut(r), d, 1.0 / n);
        }
        for (&r, d) in a.diff.iter().zip(&t.d_diff) {
            add_scaled(grad.row_mut(r), d, 1.0 / n);
        }
    }
    Ok((total / n, grad))
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Records [`batch_sup_con`] on a tape as a scalar depending on `z`.
pub fn tape_sup_con(tape: &mut Tape, z: Var, anchors: &[AnchorRows], tau: f64) -> Result<Var> {
    let (loss, grad) = batch_sup_con(tape.value(z), anchors, tau)?;
    tape.linearized(z, loss, grad)
}

/// In-batch InfoNCE: rows `0..n` of `z` are first views, rows `n..2n` the
/// matching second views. Anchor `i` contrasts its second view against the
/// second views of the other `n − 1` items.
pub fn tape_info_nce(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let rows = tape.value(z).rows();
    if rows < 2 || !rows.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "in-batch InfoNCE needs paired views, got {rows} rows"
        )));
    }
    let n = rows / 2;
    let anchors: Vec<AnchorRows> = (0..n)
        .map(|i| AnchorRows {
            anchor: i,
            same: vec![n + i],
            diff: (0..n).filter(|&j| j != i).map(|j| n + j).collect(),
        })
        .collect();
    tape_sup_con(tape, z, &anchors, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, l2_normalize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(t: f64) -> SimilarityConfig {
        SimilarityConfig::new(t).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn similarity_cases() {
        let e = std::f64::consts::E;
        assert!((similarity(&[1.0, 0.0], &[1.0, 0.0], cfg(1.0)).unwrap() - e).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], cfg(1.0)).unwrap(), 1.0);
        let s = similarity(&[1.0, 0.0], &[0.6, 0.8], cfg(0.5)).unwrap();
        assert!((s - 1.2f64.exp()).abs() < 1e-12);
        assert!((s - 3.32012).abs() < 1e-5);
        assert!(matches!(
            similarity(&[2.0, 0.0], &[1.0, 0.0], cfg(1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn info_nce_cases() {
        let a = [1.0, 0.0];
        assert!(info_nce(&a, &a, &[], cfg(0.5)).unwrap().loss.abs() < 1e-15);
        let l = info_nce(&a, &a, &[&[0.0, 1.0]], cfg(1.0)).unwrap().loss;
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
        // All similarities equal: the anchor is orthogonal to everything.
        let z = [0.0, 0.0, 1.0];
        let others: Vec<[f64; 3]> = vec![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let diffs: Vec<&[f64]> = others[1..].iter().map(|v| v.as_slice()).collect();
        let l = info_nce(&z, &others[0], &diffs, cfg(0.3)).unwrap().loss;
        assert!((l - 4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn sup_con_cases() {
        let a = [1.0, 0.0];
        let l = sup_con(&a, &[&[0.6, 0.8]], &[], cfg(0.5)).unwrap().loss;
        assert!(l.abs() <= 1e-12);
        let l = sup_con(&a, &[&[1.0, 0.0]], &[&[0.0, 1.0]], cfg(0.5))
            .unwrap()
            .loss;
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.126928).abs() < 1e-6);
        assert!(matches!(
            sup_con(&a, &[], &[], cfg(0.5)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sup_con_reduces_to_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = unit(&mut rng, 5);
        let p = unit(&mut rng, 5);
        let ds: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
        let dr: Vec<&[f64]> = ds.iter().map(|v| v.as_slice()).collect();
        let x = info_nce(&a, &p, &dr, cfg(0.5)).unwrap();
        let y = sup_con(&a, &[&p], &dr, cfg(0.5)).unwrap();
        assert_eq!(x, y);
    }

    fn r(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn losses_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vs: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 3)).collect();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let ws: Vec<Vec<f64>> = vs.iter().map(rot).collect();
        let l1 = sup_con(&vs[0], &r(&vs[1..3]), &r(&vs[3..]), cfg(0.5))
            .unwrap()
            .loss;
        let l2 = sup_con(&ws[0], &r(&ws[1..3]), &r(&ws[3..]), cfg(0.5))
            .unwrap()
            .loss;
        assert!((l1 - l2).abs() <= 1e-10);
        let i1 = info_nce(&vs[0], &vs[1], &r(&vs[2..]), cfg(0.5))
            .unwrap()
            .loss;
        let i2 = info_nce(&ws[0], &ws[1], &r(&ws[2..]), cfg(0.5))
            .unwrap()
            .loss;
        assert!((i1 - i2).abs() <= 1e-10);
    }

    #[test]
    fn loss_decreases_with_positive_similarity() {
        let a = [1.0, 0.0, 0.0];
        let d: [f64; 3] = [0.0, 0.0, 1.0];
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let th = std::f64::consts::PI * (1.0 - k as f64 / 10.0);
            let p = [th.cos(), th.sin(), 0.0];
            let l = sup_con(&a, &[&p], &[&d], cfg(0.5)).unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn bce_cases() {
        assert!((bce_instance(0.5, 1).0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_instance(1.0, 1).0 < 1e-11);
        assert!(bce_instance(0.0, 0).0 < 1e-11);
        assert!((bce_instance(0.9, 0).0 - 0.1f64.ln().abs()).abs() < 1e-12);
        assert!(bce_instance(1.5, 0).0.is_finite());
        let (_, g) = bce_instance(0.3, 1);
        let fd = (bce_instance(0.3 + 1e-6, 1).0 - bce_instance(0.3 - 1e-6, 1).0) / 2e-6;
        assert!((g - fd).abs() < 1e-6);
    }

    /// Adjoints against finite differences through normalization, 5 seeds.
    #[test]
    fn batch_adjoints_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw =
                Matrix::new(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let anchors = vec![
                AnchorRows {
                    anchor: 0,
                    same: vec![1, 2],
                    diff: vec![3, 4, 5],
                },
                AnchorRows {
                    anchor: 3,
                    same: vec![4],
                    diff: vec![0, 1],
                },
                AnchorRows {
                    anchor: 5,
                    same: vec![0, 1, 2, 3],
                    diff: vec![],
                },
            ];
            let err = grad_check(
                |t, p| {
                    let z = t.l2_normalize_rows(p[0])?;
                    tape_sup_con(t, z, &anchors, 0.5)
                },
                std::slice::from_ref(&raw),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "sup_con seed {seed}: {err}");
            let err = grad_check(
                |t, p| {
                    let z = t.l2_normalize_rows(p[0])?;
                    tape_info_nce(t, z, 0.5)
                },
                &[raw],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "info_nce seed {seed}: {err}");
        }
    }
}
