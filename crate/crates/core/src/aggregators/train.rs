use rand::seq::SliceRandom;

use super::{canonical_order, AggKind, AggregatorConfig, AggregatorModel};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::numcore::Matrix;
use crate::rng;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(
                "Adam parameter and gradient lists differ".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !g.same_shape(p) {
                return Err(Error::Shape(
                    "gradient shape differs from its parameter".into(),
                ));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedAggregator {
    pub model: AggregatorModel,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub val_auc_history: Vec<f64>,
}

/// Trains from a fresh initialization with one bag per step and keeps the
/// epoch with the best validation bag AUC (earliest on ties). When the
/// validation split lacks a class the last epoch is kept.
pub fn train_aggregator(
    train: &[Matrix],
    train_labels: &[u8],
    val: &[Matrix],
    val_labels: &[u8],
    cfg: &AggregatorConfig,
    seed: u64,
) -> Result<TrainedAggregator> {
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Shape("bag and label counts differ".into()));
    }
    if !(train_labels.contains(&0) && train_labels.contains(&1)) {
        return Err(Error::Data(
            "aggregator training needs positive and negative bags".into(),
        ));
    }
    let dim = train[0].cols();
    let mut model = AggregatorModel::from_config(cfg, dim, seed)?;
    for h in train.iter().chain(val) {
        model.check_bag(h)?;
    }
    orient_instance_classifier(&mut model, train, train_labels);
    let sorted: Vec<Matrix> = train
        .iter()
        .map(|h| h.gather_rows(&canonical_order(h)))
        .collect();
    let val_defined = val_labels.contains(&0) && val_labels.contains(&1);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs.max(1) {
        let lr = cfg.lr
            * cfg
                .decay_factor
                .powi((epoch / cfg.decay_every.max(1)) as i32);
        let mut r = rng::seeded_indexed(seed, rng::stream::AGGREGATOR, epoch as u64 + 1);
        order.shuffle(&mut r);
        for &b in &order {
            let (loss, grads) = model.loss_and_grads(&sorted[b], train_labels[b])?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "aggregator loss diverged at epoch {epoch}"
                )));
            }
            adam.step(&mut model.params, &grads, lr)?;
        }
        if val_defined {
            let scores: Vec<f64> = model
                .predict_many(val)?
                .iter()
                .map(|p| p.bag_score)
                .collect();
            let auc = roc_auc(val_labels, &scores)?;
            history.push(auc);
            if best.as_ref().is_none_or(|b| auc > b.0) {
                best = Some((auc, epoch, model.params.clone()));
            }
        }
    }
    let last = cfg.epochs.max(1) - 1;
    Ok(match best {
        Some((auc, epoch, params)) => TrainedAggregator {
            model: AggregatorModel {
                spec: model.spec,
                params,
            },
            best_epoch: epoch,
            best_val_auc: Some(auc),
            val_auc_history: history,
        },
        None => TrainedAggregator {
            model,
            best_epoch: last,
            best_val_auc: None,
            val_auc_history: history,
        },
    })
}

/// Points every linear scoring head that reads embeddings directly (the
/// instance classifier and, for pooled models, the bag classifier) along
/// the difference between the mean instance of positive bags and that of
/// negative bags, keeping each head's norm.
///
/// Max-style pooling only passes gradient through the top-scoring instance,
/// so a random start that ranks witnesses lowest never recovers.
fn orient_instance_classifier(model: &mut AggregatorModel, train: &[Matrix], labels: &[u8]) {
    let heads: &[usize] = match model.kind() {
        AggKind::Max | AggKind::TopK => &[0],
        AggKind::DsMil => &[0, 4],
        AggKind::AttentionInstance => &[2],
        AggKind::Attention => &[2],
        AggKind::Transformer => return,
    };
    let d = model.spec.dim;
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for (h, &y) in train.iter().zip(labels) {
        let c = usize::from(y == 1);
        counts[c] += h.rows();
        for r in 0..h.rows() {
            for (s, &x) in sums[c].iter_mut().zip(h.row(r)) {
                *s += x;
            }
        }
    }
    let dir: Vec<f64> = (0..d)
        .map(|j| sums[1][j] / counts[1] as f64 - sums[0][j] / counts[0] as f64)
        .collect();
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    for &idx in heads {
        let w = &mut model.params[idx];
        let wn = w.frobenius_norm();
        if n > 0.0 && wn > 0.0 {
            for (p, x) in w.data_mut().iter_mut().zip(&dir) {
                *p = x / n * wn;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![Matrix::row_vector(&[1.0, -2.0])];
        let mut a = Adam::new(&p);
        a.step(&mut p, &[Matrix::row_vector(&[0.5, -3.0])], 0.1)
            .unwrap();
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p[0].get(0, 1) + 1.9).abs() < 1e-7);
    }

    /// Bags of two-dimensional points; positives contain one point near
    /// (3, 3), everything else sits near the origin.
    fn toy(seed: u64, n: usize) -> (Vec<Matrix>, Vec<u8>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut bags = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let k = 6;
            let mut rows: Vec<Vec<f64>> = (0..k)
                .map(|_| vec![r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)])
                .collect();
            if y == 1 {
                rows[r.random_range(0..k)] = vec![3.0 + r.random_range(-0.3..0.3), 3.0];
            }
            bags.push(Matrix::from_rows(&rows).unwrap());
            labels.push(y);
        }
        (bags, labels)
    }

    #[test]
    fn separable_toy_reaches_perfect_auc() {
        let (bags, labels) = toy(1, 20);
        let (vb, vl) = toy(2, 10);
        for kind in [
            AggKind::Max,
            AggKind::TopK,
            AggKind::DsMil,
            AggKind::Attention,
            AggKind::AttentionInstance,
        ] {
            let cfg = AggregatorConfig {
                kind,
                epochs: 200,
                lr: 1e-2,
                ..Default::default()
            };
            let t = train_aggregator(&bags, &labels, &vb, &vl, &cfg, 3).unwrap();
            let s: Vec<f64> = t
                .model
                .predict_many(&bags)
                .unwrap()
                .iter()
                .map(|p| p.bag_score)
                .collect();
            assert_eq!(roc_auc(&labels, &s).unwrap(), 1.0, "{kind}");
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let (bags, labels) = toy(4, 10);
        let cfg = AggregatorConfig {
            kind: AggKind::DsMil,
            epochs: 5,
            lr: 1e-2,
            ..Default::default()
        };
        let a = train_aggregator(&bags, &labels, &bags, &labels, &cfg, 5).unwrap();
        let b = train_aggregator(&bags, &labels, &bags, &labels, &cfg, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.best_epoch, b.best_epoch);
        let max = a.val_auc_history.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_auc, Some(max));
        assert_eq!(
            a.val_auc_history.iter().position(|&v| v == max),
            Some(a.best_epoch)
        );
        let ones = vec![1u8; labels.len()];
        assert!(matches!(
            train_aggregator(&bags, &ones, &bags, &labels, &cfg, 5),
            Err(Error::Data(_))
        ));
    }
}
