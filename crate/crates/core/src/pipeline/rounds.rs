use super::{auxiliary_config, CurveRow, PseudoLabelState};
use crate::aggregators::{train_aggregator, AggregatorConfig, AggregatorModel, TrainedAggregator};
use crate::data::{Dataset, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::{
    aupr, class_stats, dice_calibrated, iou, max_f1, pseudo_quality, roc_auc, MetricsReport,
};
use crate::numcore::{l2_normalize, Matrix};

/// Embeddings `f(x)` of every instance in the dataset.
pub fn embed_dataset(enc: &EncoderParams, ds: &Dataset) -> Result<Matrix> {
    enc.forward_features(&ds.features)
}

/// Aggregator trained on one set of embeddings, with per-bag and
/// per-instance scores over the whole dataset.
#[derive(Clone, Debug)]
pub struct RoundEval {
    pub trained: TrainedAggregator,
    /// Instance-scoring model when the main aggregator has no φ.
    pub auxiliary: Option<AggregatorModel>,
    pub bag_scores: Vec<f64>,
    pub instance_scores: Vec<f64>,
    pub val_auc: f64,
}

fn split_bags(ds: &Dataset, emb: &Matrix, split: Split) -> (Vec<Matrix>, Vec<u8>) {
    ds.bags
        .iter()
        .filter(|b| b.split == split)
        .map(|b| (emb.slice_rows(b.start, b.end), b.label))
        .unzip()
}

/// Trains the round's aggregator from scratch on frozen embeddings and
/// scores every bag and instance.
pub fn evaluate_round(
    ds: &Dataset,
    emb: &Matrix,
    cfg: &AggregatorConfig,
    seed: u64,
) -> Result<RoundEval> {
    let (tb, tl) = split_bags(ds, emb, Split::Train);
    let (vb, vl) = split_bags(ds, emb, Split::Val);
    if tb.is_empty() {
        return Err(Error::Data("no training bags".into()));
    }
    let trained = train_aggregator(&tb, &tl, &vb, &vl, cfg, seed)?;
    let auxiliary = if cfg.kind.has_instance_classifier() {
        None
    } else {
        Some(train_aggregator(&tb, &tl, &vb, &vl, &auxiliary_config(cfg), seed)?.model)
    };
    let all: Vec<Matrix> = ds
        .bags
        .iter()
        .map(|b| emb.slice_rows(b.start, b.end))
        .collect();
    let preds = trained.model.predict_many(&all)?;
    let bag_scores = preds.iter().map(|p| p.bag_score).collect();
    let inst_preds = match &auxiliary {
        Some(aux) => aux.predict_many(&all)?,
        None => preds,
    };
    let mut instance_scores = Vec::with_capacity(ds.n_instances());
    for p in inst_preds {
        instance_scores.extend(p.instance_scores.expect("instance classifier present"));
    }
    let val_auc = match trained.best_val_auc {
        Some(a) => a,
        None => {
            return Err(Error::Data(
                "validation split needs positive and negative bags".into(),
            ))
        }
    };
    Ok(RoundEval {
        trained,
        auxiliary,
        bag_scores,
        instance_scores,
        val_auc,
    })
}

pub(crate) fn split_bag_auc(ds: &Dataset, bag_scores: &[f64], split: Split) -> Option<f64> {
    let (l, s): (Vec<u8>, Vec<f64>) = ds
        .bags
        .iter()
        .zip(bag_scores)
        .filter(|(b, _)| b.split == split)
        .map(|(b, &s)| (b.label, s))
        .unzip();
    roc_auc(&l, &s).ok()
}

/// Instance ids, truths and scores of one split.
fn split_instances(
    ds: &Dataset,
    truth: &[u8],
    scores: &[f64],
    split: Split,
) -> (Vec<u8>, Vec<f64>) {
    let mut l = Vec::new();
    let mut s = Vec::new();
    for b in ds.bags.iter().filter(|b| b.split == split) {
        l.extend_from_slice(&truth[b.start..b.end]);
        s.extend_from_slice(&scores[b.start..b.end]);
    }
    (l, s)
}

pub(crate) fn split_inst_auc(ds: &Dataset, scores: &[f64], split: Split) -> Option<f64> {
    let truth = ds.instance_labels()?;
    let (l, s) = split_instances(ds, &truth, scores, split);
    roc_auc(&l, &s).ok()
}

/// Training instances inside positive bags.
pub(crate) fn positive_bag_train_ids(ds: &Dataset) -> Vec<usize> {
    ds.bags
        .iter()
        .filter(|b| b.split == Split::Train && b.label == 1)
        .flat_map(|b| b.start..b.end)
        .collect()
}

pub(crate) fn curve_rows(
    ds: &Dataset,
    round: usize,
    epoch: usize,
    ev: &RoundEval,
    pseudo: Option<&PseudoLabelState>,
) -> Vec<CurveRow> {
    let truth = ds.instance_labels();
    Split::ALL
        .iter()
        .map(|&split| {
            let (inst_auc, inst_max_f1) = match &truth {
                Some(t) => {
                    let (l, s) = split_instances(ds, t, &ev.instance_scores, split);
                    (roc_auc(&l, &s).ok(), max_f1(&l, &s).ok().map(|x| x.0))
                }
                None => (None, None),
            };
            let (pp, pr) = match (split, &truth, pseudo) {
                (Split::Train, Some(t), Some(p)) => {
                    match pseudo_quality(t, &p.labels, &positive_bag_train_ids(ds)) {
                        Ok((a, b)) => (Some(a), Some(b)),
                        Err(_) => (None, None),
                    }
                }
                _ => (None, None),
            };
            CurveRow {
                round,
                epoch,
                split,
                bag_auc: split_bag_auc(ds, &ev.bag_scores, split),
                inst_auc,
                inst_max_f1,
                pseudo_precision: pp,
                pseudo_recall: pr,
            }
        })
        .collect()
}

/// Test-split metrics of one round's aggregator on frozen embeddings.
pub fn round_report(ds: &Dataset, emb: &Matrix, ev: &RoundEval) -> Result<MetricsReport> {
    final_report(ds, emb, ev, None)
}

/// Final metrics of a selected round on the test split.
///
/// Dice is calibrated and the IoU threshold chosen (validation max-F1) on
/// the validation split. Class statistics use unit-normalized training-split
/// embeddings, the geometry the contrastive losses act on.
pub(crate) fn final_report(
    ds: &Dataset,
    emb: &Matrix,
    ev: &RoundEval,
    pseudo: Option<&PseudoLabelState>,
) -> Result<MetricsReport> {
    let mut r = MetricsReport {
        bag_auc: split_bag_auc(ds, &ev.bag_scores, Split::Test).unwrap_or(f64::NAN),
        instance_auc: f64::NAN,
        instance_auprc: f64::NAN,
        instance_max_f1: f64::NAN,
        dice: f64::NAN,
        iou: f64::NAN,
        inter_class_distance: f64::NAN,
        intra_class_deviation_pos: f64::NAN,
        intra_class_deviation_neg: f64::NAN,
        pseudo_label_precision: f64::NAN,
        pseudo_label_recall: f64::NAN,
    };
    let Some(truth) = ds.instance_labels() else {
        return Ok(r);
    };
    let (tl, ts) = split_instances(ds, &truth, &ev.instance_scores, Split::Test);
    let (vl, vs) = split_instances(ds, &truth, &ev.instance_scores, Split::Val);
    r.instance_auc = roc_auc(&tl, &ts).unwrap_or(f64::NAN);
    r.instance_auprc = aupr(&tl, &ts).unwrap_or(f64::NAN);
    r.instance_max_f1 = max_f1(&tl, &ts).map(|x| x.0).unwrap_or(f64::NAN);
    if let Ok((d, _, _)) = dice_calibrated(&tl, &ts, &vl, &vs) {
        r.dice = d;
    }
    if let Ok((_, thr)) = max_f1(&vl, &vs) {
        let preds: Vec<u8> = ts.iter().map(|&s| u8::from(s >= thr)).collect();
        r.iou = iou(&tl, &preds)?;
    }
    let train_rows: Vec<usize> = ds
        .bags
        .iter()
        .filter(|b| b.split == Split::Train)
        .flat_map(|b| b.start..b.end)
        .collect();
    let train_truth: Vec<u8> = train_rows.iter().map(|&i| truth[i]).collect();
    let unit: Vec<Vec<f64>> = train_rows
        .iter()
        .map(|&i| l2_normalize(emb.row(i)))
        .collect::<Result<_>>()?;
    if let Ok((inter, dp, dn)) = class_stats(&Matrix::from_rows(&unit)?, &train_truth) {
        r.inter_class_distance = inter;
        r.intra_class_deviation_pos = dp;
        r.intra_class_deviation_neg = dn;
    }
    if let Some(p) = pseudo {
        let (a, b) = pseudo_quality(&truth, &p.labels, &positive_bag_train_ids(ds))?;
        r.pseudo_label_precision = a;
        r.pseudo_label_recall = b;
    }
    Ok(r)
}
