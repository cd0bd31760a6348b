use rand::seq::SliceRandom;

use super::rounds::{curve_rows, final_report, split_bag_auc, split_inst_auc, RoundEval};
use super::{
    auxiliary_config, embed_dataset, model_select, RoundRecord, RunArtifacts, TrainConfig,
};
use crate::aggregators::{
    canonical_order, train_aggregator, Adam, AggregatorModel, TrainedAggregator,
};
use crate::data::{Dataset, Split};
use crate::encoder::{cosine_lr, sgd_step, EncoderParams, SgdState};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};
use crate::rng;

/// Bag-level loss of one bag and gradients for the encoder and the
/// aggregator, rows fed in canonical order of their current embeddings.
pub(crate) fn joint_step_grads(
    enc: &EncoderParams,
    agg: &AggregatorModel,
    x: &Matrix,
    label: u8,
) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
    let order = canonical_order(&enc.forward_features(x)?);
    let mut tape = Tape::new();
    let vars = enc.register(&mut tape);
    let agg_vars: Vec<Var> = agg.params.iter().map(|m| tape.param(m.clone())).collect();
    let xv = tape.input(x.gather_rows(&order));
    let h = vars.features(&mut tape, xv)?;
    let (loss, _) = agg.tape_loss(&mut tape, &agg_vars, h, label)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?.params();
    let agg_grads = grads.split_off(grads.len() - agg.params.len());
    Ok((value, grads, agg_grads))
}

fn scores_for(
    ds: &Dataset,
    emb: &Matrix,
    model: &AggregatorModel,
    aux: Option<&AggregatorModel>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let bags: Vec<Matrix> = ds
        .bags
        .iter()
        .map(|b| emb.slice_rows(b.start, b.end))
        .collect();
    let preds = model.predict_many(&bags)?;
    let bag_scores = preds.iter().map(|p| p.bag_score).collect();
    let inst = match aux {
        Some(a) => a.predict_many(&bags)?,
        None => preds,
    };
    let instance_scores = inst
        .into_iter()
        .flat_map(|p| p.instance_scores.expect("instance classifier present"))
        .collect();
    Ok((bag_scores, instance_scores))
}

/// Encoder and aggregator trained jointly on bag cross-entropy from `init`.
/// The models are evaluated every `refresh_period` epochs and the round
/// with the best validation bag AUC is kept.
pub fn run_end2end(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let train: Vec<(Matrix, u8)> = ds
        .bags_in(Split::Train)
        .iter()
        .map(|b| (ds.bag_features(b), b.label))
        .collect();
    let labels: Vec<u8> = train.iter().map(|t| t.1).collect();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data(
            "end-to-end training needs positive and negative bags".into(),
        ));
    }
    let mut enc = init.clone();
    let mut agg = AggregatorModel::from_config(&cfg.aggregator, enc.dims.embed, seed)?;
    let mut sgd = SgdState::new(
        cfg.finetune_lr,
        cfg.momentum,
        cfg.weight_decay,
        &enc.matrices(),
    )?;
    let mut adam = Adam::new(&agg.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_rounds = cfg.finetune_epochs / cfg.refresh_period + 1;
    let (mut curves, mut rounds, mut val_aucs) = (Vec::new(), Vec::new(), Vec::new());
    let mut best: Option<(EncoderParams, Matrix, RoundEval)> = None;

    for round in 0..n_rounds {
        let epoch = round * cfg.refresh_period;
        let emb = embed_dataset(&enc, ds)?;
        let aux = if agg.kind().has_instance_classifier() {
            None
        } else {
            let split = |s: Split| -> (Vec<Matrix>, Vec<u8>) {
                ds.bags_in(s)
                    .iter()
                    .map(|b| (emb.slice_rows(b.start, b.end), b.label))
                    .unzip()
            };
            let (tb, tl) = split(Split::Train);
            let (vb, vl) = split(Split::Val);
            Some(
                train_aggregator(&tb, &tl, &vb, &vl, &auxiliary_config(&cfg.aggregator), seed)?
                    .model,
            )
        };
        let (bag_scores, instance_scores) = scores_for(ds, &emb, &agg, aux.as_ref())?;
        let val_auc = split_bag_auc(ds, &bag_scores, Split::Val).ok_or_else(|| {
            Error::Data("validation split needs positive and negative bags".into())
        })?;
        let ev = RoundEval {
            trained: TrainedAggregator {
                model: agg.clone(),
                best_epoch: epoch,
                best_val_auc: Some(val_auc),
                val_auc_history: Vec::new(),
            },
            auxiliary: aux,
            bag_scores,
            instance_scores,
            val_auc,
        };
        curves.extend(curve_rows(ds, round, epoch, &ev, None));
        rounds.push(RoundRecord {
            round,
            epoch,
            val_bag_auc: val_auc,
            accepted: false,
            train_inst_auc: split_inst_auc(ds, &ev.instance_scores, Split::Train),
        });
        val_aucs.push(val_auc);
        if best.as_ref().is_none_or(|b| val_auc > b.2.val_auc) {
            best = Some((enc.clone(), emb, ev));
        }
        if round + 1 == n_rounds {
            break;
        }
        for e in epoch..epoch + cfg.refresh_period {
            sgd.learning_rate = cosine_lr(e, cfg.finetune_epochs, cfg.finetune_lr)?;
            let mut r = rng::seeded_indexed(seed, rng::stream::END2END, e as u64);
            order.shuffle(&mut r);
            for &b in &order {
                let (loss, enc_grads, agg_grads) =
                    joint_step_grads(&enc, &agg, &train[b].0, train[b].1)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "end-to-end loss diverged in epoch {e}"
                    )));
                }
                sgd_step(&mut enc, &enc_grads, &mut sgd)?;
                adam.step(&mut agg.params, &agg_grads, cfg.e2e_aggregator_lr)?;
            }
        }
    }

    let best_round = model_select(&val_aucs)?;
    let (encoder, emb, ev) = best.expect("at least one round");
    let report = final_report(ds, &emb, &ev, None)?;
    Ok(RunArtifacts {
        mode: "e2e".into(),
        curves,
        rounds,
        best_round,
        init_hash: init.hash(),
        train_bag_auc: split_bag_auc(ds, &ev.bag_scores, Split::Train).unwrap_or(f64::NAN),
        val_bag_auc: ev.val_auc,
        encoder,
        aggregator: ev.trained.model,
        report,
        pseudo: None,
    })
}
