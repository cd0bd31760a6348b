use rand::seq::index;

use super::TrainConfig;
use crate::data::{augment_rows, Dataset, Split};
use crate::encoder::{cosine_lr, sgd_step, EncoderParams, SgdState};
use crate::error::{Error, Result};
use crate::losses::tape_info_nce;
use crate::numcore::{Matrix, Tape};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on one fixed augmented batch, before training and after each
    /// epoch.
    pub fixed_batch_losses: Vec<f64>,
}

/// Loss of a two-view batch: rows `0..n` first views, `n..2n` second views.
fn batch_loss(enc: &EncoderParams, views: Matrix, tau: f64) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = enc.register(&mut tape);
    let x = tape.input(views);
    let h = vars.features(&mut tape, x)?;
    let z = vars.project(&mut tape, h)?;
    let loss = tape_info_nce(&mut tape, z, tau)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.params()))
}

fn two_views(x: &Matrix, strength: f64, r: &mut rng::Rng) -> Matrix {
    let a = augment_rows(x, strength, r);
    let b = augment_rows(x, strength, r);
    let mut data = a.into_data();
    data.extend_from_slice(b.data());
    Matrix::new(2 * x.rows(), x.cols(), data).expect("finite augmentations")
}

/// Contrastive pretraining with in-batch negatives on training-split
/// instances. The encoder is initialized from `seed`.
pub fn run_cssl_pretrain(
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EncoderParams, PretrainLog)> {
    cfg.validate()?;
    let pool: Vec<usize> = ds
        .bags_in(Split::Train)
        .iter()
        .flat_map(|b| b.start..b.end)
        .collect();
    if pool.len() < 2 {
        return Err(Error::Data(
            "pretraining needs at least two training instances".into(),
        ));
    }
    let mut enc = EncoderParams::from_config(ds.metadata.m, &cfg.encoder, seed)?;
    let mut sgd = SgdState::new(
        cfg.pretrain_lr,
        cfg.momentum,
        cfg.weight_decay,
        &enc.matrices(),
    )?;
    let bs = cfg.pretrain_batch.min(pool.len());

    let mut fixed_rng = rng::seeded_indexed(seed, rng::stream::PRETRAIN, 0);
    let fixed_ids: Vec<usize> = index::sample(&mut fixed_rng, pool.len(), bs)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let fixed = two_views(
        &ds.features.gather_rows(&fixed_ids),
        cfg.augment_strength,
        &mut fixed_rng,
    );

    let mut log = PretrainLog::default();
    log.fixed_batch_losses
        .push(batch_loss(&enc, fixed.clone(), cfg.tau_pretrain)?.0);
    for epoch in 0..cfg.pretrain_epochs {
        sgd.learning_rate = cosine_lr(epoch, cfg.pretrain_epochs, cfg.pretrain_lr)?;
        let mut r = rng::seeded_indexed(seed, rng::stream::PRETRAIN, epoch as u64 + 1);
        let mut total = 0.0;
        for _ in 0..cfg.pretrain_steps_per_epoch {
            let ids: Vec<usize> = index::sample(&mut r, pool.len(), bs)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let views = two_views(&ds.features.gather_rows(&ids), cfg.augment_strength, &mut r);
            let (loss, grads) = batch_loss(&enc, views, cfg.tau_pretrain)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss diverged in epoch {epoch}"
                )));
            }
            total += loss;
            sgd_step(&mut enc, &grads, &mut sgd)?;
        }
        log.epoch_losses
            .push(total / cfg.pretrain_steps_per_epoch as f64);
        log.fixed_batch_losses
            .push(batch_loss(&enc, fixed.clone(), cfg.tau_pretrain)?.0);
    }
    Ok((enc, log))
}
