use rand::seq::index;

use super::rounds::{
    curve_rows, evaluate_round, final_report, split_bag_auc, split_inst_auc, RoundEval,
};
use super::{
    binarize, embed_dataset, model_select, update_gate, PseudoLabelState, RoundRecord,
    RunArtifacts, TrainConfig,
};
use crate::data::{augment_rows, Dataset, Split};
use crate::encoder::{cosine_lr, sgd_step, EncoderParams, SgdState};
use crate::error::{Error, Result};
use crate::losses::{tape_sup_con, AnchorRows};
use crate::numcore::{Matrix, Tape};
use crate::rng;
use crate::sampler::{
    draw_batch, partition_instances, rate_schedule, select_confident, InstancePools, SpsSchedule,
};

/// Ablations of the self-paced contrastive finetune.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneVariant {
    Full,
    /// Every pseudo label used from the first epoch: `r0 = rT = 1`, no warm-up.
    NoSpl,
    /// Pseudo labels fixed after round 0.
    NoIterative,
}

impl FinetuneVariant {
    fn mode(self) -> &'static str {
        match self {
            Self::Full => "its2clr",
            Self::NoSpl => "its2clr-nospl",
            Self::NoIterative => "its2clr-noiter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    SupCon,
    CrossEntropy,
}

/// How the instance labels driving the encoder loss evolve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Labels {
    /// Refreshed from aggregator scores whenever the gate passes.
    Gated,
    /// Taken from round 0 and never refreshed.
    Fixed,
    /// Ground-truth instance labels.
    Truth,
}

struct Plan {
    mode: String,
    objective: Objective,
    labels: Labels,
    schedule: SpsSchedule,
}

/// Self-paced supervised contrastive finetuning with gated pseudo-label
/// refresh, starting from `init`.
pub fn run_its2clr(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    variant: FinetuneVariant,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut schedule = cfg.schedule();
    if variant == FinetuneVariant::NoSpl {
        schedule.r0 = 1.0;
        schedule.r_t = 1.0;
        schedule.t_warmup = 0;
    }
    let labels = if variant == FinetuneVariant::NoIterative {
        Labels::Fixed
    } else {
        Labels::Gated
    };
    let plan = Plan {
        mode: variant.mode().into(),
        objective: Objective::SupCon,
        labels,
        schedule,
    };
    run_plan(ds, cfg, init, &plan, seed)
}

/// Contrastive finetuning on true instance labels with every instance
/// confident; the gate is never consulted.
pub fn run_groundtruth_finetune(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if !ds.has_instance_labels() {
        return Err(Error::Data(
            "ground-truth finetuning needs instance labels".into(),
        ));
    }
    let schedule = SpsSchedule {
        r0: 1.0,
        r_t: 1.0,
        ..cfg.schedule()
    };
    let plan = Plan {
        mode: "gt".into(),
        objective: Objective::SupCon,
        labels: Labels::Truth,
        schedule,
    };
    run_plan(ds, cfg, init, &plan, seed)
}

/// Instance-level cross-entropy finetuning of the encoder plus a linear
/// head on pseudo labels, optionally refreshed through the gate.
pub fn run_ce_finetune(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    iterative: bool,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let plan = Plan {
        mode: if iterative { "ce-iter" } else { "ce" }.into(),
        objective: Objective::CrossEntropy,
        labels: if iterative {
            Labels::Gated
        } else {
            Labels::Fixed
        },
        schedule: cfg.schedule(),
    };
    run_plan(ds, cfg, init, &plan, seed)
}

/// The aggregator trained on a frozen encoder: a single round 0.
pub fn run_aggregator_only(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let emb = embed_dataset(init, ds)?;
    let ev = evaluate_round(ds, &emb, &cfg.aggregator, seed)?;
    let curves = curve_rows(ds, 0, 0, &ev, None);
    let report = final_report(ds, &emb, &ev, None)?;
    Ok(RunArtifacts {
        mode: "agg-only".into(),
        curves,
        rounds: vec![RoundRecord {
            round: 0,
            epoch: 0,
            val_bag_auc: ev.val_auc,
            accepted: false,
            train_inst_auc: split_inst_auc(ds, &ev.instance_scores, Split::Train),
        }],
        best_round: 0,
        init_hash: init.hash(),
        encoder: init.clone(),
        train_bag_auc: split_bag_auc(ds, &ev.bag_scores, Split::Train).unwrap_or(f64::NAN),
        val_bag_auc: ev.val_auc,
        aggregator: ev.trained.model,
        report,
        pseudo: None,
    })
}

fn negative_bag_mask(ds: &Dataset) -> Vec<bool> {
    let mut mask = vec![false; ds.n_instances()];
    for b in ds.bags.iter().filter(|b| b.label == 0) {
        mask[b.start..b.end].iter_mut().for_each(|m| *m = true);
    }
    mask
}

fn train_instance_ids(ds: &Dataset) -> Vec<usize> {
    ds.bags_in(Split::Train)
        .iter()
        .flat_map(|b| b.start..b.end)
        .collect()
}

struct Best {
    encoder: EncoderParams,
    emb: Matrix,
    eval: RoundEval,
    pseudo: Option<PseudoLabelState>,
}

fn run_plan(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    plan: &Plan,
    seed: u64,
) -> Result<RunArtifacts> {
    let neg_mask = negative_bag_mask(ds);
    let truth = ds.instance_labels();
    let train_ids = train_instance_ids(ds);
    let mut enc = init.clone();
    let mut sgd = SgdState::new(
        cfg.finetune_lr,
        cfg.momentum,
        cfg.weight_decay,
        &enc.matrices(),
    )?;
    let mut head = CeHead::new(enc.dims.embed, cfg)?;
    let n_rounds = cfg.finetune_epochs / cfg.refresh_period + 1;
    let mut pseudo: Option<PseudoLabelState> = None;
    let mut val_aucs = Vec::with_capacity(n_rounds);
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut curves = Vec::with_capacity(3 * n_rounds);
    let mut best: Option<Best> = None;

    for round in 0..n_rounds {
        let epoch = round * cfg.refresh_period;
        let emb = embed_dataset(&enc, ds)?;
        let ev =
            evaluate_round(ds, &emb, &cfg.aggregator, seed).map_err(|e| with_round(e, round))?;
        let accepted = match plan.labels {
            Labels::Truth => false,
            Labels::Fixed => round == 0,
            Labels::Gated => update_gate(&val_aucs, ev.val_auc),
        };
        val_aucs.push(ev.val_auc);
        if plan.labels != Labels::Truth {
            let state = pseudo.get_or_insert_with(|| PseudoLabelState {
                scores: Vec::new(),
                labels: Vec::new(),
                auc_history: Vec::new(),
                last_accepted_round: 0,
            });
            state.auc_history.push(ev.val_auc);
            if accepted {
                state.scores = ev.instance_scores.clone();
                state.labels = binarize(&ev.instance_scores, cfg.eta, &neg_mask);
                state.last_accepted_round = round;
            }
        }
        curves.extend(curve_rows(ds, round, epoch, &ev, pseudo.as_ref()));
        rounds.push(RoundRecord {
            round,
            epoch,
            val_bag_auc: ev.val_auc,
            accepted,
            train_inst_auc: split_inst_auc(ds, &ev.instance_scores, Split::Train),
        });
        if best.as_ref().is_none_or(|b| ev.val_auc > b.eval.val_auc) {
            best = Some(Best {
                encoder: enc.clone(),
                emb,
                eval: ev,
                pseudo: pseudo.clone(),
            });
        }
        if round + 1 == n_rounds {
            break;
        }

        let (scores, labels): (Vec<f64>, Vec<u8>) = match (&pseudo, &truth) {
            (Some(p), _) => (p.scores.clone(), p.labels.clone()),
            (None, Some(t)) => (t.iter().map(|&y| f64::from(y)).collect(), t.clone()),
            (None, None) => {
                return Err(Error::Data(
                    "ground-truth finetuning needs instance labels".into(),
                ))
            }
        };
        for e in epoch..epoch + cfg.refresh_period {
            sgd.learning_rate = cosine_lr(e, cfg.finetune_epochs, cfg.finetune_lr)?;
            let result = match plan.objective {
                Objective::SupCon => supcon_epoch(
                    ds,
                    cfg,
                    &plan.schedule,
                    &mut enc,
                    &mut sgd,
                    &scores,
                    &labels,
                    &train_ids,
                    e,
                    seed,
                ),
                Objective::CrossEntropy => {
                    head.sgd.learning_rate = sgd.learning_rate;
                    ce_epoch(
                        ds, cfg, &mut enc, &mut sgd, &mut head, &labels, &train_ids, e, seed,
                    )
                }
            };
            result.map_err(|err| with_round(err, round))?;
        }
    }

    let best_round = model_select(&val_aucs)?;
    let b = best.expect("at least one round");
    debug_assert_eq!(b.eval.val_auc, val_aucs[best_round]);
    let report = final_report(ds, &b.emb, &b.eval, b.pseudo.as_ref())?;
    Ok(RunArtifacts {
        mode: plan.mode.clone(),
        curves,
        rounds,
        best_round,
        init_hash: init.hash(),
        train_bag_auc: split_bag_auc(ds, &b.eval.bag_scores, Split::Train).unwrap_or(f64::NAN),
        val_bag_auc: b.eval.val_auc,
        encoder: b.encoder,
        aggregator: b.eval.trained.model,
        report,
        pseudo,
    })
}

fn with_round(e: Error, round: usize) -> Error {
    match e {
        Error::Batch { pool, context } => Error::Batch {
            pool,
            context: format!("{context} (refresh round {round})"),
        },
        other => other,
    }
}

/// Pools over training instances for the current labels.
fn train_pools(ds: &Dataset, labels: &[u8], train_ids: &[usize]) -> Result<InstancePools> {
    let bag_labels: Vec<u8> = ds.bags.iter().map(|b| b.label).collect();
    let bag_of = ds.bag_of();
    let pseudo: Vec<Option<u8>> = labels.iter().map(|&y| Some(y)).collect();
    let mut pools = partition_instances(&bag_labels, &bag_of, &pseudo)?;
    let mut in_train = vec![false; ds.n_instances()];
    train_ids.iter().for_each(|&i| in_train[i] = true);
    for pool in [
        &mut pools.neg_bag_ids,
        &mut pools.pos_pseudo_ids,
        &mut pools.neg_pseudo_ids,
    ] {
        pool.retain(|&i| in_train[i]);
    }
    Ok(pools)
}

#[allow(clippy::too_many_arguments)]
fn supcon_epoch(
    ds: &Dataset,
    cfg: &TrainConfig,
    sched: &SpsSchedule,
    enc: &mut EncoderParams,
    sgd: &mut SgdState,
    scores: &[f64],
    labels: &[u8],
    train_ids: &[usize],
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let t = (epoch + 1) as f64;
    let mut pools = train_pools(ds, labels, train_ids)?;
    if !sched.in_warmup(t) {
        select_confident(&mut pools, scores, rate_schedule(t, sched)?)?;
    }
    let mut r = rng::seeded_indexed(seed, rng::stream::FINETUNE, epoch as u64);
    for _ in 0..cfg.finetune_steps_per_epoch {
        let batch = draw_batch(&pools, sched, t, &cfg.batch, &mut r)?;
        let mut ids: Vec<usize> = batch
            .anchors
            .iter()
            .chain(batch.same.iter().flatten())
            .chain(batch.diff.iter().flatten())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let row = |i: usize| ids.binary_search(&i).expect("id collected above");
        let anchors: Vec<AnchorRows> = (0..batch.anchors.len())
            .map(|k| AnchorRows {
                anchor: row(batch.anchors[k]),
                same: batch.same[k].iter().map(|&i| row(i)).collect(),
                diff: batch.diff[k].iter().map(|&i| row(i)).collect(),
            })
            .collect();
        let x = augment_rows(&ds.features.gather_rows(&ids), cfg.augment_strength, &mut r);
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape);
        let xv = tape.input(x);
        let h = vars.features(&mut tape, xv)?;
        let z = vars.project(&mut tape, h)?;
        let loss = tape_sup_con(&mut tape, z, &anchors, cfg.tau_finetune)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "contrastive loss diverged in epoch {epoch}"
            )));
        }
        let grads = tape.backward(loss)?.params();
        sgd_step(enc, &grads, sgd)?;
    }
    Ok(())
}

/// Linear instance classifier on top of the encoder features.
struct CeHead {
    params: Vec<Matrix>,
    sgd: SgdState,
}

impl CeHead {
    fn new(dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let params = vec![Matrix::zeros(dim, 1), Matrix::zeros(1, 1)];
        let sgd = SgdState::new(
            cfg.finetune_lr,
            cfg.momentum,
            cfg.weight_decay,
            &params.iter().collect::<Vec<_>>(),
        )?;
        Ok(Self { params, sgd })
    }
}

#[allow(clippy::too_many_arguments)]
fn ce_epoch(
    ds: &Dataset,
    cfg: &TrainConfig,
    enc: &mut EncoderParams,
    sgd: &mut SgdState,
    head: &mut CeHead,
    labels: &[u8],
    train_ids: &[usize],
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let mut r = rng::seeded_indexed(seed, rng::stream::FINETUNE, epoch as u64);
    let bs = cfg.ce_batch.min(train_ids.len());
    for _ in 0..cfg.finetune_steps_per_epoch {
        let mut ids: Vec<usize> = index::sample(&mut r, train_ids.len(), bs)
            .into_iter()
            .map(|k| train_ids[k])
            .collect();
        ids.sort_unstable();
        let targets: Vec<f64> = ids.iter().map(|&i| f64::from(labels[i])).collect();
        let x = augment_rows(&ds.features.gather_rows(&ids), cfg.augment_strength, &mut r);
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape);
        let w = tape.param(head.params[0].clone());
        let b = tape.param(head.params[1].clone());
        let xv = tape.input(x);
        let h = vars.features(&mut tape, xv)?;
        let logits = tape.affine(h, w, b)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "cross-entropy loss diverged in epoch {epoch}"
            )));
        }
        let mut grads = tape.backward(loss)?.params();
        let head_grads = grads.split_off(grads.len() - 2);
        sgd_step(enc, &grads, sgd)?;
        let mut hp: Vec<&mut Matrix> = head.params.iter_mut().collect();
        head.sgd.step(&mut hp, &head_grads)?;
    }
    Ok(())
}
