//! Training loops: contrastive pretraining, the iterative self-paced
//! supervised-contrastive finetune with validation-gated pseudo-label
//! refresh, and the baselines (CE finetuning, ground-truth finetuning,
//! end-to-end training, frozen-encoder aggregation).

mod end2end;
mod finetune;
mod output;
mod pretrain;
mod rounds;

use serde::{Deserialize, Serialize};

use crate::aggregators::{AggKind, AggregatorConfig, AggregatorModel};
use crate::data::Split;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::sampler::{BatchSpec, SpsSchedule};

pub use end2end::run_end2end;
pub use finetune::{
    run_aggregator_only, run_ce_finetune, run_groundtruth_finetune, run_its2clr, FinetuneVariant,
};
pub use output::{
    curves_csv, report_csv, write_run_dir, AGGREGATOR_FILE, CURVES_FILE, CURVES_HEADER,
    ENCODER_FILE, PSEUDO_FILE, REPORT_FILE, ROUNDS_FILE,
};
pub use pretrain::{run_cssl_pretrain, PretrainLog};
pub use rounds::{embed_dataset, evaluate_round, round_report, RoundEval};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Binarization threshold η for pseudo labels.
    pub eta: f64,
    pub r0: f64,
    pub r_t: f64,
    /// Warm-up length in epochs; 10% of the finetune epochs when unset.
    pub t_warmup: Option<usize>,
    pub p_plus: f64,
    pub tau_pretrain: f64,
    pub tau_finetune: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_steps_per_epoch: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_steps_per_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: BatchSpec,
    /// Instances per step for the cross-entropy baseline.
    pub ce_batch: usize,
    pub refresh_period: usize,
    pub augment_strength: f64,
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    /// Learning rate of the aggregator in end-to-end training.
    pub e2e_aggregator_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            r0: 0.2,
            r_t: 0.8,
            t_warmup: None,
            p_plus: 0.2,
            tau_pretrain: 0.5,
            tau_finetune: 0.5,
            pretrain_epochs: 20,
            pretrain_lr: 0.05,
            pretrain_batch: 128,
            pretrain_steps_per_epoch: 20,
            finetune_epochs: 50,
            finetune_lr: 1e-2,
            finetune_steps_per_epoch: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: BatchSpec::default(),
            ce_batch: 256,
            refresh_period: 5,
            augment_strength: 0.1,
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            e2e_aggregator_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.t_warmup.unwrap_or(self.finetune_epochs / 10)
    }

    pub fn schedule(&self) -> SpsSchedule {
        SpsSchedule {
            r0: self.r0,
            r_t: self.r_t,
            t_warmup: self.warmup_epochs(),
            t_total: self.finetune_epochs,
            p_plus: self.p_plus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        if self.refresh_period == 0 || self.finetune_epochs < self.refresh_period {
            return Err(Error::Config(
                "need 1 <= refresh_period <= finetune_epochs".into(),
            ));
        }
        self.schedule().validate()?;
        for (name, v) in [
            ("pretrain_batch", self.pretrain_batch),
            ("pretrain_steps_per_epoch", self.pretrain_steps_per_epoch),
            ("finetune_steps_per_epoch", self.finetune_steps_per_epoch),
            ("ce_batch", self.ce_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.pretrain_batch < 2 {
            return Err(Error::Config(
                "pretrain_batch needs at least two items for in-batch negatives".into(),
            ));
        }
        for (name, v) in [
            ("tau_pretrain", self.tau_pretrain),
            ("tau_finetune", self.tau_finetune),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Pseudo-label bookkeeping across refresh rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelState {
    /// Instance probabilities from the last accepted round.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub auc_history: Vec<f64>,
    pub last_accepted_round: usize,
}

/// One curve row: metrics of one split at one refresh round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub epoch: usize,
    pub split: Split,
    pub bag_auc: Option<f64>,
    pub inst_auc: Option<f64>,
    pub inst_max_f1: Option<f64>,
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub epoch: usize,
    pub val_bag_auc: f64,
    pub accepted: bool,
    /// Training-split instance AUC of this round's instance scores.
    pub train_inst_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub mode: String,
    pub curves: Vec<CurveRow>,
    pub rounds: Vec<RoundRecord>,
    pub best_round: usize,
    pub encoder: EncoderParams,
    pub aggregator: AggregatorModel,
    pub report: MetricsReport,
    pub pseudo: Option<PseudoLabelState>,
    /// Hash of the encoder the run started from.
    pub init_hash: String,
    /// Training-split bag AUC of the selected model.
    pub train_bag_auc: f64,
    /// Validation bag AUC of the selected model.
    pub val_bag_auc: f64,
}

/// Pseudo label per instance: `1` iff the score exceeds `eta`, and always `0`
/// inside negative bags.
pub fn binarize(scores: &[f64], eta: f64, in_negative_bag: &[bool]) -> Vec<u8> {
    scores
        .iter()
        .zip(in_negative_bag)
        .map(|(&s, &neg)| u8::from(!neg && s > eta))
        .collect()
}

/// Accept a refresh iff the new validation AUC is at least every earlier one.
pub fn update_gate(history: &[f64], auc_now: f64) -> bool {
    history.iter().all(|&h| auc_now >= h)
}

/// Index of the best validation AUC, earliest on ties.
pub fn model_select(val_bag_aucs: &[f64]) -> Result<usize> {
    if val_bag_aucs.is_empty() {
        return Err(Error::State("no checkpoints to select from".into()));
    }
    let mut best = 0;
    for (i, &a) in val_bag_aucs.iter().enumerate() {
        if a > val_bag_aucs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Aggregator used for instance scores when the main kind has none.
pub(crate) fn auxiliary_config(cfg: &AggregatorConfig) -> AggregatorConfig {
    AggregatorConfig {
        kind: AggKind::Max,
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_cases() {
        assert_eq!(binarize(&[0.1, 0.35, 0.9], 0.3, &[false; 3]), vec![0, 1, 1]);
        assert_eq!(binarize(&[0.3], 0.3, &[false]), vec![0]);
        assert_eq!(binarize(&[0.99], 0.3, &[true]), vec![0]);
    }

    #[test]
    fn gate_cases() {
        assert!(update_gate(&[0.80, 0.85], 0.85));
        assert!(!update_gate(&[0.90], 0.85));
        assert!(update_gate(&[], 0.1));
    }

    #[test]
    fn select_cases() {
        assert_eq!(model_select(&[0.7, 0.9, 0.8]).unwrap(), 1);
        assert_eq!(model_select(&[0.9, 0.9]).unwrap(), 0);
        assert_eq!(model_select(&[0.4]).unwrap(), 0);
        assert!(matches!(model_select(&[]), Err(Error::State(_))));
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.warmup_epochs(), 5);
        assert_eq!((c.eta, c.r0, c.r_t, c.p_plus), (0.3, 0.2, 0.8, 0.2));
        let bad = TrainConfig {
            refresh_period: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
