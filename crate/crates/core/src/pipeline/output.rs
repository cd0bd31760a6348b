use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CurveRow, RunArtifacts};
use crate::error::Result;
use crate::metrics::MetricsReport;

pub const CURVES_HEADER: &str =
    "round,epoch,split,bag_auc,inst_auc,inst_max_f1,pseudo_precision,pseudo_recall";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const AGGREGATOR_FILE: &str = "aggregator.ckpt";
pub const PSEUDO_FILE: &str = "pseudo_labels.csv";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Curve rows as CSV; undefined values are empty fields.
pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.epoch,
            r.split.name(),
            opt(r.bag_auc),
            opt(r.inst_auc),
            opt(r.inst_max_f1),
            opt(r.pseudo_precision),
            opt(r.pseudo_recall)
        );
    }
    s
}

/// `metric,value` rows of a report; NaN marks a metric that was undefined.
pub fn report_csv(r: &MetricsReport) -> String {
    let rows = [
        ("bag_auc", r.bag_auc),
        ("instance_auc", r.instance_auc),
        ("instance_auprc", r.instance_auprc),
        ("instance_max_f1", r.instance_max_f1),
        ("dice", r.dice),
        ("iou", r.iou),
        ("inter_class_distance", r.inter_class_distance),
        ("intra_class_deviation_pos", r.intra_class_deviation_pos),
        ("intra_class_deviation_neg", r.intra_class_deviation_neg),
        ("pseudo_label_precision", r.pseudo_label_precision),
        ("pseudo_label_recall", r.pseudo_label_recall),
    ];
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

fn rounds_csv(a: &RunArtifacts) -> String {
    let mut s = String::from("round,epoch,val_bag_auc,accepted,train_inst_auc,selected\n");
    for r in &a.rounds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.round,
            r.epoch,
            r.val_bag_auc,
            u8::from(r.accepted),
            opt(r.train_inst_auc),
            u8::from(r.round == a.best_round)
        );
    }
    s
}

/// Writes curves, report, per-round records, both checkpoints and (for
/// pseudo-label modes) the final pseudo labels into `dir`.
pub fn write_run_dir(a: &RunArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CURVES_FILE), curves_csv(&a.curves))?;
    fs::write(dir.join(REPORT_FILE), report_csv(&a.report))?;
    fs::write(dir.join(ROUNDS_FILE), rounds_csv(a))?;
    fs::write(dir.join(ENCODER_FILE), a.encoder.to_bytes())?;
    fs::write(dir.join(AGGREGATOR_FILE), a.aggregator.to_bytes())?;
    if let Some(p) = &a.pseudo {
        let mut s = String::from("instance,score,label\n");
        for (i, (sc, l)) in p.scores.iter().zip(&p.labels).enumerate() {
            let _ = writeln!(s, "{i},{sc},{l}");
        }
        fs::write(dir.join(PSEUDO_FILE), s)?;
    }
    Ok(())
}
