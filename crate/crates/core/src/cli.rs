//! The `milab` command line: dataset synthesis, training modes, frozen
//! encoder evaluation, learning-curve plots and the witness-rate sweep.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 missing artifact,
//! 4 training error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::aggregators::{Adam, AggKind, AggregatorConfig};
use crate::data::{gen_synthetic, load_dataset, save_dataset, Dataset, Split, SynthConfig};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::{aupr, max_f1, roc_auc, MetricsReport};
use crate::numcore::{Matrix, Tape};
use crate::par;
use crate::pipeline::{
    embed_dataset, evaluate_round, round_report, run_aggregator_only, run_ce_finetune,
    run_cssl_pretrain, run_end2end, run_groundtruth_finetune, run_its2clr, write_run_dir,
    FinetuneVariant, RunArtifacts, TrainConfig, CURVES_FILE, ENCODER_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "MILAB_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "milab", version, about = "Multiple-instance-learning lab")]
struct Cli {
    /// Worker threads; falls back to MILAB_THREADS, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic MIL dataset.
    Synth(SynthArgs),
    /// Run one training mode and write a run directory.
    Train(TrainArgs),
    /// Retrain aggregators on a frozen encoder and report mean and std.
    Eval(EvalArgs),
    /// Plot learning curves of one or more runs as SVG plus TSV.
    Plot(PlotArgs),
    /// Compare ItS2CLR and iterative CE across witness rates.
    SweepWr(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synthetic-data config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Mode {
    Pretrain,
    Its2clr,
    #[value(name = "its2clr-nospl")]
    Its2clrNoSpl,
    #[value(name = "its2clr-noiter")]
    Its2clrNoIter,
    Ce,
    CeIter,
    Gt,
    E2e,
    AggOnly,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    dataset: PathBuf,
    /// Training config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained encoder checkpoint, required by every mode but `pretrain`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// For `ce`: refresh pseudo labels through the validation gate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    iterative: Option<bool>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory holding `encoder.ckpt`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated aggregator kinds.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "max,topk,attention,ds_mil,transformer"
    )]
    aggregators: Vec<String>,
    #[arg(long, default_value_t = 5)]
    retrains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also fit a logistic probe on frozen embeddings with true instance labels.
    #[arg(long)]
    linear_probe: bool,
    /// Output CSV; defaults to `eval.csv` inside the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Run directories containing `curves.csv`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Split whose curves are drawn.
    #[arg(long, default_value = "train")]
    split: String,
    /// Output SVG; the table is written next to it with a `.tsv` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Synthetic-data config whose witness rate is overridden.
    #[arg(long)]
    data_config: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.45")]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    par::init_threads(threads);
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Eval(a) => cmd_eval(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::SweepWr(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("milab: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_USAGE,
        Error::MissingArtifact(_) | Error::Format { .. } => EXIT_MISSING,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_TRAINING,
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", p.display())),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!(
            "encoder checkpoint {}",
            path.display()
        )));
    }
    EncoderParams::from_bytes(&fs::read(path)?)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = gen_synthetic(&cfg)?;
    // Write into a sibling staging directory first so a failure never leaves
    // a half-written dataset behind.
    let parent = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(
        ".{}.partial",
        a.out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    ));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    save_dataset(&ds, &staging)?;
    if a.out.exists() {
        fs::remove_dir_all(&a.out)?;
    }
    fs::rename(&staging, &a.out)?;
    for split in Split::ALL {
        if let Some(w) = ds.realized_witness_rate(split) {
            println!("{} witness rate {w:.4}", split.name());
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    cfg.validate()?;
    let ds = load_dataset(&a.dataset)?;
    let mode = match (a.mode, a.iterative) {
        (Mode::Ce, Some(true)) => Mode::CeIter,
        (m, _) => m,
    };
    let init = match (mode, &a.init) {
        (Mode::Pretrain, _) => None,
        (_, Some(p)) => Some(load_encoder(p)?),
        (_, None) => {
            return Err(Error::MissingArtifact(format!(
                "mode {mode:?} needs a pretrained encoder (--init)"
            )))
        }
    };
    if mode == Mode::Gt && !ds.has_instance_labels() {
        return Err(Error::MissingArtifact(
            "ground-truth mode needs instance labels in the dataset".into(),
        ));
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join(CONFIG_SNAPSHOT), &cfg)?;
    let mut summary = serde_json::Map::new();
    if let Some(enc) = &init {
        let art = run_mode(mode, &ds, &cfg, enc, a.seed)?;
        write_run_dir(&art, &a.out)?;
        summary.insert("mode".into(), json!(art.mode));
        summary.insert("best_round".into(), json!(art.best_round));
        summary.insert("init_hash".into(), json!(art.init_hash));
        summary.insert("encoder_hash".into(), json!(art.encoder.hash()));
        summary.insert("train_bag_auc".into(), json!(art.train_bag_auc));
        summary.insert("val_bag_auc".into(), json!(art.val_bag_auc));
        summary.insert("report".into(), json!(art.report));
        println!(
            "{} test bag AUC {:.4} (round {})",
            art.mode, art.report.bag_auc, art.best_round
        );
    } else {
        let (enc, log) = run_cssl_pretrain(&ds, &cfg, a.seed)?;
        fs::write(a.out.join(ENCODER_FILE), enc.to_bytes())?;
        let mut s = String::from("epoch,train_loss,fixed_batch_loss\n");
        let _ = writeln!(s, "0,,{}", log.fixed_batch_losses[0]);
        for (e, (l, f)) in log
            .epoch_losses
            .iter()
            .zip(&log.fixed_batch_losses[1..])
            .enumerate()
        {
            let _ = writeln!(s, "{},{l},{f}", e + 1);
        }
        fs::write(a.out.join("pretrain_log.csv"), s)?;
        summary.insert("mode".into(), json!("pretrain"));
        summary.insert("encoder_hash".into(), json!(enc.hash()));
        println!(
            "pretrain final loss {:.4}",
            log.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    let manifest = json!({
        "command": "train",
        "seed": a.seed,
        "threads": threads,
        "dataset": a.dataset,
        "dataset_config_hash": ds.metadata.config_hash,
        "init": a.init,
        "out": a.out,
        "config": cfg,
        "git_describe": git_describe(),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "summary": summary,
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest)
}

fn run_mode(
    mode: Mode,
    ds: &Dataset,
    cfg: &TrainConfig,
    init: &EncoderParams,
    seed: u64,
) -> Result<RunArtifacts> {
    match mode {
        Mode::Its2clr => run_its2clr(ds, cfg, init, FinetuneVariant::Full, seed),
        Mode::Its2clrNoSpl => run_its2clr(ds, cfg, init, FinetuneVariant::NoSpl, seed),
        Mode::Its2clrNoIter => run_its2clr(ds, cfg, init, FinetuneVariant::NoIterative, seed),
        Mode::Ce => run_ce_finetune(ds, cfg, init, false, seed),
        Mode::CeIter => run_ce_finetune(ds, cfg, init, true, seed),
        Mode::Gt => run_groundtruth_finetune(ds, cfg, init, seed),
        Mode::E2e => run_end2end(ds, cfg, init, seed),
        Mode::AggOnly => run_aggregator_only(ds, cfg, init, seed),
        Mode::Pretrain => unreachable!("pretraining has no initial encoder"),
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const EVAL_METRICS: [&str; 6] = [
    "bag_auc",
    "instance_auc",
    "instance_auprc",
    "instance_max_f1",
    "dice",
    "iou",
];

fn eval_values(r: &MetricsReport) -> [f64; 6] {
    [
        r.bag_auc,
        r.instance_auc,
        r.instance_auprc,
        r.instance_max_f1,
        r.dice,
        r.iou,
    ]
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let kinds: Vec<AggKind> = a
        .aggregators
        .iter()
        .map(|s| {
            s.parse::<AggKind>()
                .map_err(|_| Error::Config(format!("unknown aggregator kind {s:?}")))
        })
        .collect::<Result<_>>()?;
    if a.retrains == 0 {
        return Err(Error::Config("--retrains must be positive".into()));
    }
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    let enc = load_encoder(&a.run.join(ENCODER_FILE))?;
    let ds = load_dataset(&a.dataset)?;
    if a.linear_probe && !ds.has_instance_labels() {
        return Err(Error::MissingArtifact(
            "linear probe needs instance labels".into(),
        ));
    }
    let emb = embed_dataset(&enc, &ds)?;
    let mut out = String::from("aggregator");
    for m in EVAL_METRICS {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for kind in kinds {
        let agg = AggregatorConfig {
            kind,
            ..cfg.aggregator.clone()
        };
        let mut vals: Vec<[f64; 6]> = Vec::with_capacity(a.retrains);
        for i in 0..a.retrains {
            let seed = a.seed.wrapping_add(i as u64);
            let ev = evaluate_round(&ds, &emb, &agg, seed)?;
            let report = round_report(&ds, &emb, &ev)?;
            vals.push(eval_values(&report));
        }
        let _ = write!(out, "{kind}");
        for j in 0..EVAL_METRICS.len() {
            let col: Vec<f64> = vals.iter().map(|v| v[j]).collect();
            let (m, s) = mean_std(&col);
            let _ = write!(out, ",{m},{s}");
        }
        out.push('\n');
    }
    if a.linear_probe {
        let (auc, ap, f1) = linear_probe(&ds, &emb)?;
        let _ = writeln!(out, "linear-probe,,,{auc},0,{ap},0,{f1},0,,,,");
    }
    let path = a.out.clone().unwrap_or_else(|| a.run.join("eval.csv"));
    fs::write(&path, &out)?;
    print!("{out}");
    Ok(())
}

/// Logistic regression on frozen training-split embeddings with true
/// instance labels; returns test instance AUC, AUPRC and max F1.
pub fn linear_probe(ds: &Dataset, emb: &Matrix) -> Result<(f64, f64, f64)> {
    let truth = ds
        .instance_labels()
        .ok_or_else(|| Error::MissingArtifact("linear probe needs instance labels".into()))?;
    let ids =
        |s: Split| -> Vec<usize> { ds.bags_in(s).iter().flat_map(|b| b.start..b.end).collect() };
    let (train, test) = (ids(Split::Train), ids(Split::Test));
    let x = emb.gather_rows(&train);
    let y: Vec<f64> = train.iter().map(|&i| f64::from(truth[i])).collect();
    let mut params = vec![Matrix::zeros(emb.cols(), 1), Matrix::zeros(1, 1)];
    let mut adam = Adam::new(&params);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let xv = tape.input(x.clone());
        let logits = tape.affine(xv, w, b)?;
        let loss = tape.bce_with_logits(logits, &y)?;
        let grads = tape.backward(loss)?.params();
        adam.step(&mut params, &grads, 0.05)?;
    }
    let xt = emb.gather_rows(&test);
    let logits = xt.matmul(&params[0])?;
    let scores: Vec<f64> = (0..xt.rows())
        .map(|i| logits.get(i, 0) + params[1].get(0, 0))
        .collect();
    let labels: Vec<u8> = test.iter().map(|&i| truth[i]).collect();
    Ok((
        roc_auc(&labels, &scores)?,
        aupr(&labels, &scores)?,
        max_f1(&labels, &scores)?.0,
    ))
}

/// A metric name with its `(epoch, value)` points.
pub type Series = (&'static str, Vec<(f64, f64)>);

/// One parsed `curves.csv`: a series per metric for a split.
fn read_curves(dir: &Path, split: &str) -> Result<Vec<Series>> {
    let path = dir.join(CURVES_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Config(format!("no curves at {}", path.display())))?;
    let metrics: [(&str, usize); 3] = [("inst_auc", 4), ("inst_max_f1", 5), ("bag_auc", 3)];
    let mut out: Vec<(&str, Vec<(f64, f64)>)> =
        metrics.iter().map(|(n, _)| (*n, Vec::new())).collect();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Config(format!(
                "malformed curve row in {}: {line}",
                path.display()
            )));
        }
        if f[2] != split {
            continue;
        }
        let epoch: f64 = f[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad epoch {:?}", f[1])))?;
        for (k, &(_, col)) in metrics.iter().enumerate() {
            if let Ok(v) = f[col].parse::<f64>() {
                out[k].1.push((epoch, v));
            }
        }
    }
    Ok(out)
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// SVG line chart and its TSV table for curves of the given runs.
pub fn render_plot(runs: &[(String, Vec<Series>)]) -> (String, String) {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let max_epoch = runs
        .iter()
        .flat_map(|(_, c)| c.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)))
        .fold(1.0_f64, f64::max);
    let sx = |e: f64| m + e / max_epoch * (w - 2.0 * m);
    let sy = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {} L{m} {} L{} {}" fill="none" stroke="black"/>"#,
        m,
        h - m,
        w - m,
        h - m
    );
    for t in 0..=4 {
        let v = f64::from(t) / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            m - 4.0,
            sy(v) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">epoch</text>"#,
        w / 2.0,
        h - 12.0
    );
    let mut tsv = String::from("run\tmetric\tepoch\tvalue\n");
    let mut k = 0;
    for (name, curves) in runs {
        for (metric, pts) in curves {
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|&(e, v)| format!("{:.2},{:.2}", sx(e), sy(v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="10" fill="{color}">{name} {metric}</text>"#,
                w - m - 150.0,
                m + 12.0 * k as f64
            );
            for &(e, v) in pts {
                let _ = writeln!(tsv, "{name}\t{metric}\t{e}\t{v}");
            }
            k += 1;
        }
    }
    svg.push_str("</svg>\n");
    (svg, tsv)
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, read_curves(dir, &a.split)?));
    }
    let (svg, tsv) = render_plot(&runs);
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    fs::write(&a.out, svg)?;
    fs::write(a.out.with_extension("tsv"), tsv)?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let base: SynthConfig = read_json(a.data_config.as_deref())?;
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    let mut rows =
        String::from("witness_rate,seed,its2clr_test_bag_auc,ce_iter_test_bag_auc,margin\n");
    let mut summary = String::from("witness_rate,mean_margin\n");
    for &wr in &a.rates {
        let mut margins = Vec::new();
        for &seed in &a.seeds {
            let ds = gen_synthetic(&SynthConfig {
                witness_rate: wr,
                seed,
                ..base.clone()
            })?;
            let (enc, _) = run_cssl_pretrain(&ds, &cfg, seed)?;
            let ours = run_its2clr(&ds, &cfg, &enc, FinetuneVariant::Full, seed)?
                .report
                .bag_auc;
            let ce = run_ce_finetune(&ds, &cfg, &enc, true, seed)?.report.bag_auc;
            margins.push(ours - ce);
            let _ = writeln!(rows, "{wr},{seed},{ours},{ce},{}", ours - ce);
        }
        let (m, _) = mean_std(&margins);
        let _ = writeln!(summary, "{wr},{m}");
        println!("witness rate {wr}: mean ItS2CLR - CE-iter margin {m:.4}");
    }
    fs::write(a.out.join("sweep.csv"), rows)?;
    fs::write(a.out.join("sweep_summary.csv"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_is_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), EXIT_MISSING);
        let batch = Error::Batch {
            pool: "X+_pos(r)".into(),
            context: String::new(),
        };
        assert_eq!(exit_code(&batch), EXIT_TRAINING);
    }

    #[test]
    fn plot_is_deterministic_and_bounded() {
        let runs = vec![(
            "a".to_string(),
            vec![("inst_auc", vec![(0.0, 0.5), (5.0, 1.3)])],
        )];
        let (s1, t1) = render_plot(&runs);
        let (s2, t2) = render_plot(&runs);
        assert_eq!((s1.clone(), t1.clone()), (s2, t2));
        assert_eq!(s1.matches("<polyline").count(), 1);
        assert!(s1.contains("590.00,50.00"));
        assert_eq!(t1.lines().count(), 3);
    }
}
