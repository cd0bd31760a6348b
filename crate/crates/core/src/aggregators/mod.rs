//! Multiple-instance aggregators mapping a bag of embeddings `H` (K×d) to a
//! bag probability, with per-instance probabilities where the model has an
//! instance classifier φ.
//!
//! Every forward pass first sorts the bag rows into a canonical
//! lexicographic order, so bag outputs are exactly invariant to instance
//! permutations. Per-instance outputs are mapped back to the caller's order.

mod checkpoint;
mod train;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Matrix, Tape, Var};
use crate::par;
use crate::rng::{self, Rng};
use crate::sampler::ceil_count;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use train::{train_aggregator, Adam, TrainedAggregator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggKind {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "topk")]
    TopK,
    /// Attention pooling of embeddings followed by a bag classifier.
    #[serde(rename = "attention")]
    Attention,
    /// Attention-weighted average of instance probabilities.
    #[serde(rename = "attention-instance")]
    AttentionInstance,
    #[serde(rename = "ds_mil", alias = "ds-mil", alias = "dsmil")]
    DsMil,
    #[serde(rename = "transformer")]
    Transformer,
}

impl AggKind {
    pub const ALL: [AggKind; 6] = [
        AggKind::Max,
        AggKind::TopK,
        AggKind::Attention,
        AggKind::AttentionInstance,
        AggKind::DsMil,
        AggKind::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Max => "max",
            AggKind::TopK => "topk",
            AggKind::Attention => "attention",
            AggKind::AttentionInstance => "attention-instance",
            AggKind::DsMil => "ds_mil",
            AggKind::Transformer => "transformer",
        }
    }

    /// Whether the kind defines an instance classifier φ.
    pub fn has_instance_classifier(self) -> bool {
        !matches!(self, AggKind::Attention | AggKind::Transformer)
    }

    pub(crate) fn tag(self) -> u8 {
        AggKind::ALL
            .iter()
            .position(|&k| k == self)
            .expect("listed") as u8
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        AggKind::ALL.get(usize::from(t)).copied()
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(AggKind::Max),
            "topk" | "top-k" => Ok(AggKind::TopK),
            "attention" => Ok(AggKind::Attention),
            "attention-instance" => Ok(AggKind::AttentionInstance),
            "ds_mil" | "ds-mil" | "dsmil" => Ok(AggKind::DsMil),
            "transformer" => Ok(AggKind::Transformer),
            _ => Err(Error::Config(format!("unknown aggregator kind `{s}`"))),
        }
    }
}

/// Architecture and trainer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggKind,
    pub topk_ratio: f64,
    pub dsmil_stream_weight: f64,
    /// Width `l` of the attention hidden layer; the embedding width if unset.
    pub attention_dim: Option<usize>,
    pub heads: usize,
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggKind::DsMil,
            topk_ratio: 0.1,
            dsmil_stream_weight: 1.0,
            attention_dim: None,
            heads: 4,
            layers: 2,
            lr: 2e-4,
            epochs: 350,
            decay_every: 75,
            decay_factor: 0.5,
        }
    }
}

impl AggregatorConfig {
    pub fn with_kind(kind: AggKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Shape-determining hyperparameters stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: AggKind,
    pub dim: usize,
    pub attention_dim: usize,
    pub topk_ratio: f64,
    pub stream_weight: f64,
    pub heads: usize,
    pub layers: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &AggregatorConfig, dim: usize) -> Result<Self> {
        let spec = Self {
            kind: cfg.kind,
            dim,
            attention_dim: cfg.attention_dim.unwrap_or(dim),
            topk_ratio: cfg.topk_ratio,
            stream_weight: cfg.dsmil_stream_weight,
            heads: cfg.heads,
            layers: cfg.layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("aggregator widths must be positive".into()));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "topk_ratio must lie in (0, 1], got {}",
                self.topk_ratio
            )));
        }
        if !(self.stream_weight >= 0.0 && self.stream_weight.is_finite()) {
            return Err(Error::Config(
                "dsmil_stream_weight must be nonnegative".into(),
            ));
        }
        if self.kind == AggKind::Transformer
            && (self.heads == 0 || !self.dim.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    /// Shapes of the parameter blocks in storage order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let (d, l) = (self.dim, self.attention_dim);
        let phi = [(d, 1), (1, 1)];
        let attn = [(d, l), (l, 1)];
        let bag = [(d, 1), (1, 1)];
        match self.kind {
            AggKind::Max | AggKind::TopK => phi.to_vec(),
            AggKind::Attention => [&attn[..], &bag[..]].concat(),
            AggKind::AttentionInstance => [&attn[..], &phi[..]].concat(),
            AggKind::DsMil => [&phi[..], &[(d, d), (1, d)], &bag[..]].concat(),
            AggKind::Transformer => {
                let block = [
                    (d, d),
                    (d, d),
                    (d, d),
                    (d, d),
                    (d, 2 * d),
                    (1, 2 * d),
                    (2 * d, d),
                    (1, d),
                ];
                let mut v = Vec::new();
                for _ in 0..self.layers {
                    v.extend_from_slice(&block);
                }
                v.extend_from_slice(&attn);
                v.extend_from_slice(&bag);
                v
            }
        }
    }

    /// Top-k count `max(1, ⌈ratio·K⌉)`.
    pub fn topk_count(&self, k: usize) -> usize {
        ceil_count(self.topk_ratio, k).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorModel {
    pub spec: ModelSpec,
    pub params: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub bag_score: f64,
    pub instance_scores: Option<Vec<f64>>,
    pub attention_weights: Option<Vec<f64>>,
}

/// Which transform a loss term is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Logit,
    Prob,
}

struct Forward {
    inst_logits: Option<Var>,
    attention: Option<Var>,
    bag_prob: Var,
    losses: Vec<(Var, Head, f64)>,
}

/// Row permutation that sorts `h` lexicographically.
pub fn canonical_order(h: &Matrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..h.rows()).collect();
    idx.sort_by(|&a, &b| {
        h.row(a)
            .iter()
            .zip(h.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn unpermute(perm: &[usize], sorted_vals: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; perm.len()];
    for (pos, &orig) in perm.iter().enumerate() {
        out[orig] = sorted_vals[pos];
    }
    out
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl AggregatorModel {
    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::seeded(seed, rng::stream::AGGREGATOR);
        let params = spec
            .shapes()
            .into_iter()
            .map(|(rows, cols)| init_block(rows, cols, &mut r))
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_config(cfg: &AggregatorConfig, dim: usize, seed: u64) -> Result<Self> {
        Self::init(ModelSpec::from_config(cfg, dim)?, seed)
    }

    pub fn kind(&self) -> AggKind {
        self.spec.kind
    }

    /// Sets every transformer block weight to zero, leaving the attention
    /// pooling head untouched.
    pub fn zero_transformer_blocks(&mut self) {
        if self.spec.kind == AggKind::Transformer {
            let n = 8 * self.spec.layers;
            for p in &mut self.params[..n] {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// The attention-MIL model formed by a transformer's pooling head.
    pub fn transformer_head(&self) -> Result<AggregatorModel> {
        if self.spec.kind != AggKind::Transformer {
            return Err(Error::Capability(
                "only transformer models have a pooling head".into(),
            ));
        }
        let n = 8 * self.spec.layers;
        Ok(AggregatorModel {
            spec: ModelSpec {
                kind: AggKind::Attention,
                ..self.spec
            },
            params: self.params[n..].to_vec(),
        })
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], h: Var) -> Result<Forward> {
        let s = &self.spec;
        match s.kind {
            AggKind::Max => {
                let logits = tape.affine(h, p[0], p[1])?;
                let c = argmax_first(tape.value(logits).data());
                let top = tape.gather_rows(logits, &[c])?;
                let bag_prob = tape.sigmoid(top);
                Ok(Forward {
                    inst_logits: Some(logits),
                    attention: None,
                    bag_prob,
                    losses: vec![(top, Head::Logit, 1.0)],
                })
            }
            AggKind::TopK => {
                let logits = tape.affine(h, p[0], p[1])?;
                let probs = tape.sigmoid(logits);
                let v = tape.value(probs).data();
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
                order.truncate(s.topk_count(v.len()));
                let top = tape.gather_rows(probs, &order)?;
                let bag_prob = tape.mean(top)?;
                Ok(Forward {
                    inst_logits: Some(logits),
                    attention: None,
                    bag_prob,
                    losses: vec![(bag_prob, Head::Prob, 1.0)],
                })
            }
            AggKind::Attention => {
                let (a, emb) = attention_pool(tape, h, p[0], p[1])?;
                let logit = tape.affine(emb, p[2], p[3])?;
                let bag_prob = tape.sigmoid(logit);
                Ok(Forward {
                    inst_logits: None,
                    attention: Some(a),
                    bag_prob,
                    losses: vec![(logit, Head::Logit, 1.0)],
                })
            }
            AggKind::AttentionInstance => {
                let (a, _) = attention_pool(tape, h, p[0], p[1])?;
                let logits = tape.affine(h, p[2], p[3])?;
                let probs = tape.sigmoid(logits);
                let bag_prob = tape.matmul(a, probs)?;
                Ok(Forward {
                    inst_logits: Some(logits),
                    attention: Some(a),
                    bag_prob,
                    losses: vec![(bag_prob, Head::Prob, 1.0)],
                })
            }
            AggKind::DsMil => {
                let logits = tape.affine(h, p[0], p[1])?;
                let c = argmax_first(tape.value(logits).data());
                let top = tape.gather_rows(logits, &[c])?;
                let q_lin = tape.affine(h, p[2], p[3])?;
                let q = tape.tanh(q_lin);
                let qc = tape.gather_rows(q, &[c])?;
                let qt = tape.transpose(q);
                let sim = tape.matmul(qc, qt)?;
                let sim = tape.scale(sim, 1.0 / (s.dim as f64).sqrt());
                let a = tape.softmax_rows(sim);
                let emb = tape.matmul(a, h)?;
                let emb_logit = tape.affine(emb, p[4], p[5])?;
                let w = s.stream_weight;
                let p_inst = tape.sigmoid(top);
                let p_emb = tape.sigmoid(emb_logit);
                let p_emb = tape.scale(p_emb, w);
                let sum = tape.add(p_inst, p_emb)?;
                let bag_prob = tape.scale(sum, 1.0 / (1.0 + w));
                Ok(Forward {
                    inst_logits: Some(logits),
                    attention: Some(a),
                    bag_prob,
                    losses: vec![(top, Head::Logit, 1.0), (emb_logit, Head::Logit, w)],
                })
            }
            AggKind::Transformer => {
                let mut x = h;
                for layer in 0..s.layers {
                    x = transformer_block(tape, x, &p[8 * layer..8 * layer + 8], s.heads)?;
                }
                let n = 8 * s.layers;
                let (a, emb) = attention_pool(tape, x, p[n], p[n + 1])?;
                let logit = tape.affine(emb, p[n + 2], p[n + 3])?;
                let bag_prob = tape.sigmoid(logit);
                Ok(Forward {
                    inst_logits: None,
                    attention: Some(a),
                    bag_prob,
                    losses: vec![(logit, Head::Logit, 1.0)],
                })
            }
        }
    }

    fn loss(tape: &mut Tape, f: &Forward, label: u8) -> Result<Var> {
        let y = [f64::from(label)];
        let total_w: f64 = f.losses.iter().map(|l| l.2).sum();
        let mut acc: Option<Var> = None;
        for &(v, head, w) in &f.losses {
            if w == 0.0 {
                continue;
            }
            let term = match head {
                Head::Logit => tape.bce_with_logits(v, &y)?,
                Head::Prob => tape.bce(v, &y)?,
            };
            let term = tape.scale(term, w / total_w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Config("all loss terms have zero weight".into()))
    }

    fn check_bag(&self, h: &Matrix) -> Result<()> {
        if h.rows() == 0 {
            return Err(Error::Shape("empty bag".into()));
        }
        if h.cols() != self.spec.dim {
            return Err(Error::Shape(format!(
                "bag width {} but model width {}",
                h.cols(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    /// Bag prediction for one bag.
    pub fn predict(&self, h: &Matrix) -> Result<BagPrediction> {
        self.check_bag(h)?;
        let perm = canonical_order(h);
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|m| tape.input(m.clone())).collect();
        let hv = tape.input(h.gather_rows(&perm));
        let f = self.forward(&mut tape, &vars, hv)?;
        let instance_scores = f.inst_logits.map(|l| {
            let s: Vec<f64> = tape.value(l).data().iter().map(|&x| sigmoid(x)).collect();
            unpermute(&perm, &s)
        });
        let attention_weights = f.attention.map(|a| unpermute(&perm, tape.value(a).data()));
        let bag_score = tape.value(f.bag_prob).item().clamp(0.0, 1.0);
        Ok(BagPrediction {
            bag_score,
            instance_scores,
            attention_weights,
        })
    }

    /// Predictions for many bags, evaluated in parallel and returned in order.
    pub fn predict_many(&self, bags: &[Matrix]) -> Result<Vec<BagPrediction>> {
        par::map_slice(bags, |h| self.predict(h))
            .into_iter()
            .collect()
    }

    /// Loss and parameter gradients for one bag whose rows are already in
    /// canonical order.
    pub(crate) fn loss_and_grads(
        &self,
        sorted_h: &Matrix,
        label: u8,
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|m| tape.param(m.clone())).collect();
        let hv = tape.input(sorted_h.clone());
        let f = self.forward(&mut tape, &vars, hv)?;
        let loss = Self::loss(&mut tape, &f, label)?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?.params()))
    }

    /// Bag-level training loss as a differentiable function of the
    /// parameters and the bag embeddings, for joint training with an encoder.
    pub(crate) fn tape_loss(
        &self,
        tape: &mut Tape,
        params: &[Var],
        h: Var,
        label: u8,
    ) -> Result<(Var, Var)> {
        let f = self.forward(tape, params, h)?;
        let loss = Self::loss(tape, &f, label)?;
        Ok((loss, f.bag_prob))
    }
}

fn init_block(rows: usize, cols: usize, r: &mut Rng) -> Matrix {
    if rows == 1 {
        return Matrix::zeros(rows, cols);
    }
    let dist = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(r)).collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

/// Attention weights `a = softmax_k(wᵀ tanh(V h_k))` as a 1×K row and the
/// pooled embedding `Σ a_k h_k`.
fn attention_pool(tape: &mut Tape, h: Var, v: Var, w: Var) -> Result<(Var, Var)> {
    let t = tape.matmul(h, v)?;
    let t = tape.tanh(t);
    let s = tape.matmul(t, w)?;
    let s = tape.transpose(s);
    let a = tape.softmax_rows(s);
    let emb = tape.matmul(a, h)?;
    Ok((a, emb))
}

/// `H' = MSA(H) + H; H'' = MLP(H') + H'` with parameters
/// `[Wq, Wk, Wv, Wo, W1, b1, W2, b2]`.
fn transformer_block(tape: &mut Tape, h: Var, p: &[Var], heads: usize) -> Result<Var> {
    let d = tape.value(h).cols();
    let dh = d / heads;
    let q = tape.matmul(h, p[0])?;
    let k = tape.matmul(h, p[1])?;
    let v = tape.matmul(h, p[2])?;
    let mut outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let (a, b) = (j * dh, (j + 1) * dh);
        let qh = tape.slice_cols(q, a, b)?;
        let kh = tape.slice_cols(k, a, b)?;
        let vh = tape.slice_cols(v, a, b)?;
        let kt = tape.transpose(kh);
        let sc = tape.matmul(qh, kt)?;
        let sc = tape.scale(sc, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_rows(sc);
        outs.push(tape.matmul(att, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let msa = tape.matmul(cat, p[3])?;
    let h1 = tape.add(msa, h)?;
    let hid = tape.affine(h1, p[4], p[5])?;
    let hid = tape.relu(hid);
    let mlp = tape.affine(hid, p[6], p[7])?;
    tape.add(mlp, h1)
}

/// Per-instance probabilities φ(h_k).
pub fn instance_scores(model: &AggregatorModel, h: &Matrix) -> Result<Vec<f64>> {
    if !model.kind().has_instance_classifier() {
        return Err(Error::Capability(format!(
            "{} has no instance classifier; attach an auxiliary one trained on the frozen embeddings",
            model.kind()
        )));
    }
    Ok(model.predict(h)?.instance_scores.expect("kind defines φ"))
}
