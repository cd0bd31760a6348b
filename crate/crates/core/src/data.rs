//! Synthetic bags, witness-rate and sub-bag transforms, feature-space
//! augmentation and the on-disk dataset format.
//!
//! A dataset directory holds two files:
//!
//! * `features.milf`: magic `MILF1\0`, `u32` N, `u32` m, then `N·m` `f32`
//!   values, all little-endian, row-major.
//! * `manifest.json`: `{"metadata": {...}, "bags": [{"id", "label",
//!   "start", "end", "instance_labels"?, "split"}, ...]}`.
//!
//! Features are generated in `f64` and rounded through `f32`, so the
//! in-memory table round-trips through the file without loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::hex_digest;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::numcore::Matrix;
use crate::rng::{self, Rng};

pub const FEATURE_MAGIC: &[u8; 6] = b"MILF1\0";
pub const FEATURE_FILE: &str = "features.milf";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub id: usize,
    pub label: u8,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_labels: Option<Vec<u8>>,
    pub split: Split,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub m: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub bags: Vec<Bag>,
    pub metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub m: usize,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    /// Fraction of positive bags in every split.
    pub positive_fraction: f64,
    pub bag_size: usize,
    /// Bag sizes are uniform in `bag_size ± bag_size_jitter`.
    pub bag_size_jitter: usize,
    pub witness_rate: f64,
    pub neg_components: usize,
    /// Distance of the positive mean from the centroid of negative means.
    pub separation: f64,
    /// Distance of each negative mixture mean from their common centroid.
    pub negative_spread: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m: 32,
            train_bags: 100,
            val_bags: 30,
            test_bags: 30,
            positive_fraction: 0.5,
            bag_size: 50,
            bag_size_jitter: 0,
            witness_rate: 0.10,
            neg_components: 3,
            separation: 2.0,
            negative_spread: 2.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.m == 0 {
            return bad("m must be positive");
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad("witness_rate must lie in (0, 1]");
        }
        if self.bag_size == 0 || self.bag_size_jitter >= self.bag_size {
            return bad("bag sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        if self.neg_components == 0 {
            return bad("need at least one negative component");
        }
        if !(self.noise_scale >= 0.0 && self.separation.is_finite() && self.negative_spread >= 0.0)
        {
            return bad("noise_scale and negative_spread must be nonnegative");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex_digest(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}

fn gaussian_vec(rng: &mut Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut Rng, m: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, m);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Number of witnesses placed in a positive bag of size `k`.
pub fn witnesses_for(witness_rate: f64, k: usize) -> usize {
    crate::sampler::ceil_count(witness_rate, k).max(1)
}

/// Generates bags split by split, positive bags first within each split.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let m = cfg.m;
    let mut r = rng::seeded(cfg.seed, rng::stream::SYNTH);
    let dirs: Vec<Vec<f64>> = (0..cfg.neg_components)
        .map(|_| unit_vec(&mut r, m))
        .collect();
    let neg_means: Vec<Vec<f64>> = dirs
        .iter()
        .map(|d| d.iter().map(|x| x * cfg.negative_spread).collect())
        .collect();
    let centroid: Vec<f64> = (0..m)
        .map(|j| neg_means.iter().map(|c| c[j]).sum::<f64>() / cfg.neg_components as f64)
        .collect();
    let u = unit_vec(&mut r, m);
    let pos_mean: Vec<f64> = centroid
        .iter()
        .zip(&u)
        .map(|(c, d)| c + cfg.separation * d)
        .collect();

    let mut data = Vec::new();
    let mut bags = Vec::new();
    let sample = |mean: &[f64], r: &mut Rng, data: &mut Vec<f64>| {
        for &mu in mean {
            let e: f64 = StandardNormal.sample(r);
            data.push(f32_round(mu + cfg.noise_scale * e));
        }
    };
    for (split, n) in [
        (Split::Train, cfg.train_bags),
        (Split::Val, cfg.val_bags),
        (Split::Test, cfg.test_bags),
    ] {
        let n_pos = (cfg.positive_fraction * n as f64).round() as usize;
        for b in 0..n {
            let label = u8::from(b < n_pos);
            let j = cfg.bag_size_jitter;
            let k = if j == 0 {
                cfg.bag_size
            } else {
                r.random_range(cfg.bag_size - j..=cfg.bag_size + j)
            };
            let mut inst = vec![0u8; k];
            if label == 1 {
                inst[..witnesses_for(cfg.witness_rate, k)].fill(1);
                inst.shuffle(&mut r);
            }
            let start = data.len() / m;
            for &y in &inst {
                if y == 1 {
                    sample(&pos_mean, &mut r, &mut data);
                } else {
                    let c = r.random_range(0..cfg.neg_components);
                    sample(&neg_means[c], &mut r, &mut data);
                }
            }
            bags.push(Bag {
                id: bags.len(),
                label,
                start,
                end: start + k,
                instance_labels: Some(inst),
                split,
            });
        }
    }
    let n = data.len() / m;
    Ok(Dataset {
        features: Matrix::new(n, m, data)?,
        bags,
        metadata: Metadata {
            m,
            config_hash: cfg.hash(),
            config: Some(cfg.clone()),
        },
    })
}

impl Dataset {
    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn bag_features(&self, bag: &Bag) -> Matrix {
        self.features.slice_rows(bag.start, bag.end)
    }

    pub fn bags_in(&self, split: Split) -> Vec<&Bag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    pub fn has_instance_labels(&self) -> bool {
        self.bags.iter().all(|b| b.instance_labels.is_some())
    }

    /// Ground-truth label per instance, if every bag carries them.
    pub fn instance_labels(&self) -> Option<Vec<u8>> {
        let mut out = vec![0u8; self.n_instances()];
        for b in &self.bags {
            out[b.start..b.end].copy_from_slice(b.instance_labels.as_ref()?);
        }
        Some(out)
    }

    /// Bag index of every instance.
    pub fn bag_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_instances()];
        for (i, b) in self.bags.iter().enumerate() {
            out[b.start..b.end].fill(i);
        }
        out
    }

    /// Fraction of positive instances among positive bags of a split.
    pub fn realized_witness_rate(&self, split: Split) -> Option<f64> {
        let (mut pos, mut tot) = (0usize, 0usize);
        for b in self
            .bags
            .iter()
            .filter(|b| b.split == split && b.label == 1)
        {
            pos += b
                .instance_labels
                .as_ref()?
                .iter()
                .filter(|&&y| y == 1)
                .count();
            tot += b.len();
        }
        (tot > 0).then(|| pos as f64 / tot as f64)
    }

    /// Checks that bag ranges partition `[0, N)` and labels are coherent.
    pub fn validate(&self) -> Result<()> {
        if self.features.cols() != self.metadata.m {
            return Err(Error::Data(format!(
                "feature width {} differs from metadata m {}",
                self.features.cols(),
                self.metadata.m
            )));
        }
        let mut order: Vec<&Bag> = self.bags.iter().collect();
        order.sort_by_key(|b| b.start);
        let mut next = 0;
        for (k, b) in order.iter().enumerate() {
            if b.start != next || b.end < b.start {
                return Err(Error::Format {
                    offset: k,
                    msg: format!(
                        "bag {} covers [{}, {}) but the next free row is {next}",
                        b.id, b.start, b.end
                    ),
                });
            }
            next = b.end;
            if let Some(l) = &b.instance_labels {
                if l.len() != b.len() {
                    return Err(Error::Data(format!(
                        "bag {} has {} instance labels",
                        b.id,
                        l.len()
                    )));
                }
                let any = l.contains(&1);
                if any != (b.label == 1) {
                    return Err(Error::Data(format!(
                        "bag {} label disagrees with its instances",
                        b.id
                    )));
                }
            }
        }
        if next != self.n_instances() {
            return Err(Error::Format {
                offset: order.len(),
                msg: format!("bags cover {next} of {} instances", self.n_instances()),
            });
        }
        Ok(())
    }

    /// Rebuilds a dataset from `(template bag, kept instance rows)` pairs,
    /// renumbering ids and ranges.
    fn rebuild(&self, parts: Vec<(&Bag, Vec<usize>)>) -> Dataset {
        let m = self.features.cols();
        let mut data = Vec::new();
        let mut bags = Vec::with_capacity(parts.len());
        let mut start = 0;
        for (tpl, rows) in parts {
            for &r in &rows {
                data.extend_from_slice(self.features.row(r));
            }
            let labels = tpl
                .instance_labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r - tpl.start]).collect::<Vec<u8>>());
            bags.push(Bag {
                id: bags.len(),
                label: tpl.label,
                start,
                end: start + rows.len(),
                instance_labels: labels,
                split: tpl.split,
            });
            start += rows.len();
        }
        Dataset {
            features: Matrix::from_vec_unchecked(start, m, data),
            bags,
            metadata: self.metadata.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WitnessTarget {
    Positives,
    Negatives,
}

/// Subsamples one class inside every positive bag, keeping
/// `⌈keep·count⌉` instances of it (never fewer than one positive).
pub fn set_witness_rate(
    ds: &Dataset,
    keep: f64,
    which: WitnessTarget,
    seed: u64,
) -> Result<Dataset> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction must lie in (0, 1], got {keep}"
        )));
    }
    if !ds.has_instance_labels() {
        return Err(Error::Data(
            "witness-rate control needs instance labels".into(),
        ));
    }
    let mut r = rng::seeded(seed, rng::stream::WITNESS);
    let mut parts = Vec::with_capacity(ds.bags.len());
    for b in &ds.bags {
        let rows: Vec<usize> = (b.start..b.end).collect();
        if b.label == 0 {
            parts.push((b, rows));
            continue;
        }
        let labels = b.instance_labels.as_ref().expect("checked above");
        let target = u8::from(which == WitnessTarget::Positives);
        let mut chosen: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| labels[i - b.start] == target)
            .collect();
        let mut n_keep = crate::sampler::ceil_count(keep, chosen.len());
        if target == 1 {
            n_keep = n_keep.max(1);
        }
        chosen.shuffle(&mut r);
        let mut kept: Vec<usize> = chosen[..n_keep].to_vec();
        kept.extend(
            rows.iter()
                .copied()
                .filter(|&i| labels[i - b.start] != target),
        );
        kept.sort_unstable();
        if kept.is_empty() {
            return Err(Error::Data(format!("bag {} would become empty", b.id)));
        }
        parts.push((b, kept));
    }
    Ok(ds.rebuild(parts))
}

/// Splits bags larger than `max_size` into sub-bags.
///
/// Negative bags are shuffled and cut into near-equal pieces. Positive bags
/// get their positives dealt evenly across sub-bags and negatives allotted
/// in proportion, so every sub-bag keeps a positive and roughly the parent's
/// witness rate. A positive bag with fewer positives than the requested
/// number of pieces is cut into as many pieces as it has positives.
pub fn partition_subbags(ds: &Dataset, max_size: usize, seed: u64) -> Result<Dataset> {
    if max_size == 0 {
        return Err(Error::Config("max_size must be at least 1".into()));
    }
    let mut r = rng::seeded(seed, rng::stream::SUBBAG);
    let mut parts = Vec::new();
    for b in &ds.bags {
        let mut rows: Vec<usize> = (b.start..b.end).collect();
        if b.len() <= max_size {
            parts.push((b, rows));
            continue;
        }
        let mut n_sub = b.len().div_ceil(max_size);
        if b.label == 0 {
            rows.shuffle(&mut r);
            for piece in even_pieces(&rows, n_sub) {
                parts.push((b, sorted(piece)));
            }
            continue;
        }
        let labels = b.instance_labels.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "positive bag {} needs instance labels to split",
                b.id
            ))
        })?;
        let mut pos: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| labels[i - b.start] == 1)
            .collect();
        let mut neg: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| labels[i - b.start] != 1)
            .collect();
        n_sub = n_sub.min(pos.len());
        pos.shuffle(&mut r);
        neg.shuffle(&mut r);
        let pos_pieces = even_pieces(&pos, n_sub);
        let mut taken = 0usize;
        let mut cum_pos = 0usize;
        for piece in pos_pieces {
            cum_pos += piece.len();
            // Cumulative proportional allocation keeps the total exact.
            let upto = (neg.len() * cum_pos).div_ceil(pos.len()).min(neg.len());
            let mut rows = piece.to_vec();
            rows.extend_from_slice(&neg[taken..upto]);
            taken = upto;
            parts.push((b, sorted(rows)));
        }
    }
    Ok(ds.rebuild(parts))
}

fn even_pieces(v: &[usize], n: usize) -> Vec<&[usize]> {
    let (q, rem) = (v.len() / n, v.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut s = 0;
    for i in 0..n {
        let len = q + usize::from(i < rem);
        out.push(&v[s..s + len]);
        s += len;
    }
    out
}

fn sorted(v: impl Into<Vec<usize>>) -> Vec<usize> {
    let mut v = v.into();
    v.sort_unstable();
    v
}

/// `x' = s·(x + ε)` with `ε ~ N(0, strength²)` per coordinate and
/// `s ~ U[1 − strength, 1 + strength]`.
pub fn augment(x: &[f64], strength: f64, rng: &mut Rng) -> Vec<f64> {
    if strength <= 0.0 {
        return x.to_vec();
    }
    let s = rng.random_range(1.0 - strength..=1.0 + strength);
    x.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(rng);
            s * (v + strength * e)
        })
        .collect()
}

/// Augments every row of a matrix in order.
pub fn augment_rows(x: &Matrix, strength: f64, rng: &mut Rng) -> Matrix {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        data.extend(augment(x.row(r), strength, rng));
    }
    Matrix::from_vec_unchecked(x.rows(), x.cols(), data)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: Metadata,
    bags: Vec<Bag>,
}

pub fn features_to_bytes(features: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FEATURE_MAGIC)?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let at = r.offset();
    let vals = r.f32s(n * m)?;
    r.finish()?;
    if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: at + 4 * k,
            msg: "non-finite feature".into(),
        });
    }
    Ok(Matrix::from_vec_unchecked(
        n,
        m,
        vals.into_iter().map(f64::from).collect(),
    ))
}

pub fn manifest_to_string(ds: &Dataset) -> Result<String> {
    let man = Manifest {
        metadata: ds.metadata.clone(),
        bags: ds.bags.clone(),
    };
    Ok(serde_json::to_string_pretty(&man)? + "\n")
}

/// Writes `features.milf` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(FEATURE_FILE), features_to_bytes(&ds.features))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_to_string(ds)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let fpath = dir.join(FEATURE_FILE);
    let mpath = dir.join(MANIFEST_FILE);
    for p in [&fpath, &mpath] {
        if !p.is_file() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
    }
    let features = features_from_bytes(&fs::read(fpath)?)?;
    let man: Manifest = serde_json::from_str(&fs::read_to_string(mpath)?)?;
    let ds = Dataset {
        features,
        bags: man.bags,
        metadata: man.metadata,
    };
    ds.validate()?;
    Ok(ds)
}
