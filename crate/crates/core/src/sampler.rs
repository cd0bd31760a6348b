//! Instance pools, the self-paced rate schedule and contrastive batch
//! construction.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Instance ids (global indices) partitioned by bag label and pseudo label.
/// Every set is kept sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstancePools {
    pub neg_bag_ids: Vec<usize>,
    pub pos_pseudo_ids: Vec<usize>,
    pub neg_pseudo_ids: Vec<usize>,
    pub pos_confident_ids: Vec<usize>,
    pub neg_confident_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpsSchedule {
    pub r0: f64,
    pub r_t: f64,
    pub t_warmup: usize,
    pub t_total: usize,
    pub p_plus: f64,
}

impl SpsSchedule {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !(frac(self.r0) && frac(self.r_t) && self.r0 <= self.r_t) {
            return Err(Error::Config(format!(
                "need 0 <= r0 <= rT <= 1, got r0={} rT={}",
                self.r0, self.r_t
            )));
        }
        if self.t_warmup >= self.t_total {
            return Err(Error::Config(format!(
                "warm-up {} must be shorter than the {} finetune epochs",
                self.t_warmup, self.t_total
            )));
        }
        if !frac(self.p_plus) {
            return Err(Error::Config(format!(
                "p_plus must lie in [0,1], got {}",
                self.p_plus
            )));
        }
        Ok(())
    }

    pub fn in_warmup(&self, t: f64) -> bool {
        t <= self.t_warmup as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub n_anchors: usize,
    pub n_same: usize,
    pub n_diff: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            n_anchors: 128,
            n_same: 8,
            n_diff: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<usize>,
    pub same: Vec<Vec<usize>>,
    pub diff: Vec<Vec<usize>>,
    /// Anchors flagged as positive (drawn from `X⁺_pos(r)`).
    pub positive: Vec<bool>,
    /// Number of sets that had to be drawn with replacement.
    pub replacement_draws: usize,
}

/// Splits instances by bag label, then positive-bag instances by pseudo
/// label. `bag_of[i]` is the bag index of instance `i`.
pub fn partition_instances(
    bag_labels: &[u8],
    bag_of: &[usize],
    pseudo_labels: &[Option<u8>],
) -> Result<InstancePools> {
    if bag_of.len() != pseudo_labels.len() {
        return Err(Error::Shape(format!(
            "{} instances but {} pseudo labels",
            bag_of.len(),
            pseudo_labels.len()
        )));
    }
    let mut pools = InstancePools::default();
    for (i, (&b, &p)) in bag_of.iter().zip(pseudo_labels).enumerate() {
        let label = *bag_labels
            .get(b)
            .ok_or_else(|| Error::Shape(format!("instance {i} refers to missing bag {b}")))?;
        if label == 0 {
            pools.neg_bag_ids.push(i);
            continue;
        }
        match p {
            Some(1) => pools.pos_pseudo_ids.push(i),
            Some(_) => pools.neg_pseudo_ids.push(i),
            None => {
                return Err(Error::State(format!(
                    "instance {i} of positive bag {b} has no pseudo label"
                )))
            }
        }
    }
    Ok(pools)
}

/// Linear growth of the confident fraction after warm-up.
pub fn rate_schedule(t: f64, s: &SpsSchedule) -> Result<f64> {
    let (tw, tt) = (s.t_warmup as f64, s.t_total as f64);
    if t <= tw {
        return Err(Error::Contract(format!(
            "confidence rate requested at t={t} inside warm-up (T_warmup={tw})"
        )));
    }
    if t >= tt {
        return Ok(s.r_t);
    }
    let alpha = (s.r_t - s.r0) / (tt - tw);
    Ok((s.r0 + alpha * (t - tw)).min(s.r_t))
}

/// `⌈r·n⌉` with a small tolerance so that products such as `0.3·10` do not
/// round up because of representation error.
pub(crate) fn ceil_count(r: f64, n: usize) -> usize {
    let v = r * n as f64 - 1e-9;
    (v.ceil().max(0.0) as usize).min(n)
}

/// Fills the confidence pools: highest-scoring positives and lowest-scoring
/// negatives, ties by ascending id. `scores` is indexed by instance id.
pub fn select_confident(pools: &mut InstancePools, scores: &[f64], r: f64) -> Result<()> {
    let max_id = pools
        .pos_pseudo_ids
        .iter()
        .chain(&pools.neg_pseudo_ids)
        .max();
    if let Some(&m) = max_id {
        if m >= scores.len() {
            return Err(Error::Shape(format!("no score for instance {m}")));
        }
    }
    let pick = |ids: &[usize], descending: bool| -> Vec<usize> {
        let mut v = ids.to_vec();
        v.sort_by(|&a, &b| {
            let o = scores[a].total_cmp(&scores[b]);
            let o = if descending { o.reverse() } else { o };
            o.then(a.cmp(&b))
        });
        v.truncate(ceil_count(r, ids.len()));
        v.sort_unstable();
        v
    };
    pools.pos_confident_ids = pick(&pools.pos_pseudo_ids, true);
    pools.neg_confident_ids = pick(&pools.neg_pseudo_ids, false);
    Ok(())
}

fn merge_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v.sort_unstable();
    v.dedup();
    v
}

/// Uniform draw of `k` members of `pool` excluding `skip`. Falls back to
/// sampling with replacement when fewer than `k` candidates exist.
fn draw_set(
    pool: &[usize],
    skip: Option<usize>,
    k: usize,
    rng: &mut Rng,
    replaced: &mut usize,
) -> Vec<usize> {
    let excl = skip.and_then(|s| pool.binary_search(&s).ok());
    let n = pool.len() - usize::from(excl.is_some());
    let at = |j: usize| match excl {
        Some(e) if j >= e => pool[j + 1],
        _ => pool[j],
    };
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if n >= k {
        index::sample(rng, n, k).into_iter().map(at).collect()
    } else {
        *replaced += 1;
        (0..k).map(|_| at(rng.random_range(0..n))).collect()
    }
}

fn require(pool: &[usize], name: &str, context: &str) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Batch {
            pool: name.to_string(),
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Draws one contrastive batch at (possibly fractional) epoch `t`.
pub fn draw_batch(
    pools: &InstancePools,
    sched: &SpsSchedule,
    t: f64,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<ContrastiveBatch> {
    if spec.n_anchors == 0 || spec.n_same == 0 {
        return Err(Error::Config(
            "batch needs at least one anchor and one same-label sample".into(),
        ));
    }
    let mut batch = ContrastiveBatch {
        anchors: Vec::with_capacity(spec.n_anchors),
        same: Vec::with_capacity(spec.n_anchors),
        diff: Vec::with_capacity(spec.n_anchors),
        positive: Vec::with_capacity(spec.n_anchors),
        replacement_draws: 0,
    };
    let mut replaced = 0;
    let mut push = |b: &mut ContrastiveBatch,
                    anchor: usize,
                    same_pool: &[usize],
                    same_name: &str,
                    diff_pool: &[usize],
                    pos: bool,
                    rng: &mut Rng|
     -> Result<()> {
        let same = draw_set(same_pool, Some(anchor), spec.n_same, rng, &mut replaced);
        if same.is_empty() {
            return Err(Error::Batch {
                pool: same_name.to_string(),
                context: format!("no same-label partner for anchor {anchor}"),
            });
        }
        let diff = draw_set(diff_pool, Some(anchor), spec.n_diff, rng, &mut replaced);
        b.anchors.push(anchor);
        b.same.push(same);
        b.diff.push(diff);
        b.positive.push(pos);
        Ok(())
    };

    if sched.in_warmup(t) {
        require(&pools.neg_bag_ids, "X-_neg", "warm-up anchors")?;
        require(
            &pools.pos_pseudo_ids,
            "X+_pos",
            "warm-up different-label set",
        )?;
        for _ in 0..spec.n_anchors {
            let a = pools.neg_bag_ids[rng.random_range(0..pools.neg_bag_ids.len())];
            push(
                &mut batch,
                a,
                &pools.neg_bag_ids,
                "X-_neg",
                &pools.pos_pseudo_ids,
                false,
                rng,
            )?;
        }
    } else {
        let neg_union = merge_sorted(&pools.neg_bag_ids, &pools.neg_confident_ids);
        let pos = &pools.pos_confident_ids;
        let n_pos = ceil_count(sched.p_plus, spec.n_anchors);
        if n_pos > 0 {
            require(pos, "X+_pos(r)", "positive anchors")?;
        }
        if n_pos < spec.n_anchors {
            require(&neg_union, "X-_neg+X-_pos(r)", "negative anchors")?;
        }
        for _ in 0..n_pos {
            let a = pos[rng.random_range(0..pos.len())];
            push(&mut batch, a, pos, "X+_pos(r)", &neg_union, true, rng)?;
        }
        for _ in n_pos..spec.n_anchors {
            let a = neg_union[rng.random_range(0..neg_union.len())];
            push(
                &mut batch,
                a,
                &neg_union,
                "X-_neg+X-_pos(r)",
                pos,
                false,
                rng,
            )?;
        }
    }
    batch.replacement_draws = replaced;
    Ok(batch)
}

/// Counts pool-membership violations in a batch: anchors outside their
/// source pool, set members outside the permitted pool, and anchors that
/// appear in their own sets.
pub fn batch_violations(
    pools: &InstancePools,
    sched: &SpsSchedule,
    t: f64,
    batch: &ContrastiveBatch,
) -> usize {
    let has = |v: &[usize], x: &usize| v.binary_search(x).is_ok();
    let neg_union = merge_sorted(&pools.neg_bag_ids, &pools.neg_confident_ids);
    let mut bad = 0;
    for k in 0..batch.anchors.len() {
        let a = batch.anchors[k];
        let (sp, dp): (&[usize], &[usize]) = if sched.in_warmup(t) {
            (&pools.neg_bag_ids, &pools.pos_pseudo_ids)
        } else if batch.positive[k] {
            (&pools.pos_confident_ids, &neg_union)
        } else {
            (&neg_union, &pools.pos_confident_ids)
        };
        bad += usize::from(!has(sp, &a));
        bad += usize::from(batch.same[k].contains(&a) || batch.diff[k].contains(&a));
        bad += batch.same[k].iter().filter(|x| !has(sp, x)).count();
        bad += batch.diff[k].iter().filter(|x| !has(dp, x)).count();
    }
    bad
}
