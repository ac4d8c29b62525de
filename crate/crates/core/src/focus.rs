//! Attention-guided token selection: which block positions stay in the
//! forward pass after the cheap early layers.
//!
//! Scoring runs on the intra-block attention scores of the first two layers.
//! Per head and per query row, raw scores are smoothed with a length-3 max
//! pool along the key axis, softmax-normalised over the block's keys, and the
//! resulting probability columns are summed over rows and heads into one
//! importance value per key position. The *shift* of importance from layer 0
//! to layer 1 (their difference) ranks positions: tokens whose attention mass
//! is still climbing through the stack are the ones worth finishing.
//!
//! The retention budget adapts to the decode rate: keep roughly `alpha` times
//! the mean decoded-per-step, but never fewer than the count of statistical
//! outliers (positions whose importance shift clears mean + one standard
//! deviation), and never more than the block.
//!
//! Selection then grows the top-k candidate set with structural passengers -
//! left neighbours, placeholder positions that have never been forwarded, and
//! decoded tokens whose KV is not yet committed - so the cache stays sound
//! no matter what the scorer picked.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Kernel width of the max pool applied along the key axis before softmax.
pub const DEFAULT_POOL_KERNEL: usize = 3;

/// Per-key importance from one layer's intra-block scores.
///
/// `scores` holds one square matrix per head (rows = queries, cols = keys,
/// pre-softmax). Each row is max-pooled with `kernel` along the key axis,
/// softmaxed, and the probability mass landing on each key column is summed
/// over all rows and heads. The result sums to `rows * heads`.
pub fn compute_importance(scores: &[Matrix], kernel: usize) -> Result<Vec<f64>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("importance needs at least one head".into()))?;
    let n = first.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("importance needs a non-empty block".into()));
    }
    let mut importance = vec![0.0; n];
    for (h, s) in scores.iter().enumerate() {
        if s.rows() != n || s.cols() != n {
            return Err(Error::Shape(format!(
                "head {}: score matrix {}x{} is not {n}x{n}",
                h,
                s.rows(),
                s.cols()
            )));
        }
        if s.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "head {}: non-finite attention score",
                h
            )));
        }
        let mut pooled = Matrix::zeros(n, n);
        for i in 0..n {
            let row = tensor::maxpool1d_same(s.row(i), kernel)?;
            pooled.row_mut(i).copy_from_slice(&row);
        }
        let probs = tensor::row_softmax(&pooled);
        for i in 0..n {
            for (j, imp) in importance.iter_mut().enumerate() {
                *imp += probs.get(i, j);
            }
        }
    }
    Ok(importance)
}

/// Importance shift between the two early layers, elementwise `l1 - l0`.
pub fn compute_delta(l1: &[f64], l0: &[f64]) -> Result<Vec<f64>> {
    if l1.len() != l0.len() {
        return Err(Error::Shape(format!(
            "importance lengths differ: {} vs {}",
            l1.len(),
            l0.len()
        )));
    }
    Ok(l1.iter().zip(l0).map(|(a, b)| a - b).collect())
}

/// Count of masked positions whose importance shift is at least one standard
/// deviation above the mean shift (both statistics over masked positions
/// only, population variance). Empty masked set yields 0.
pub fn compute_n_sigma(delta: &[f64], masked: &BTreeSet<usize>) -> usize {
    if masked.is_empty() {
        return 0;
    }
    let vals: Vec<f64> = masked.iter().map(|&j| delta[j]).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    let cut = mean + var.sqrt();
    vals.iter().filter(|&&v| v >= cut).count()
}

/// Retention budget for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Final clamped budget.
    pub k: usize,
    /// The history-driven term ceil(alpha * mean decoded per step).
    pub k_hist: usize,
    /// The outlier floor.
    pub n_sigma: usize,
    pub alpha: f64,
}

/// Budget = min(block, max(ceil(alpha * mean_decoded), n_sigma)).
///
/// `mean_decoded` is the running mean of tokens decoded per step; `None`
/// (no history yet, i.e. the very first step) counts as 1.0. `alpha` must be
/// strictly greater than 1 so the budget can never starve the decoder.
pub fn compute_budget(
    alpha: f64,
    mean_decoded: Option<f64>,
    n_sigma: usize,
    block_size: usize,
) -> Result<Budget> {
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 1, got {alpha}"
        )));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be positive".into()));
    }
    let mean = mean_decoded.unwrap_or(1.0);
    if mean.is_nan() || mean < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mean decoded must be non-negative, got {mean}"
        )));
    }
    let k_hist = (alpha * mean).ceil() as usize;
    let k = k_hist.max(n_sigma).min(block_size);
    Ok(Budget {
        k,
        k_hist,
        n_sigma,
        alpha,
    })
}

/// How the ranked candidate set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Budgeted top of the importance-shift ranking.
    FocusTop,
    /// Fixed-size top of the ranking (ignores the budget).
    FixedTopK,
    /// Fixed-size uniform random subset of the masked positions.
    FixedRandomK,
    /// Fixed-size bottom of the ranking (adversarial control).
    FixedBottomK,
    /// No eviction: every masked position is a candidate.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Candidate count for the fixed-size strategies.
    #[serde(default)]
    pub fixed_k: Option<usize>,
    /// Seed override for `FixedRandomK`.
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

impl SelectionStrategy {
    pub fn focus_top() -> Self {
        SelectionStrategy {
            kind: StrategyKind::FocusTop,
            fixed_k: None,
            rng_seed: None,
        }
    }

    pub fn none() -> Self {
        SelectionStrategy {
            kind: StrategyKind::None,
            fixed_k: None,
            rng_seed: None,
        }
    }

    pub fn fixed(kind: StrategyKind, k: usize) -> Self {
        SelectionStrategy {
            kind,
            fixed_k: Some(k),
            rng_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StrategyKind::FixedTopK | StrategyKind::FixedRandomK | StrategyKind::FixedBottomK => {
                if self.fixed_k.is_none() {
                    return Err(Error::Config(format!(
                        "strategy {:?} needs fixed_k",
                        self.kind
                    )));
                }
            }
            StrategyKind::FocusTop | StrategyKind::None => {}
        }
        Ok(())
    }
}

/// Why a position ended up in the retained set. Flags are not exclusive: one
/// position can be, say, both a placeholder and a predecessor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub topk: bool,
    pub predecessor: bool,
    pub placeholder: bool,
    pub uncached_decoded: bool,
    pub min_retention: bool,
}

/// The retained set for one step, block-relative and sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet {
    pub indices: Vec<usize>,
    pub provenance: BTreeMap<usize, Provenance>,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn rank_candidates(
    delta: &[f64],
    masked: &BTreeSet<usize>,
    take: usize,
    from_top: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = masked.iter().copied().collect();
    // Stable ranking with index as tiebreak: sort by score, ties keep the
    // lower index first regardless of direction.
    order.sort_by(|&a, &b| {
        let cmp = delta[a].partial_cmp(&delta[b]).expect("finite deltas");
        let cmp = if from_top { cmp.reverse() } else { cmp };
        cmp.then(a.cmp(&b))
    });
    order.truncate(take);
    order
}

/// Build the retained set for one step.
///
/// Inputs are block-relative. `delta` covers every block position (committed
/// slots hold don't-care values); `masked` are the still-undecoded positions
/// in play; `never_processed` the positions eligible as placeholders;
/// `uncached_decoded` the decoded positions whose KV has not been committed.
///
/// Order of construction: ranked candidates per the strategy, then the left
/// neighbour of every member (skipped when that neighbour is decoded AND
/// committed), then placeholders left of the rightmost member so far, then
/// all uncached decoded positions, then a lowest-masked-index fallback if the
/// set is still empty.
pub fn select_tokens(
    delta: &[f64],
    masked: &BTreeSet<usize>,
    never_processed: &BTreeSet<usize>,
    uncached_decoded: &BTreeSet<usize>,
    budget: &Budget,
    strategy: &SelectionStrategy,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SelectionSet> {
    strategy.validate()?;
    let block = delta.len();
    if block == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    for set in [masked, never_processed, uncached_decoded] {
        if set.iter().any(|&j| j >= block) {
            return Err(Error::InvalidArgument(format!(
                "position outside block of {block}"
            )));
        }
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite importance shift".into()));
    }
    if masked.is_empty() && uncached_decoded.is_empty() {
        return Err(Error::BlockComplete);
    }

    let mut prov: BTreeMap<usize, Provenance> = BTreeMap::new();

    // 1. Ranked candidates.
    let candidates: Vec<usize> = match strategy.kind {
        StrategyKind::FocusTop => rank_candidates(delta, masked, budget.k, true),
        StrategyKind::FixedTopK => {
            rank_candidates(delta, masked, strategy.fixed_k.unwrap(), true)
        }
        StrategyKind::FixedBottomK => {
            rank_candidates(delta, masked, strategy.fixed_k.unwrap(), false)
        }
        StrategyKind::FixedRandomK => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidArgument("random strategy needs an rng".into())
            })?;
            let mut pool: Vec<usize> = masked.iter().copied().collect();
            let take = strategy.fixed_k.unwrap().min(pool.len());
            // Partial Fisher-Yates: the first `take` slots end up a uniform
            // sample without shuffling the whole pool.
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool.sort_unstable();
            pool
        }
        StrategyKind::None => masked.iter().copied().collect(),
    };
    for &c in &candidates {
        prov.entry(c).or_default().topk = true;
    }

    // 2. Left neighbours: every member drags in position i-1 unless that
    // neighbour is already decoded with committed KV (it lives in the cache
    // and needs no forward), or i is the block's first position.
    let cached_decoded = |j: usize| -> bool {
        !masked.contains(&j) && !uncached_decoded.contains(&j) && !never_processed.contains(&j)
    };
    let mut members: BTreeSet<usize> = prov.keys().copied().collect();
    for &i in members.clone().iter() {
        if i == 0 {
            continue;
        }
        let p = i - 1;
        if cached_decoded(p) {
            continue;
        }
        prov.entry(p).or_default().predecessor = true;
    }
    members = prov.keys().copied().collect();

    // 3. Placeholders: never-forwarded positions to the left of the
    // rightmost member must come along, otherwise their first forward would
    // happen after positions that attend to them.
    if let Some(&rightmost) = members.iter().next_back() {
        for &j in never_processed.iter() {
            if j < rightmost {
                prov.entry(j).or_default().placeholder = true;
            }
        }
    }

    // 4. Decoded-but-uncommitted positions re-forward until their KV lands.
    for &j in uncached_decoded {
        prov.entry(j).or_default().uncached_decoded = true;
    }

    // 5. Never return an empty set: fall back to the lowest masked position.
    if prov.is_empty() {
        let j = *masked.iter().next().expect("masked non-empty here");
        prov.entry(j).or_default().min_retention = true;
    }

    Ok(SelectionSet {
        indices: prov.keys().copied().collect(),
        provenance: prov,
    })
}

/// Mapping between block positions and the dense row slots of a forward pass
/// restricted to `indices` (which must be sorted and unique).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionPlan {
    indices: Vec<usize>,
    slot_by_position: BTreeMap<usize, usize>,
}

impl CompactionPlan {
    pub fn new(indices: &[usize], block_len: usize) -> Result<Self> {
        let mut slot_by_position = BTreeMap::new();
        let mut prev: Option<usize> = None;
        for (slot, &p) in indices.iter().enumerate() {
            if p >= block_len {
                return Err(Error::InvalidArgument(format!(
                    "position {p} outside block of {block_len}"
                )));
            }
            if let Some(q) = prev {
                if p <= q {
                    return Err(Error::InvalidArgument(
                        "compaction indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(p);
            slot_by_position.insert(p, slot);
        }
        Ok(CompactionPlan {
            indices: indices.to_vec(),
            slot_by_position,
        })
    }

    /// Dense row slot of a block position, if retained.
    pub fn slot_of(&self, position: usize) -> Option<usize> {
        self.slot_by_position.get(&position).copied()
    }

    /// Block position behind a dense row slot.
    pub fn position_of(&self, slot: usize) -> Option<usize> {
        self.indices.get(slot).copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.indices
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn importance_hand_example_single_row() {
        // One head, one meaningful row: raw scores [0, 0, 4, 0] max-pool to
        // [0, 4, 4, 4]; softmax of that is ~[0.00607, 0.33131, 0.33131,
        // 0.33131]. With the other three rows all-zero (uniform 0.25 each),
        // the column sums are those probabilities plus 0.75.
        let mut s = Matrix::zeros(4, 4);
        s.set(0, 2, 4.0);
        let imp = compute_importance(&[s], 3).unwrap();
        let e4 = 4f64.exp();
        let z = 1.0 + 3.0 * e4;
        let lo = 1.0 / z;
        let hi = e4 / z;
        assert!((lo - 0.006072).abs() < 1e-5);
        assert!((hi - 0.331309).abs() < 1e-5);
        let want = [lo + 0.75, hi + 0.75, hi + 0.75, hi + 0.75];
        for (a, b) in imp.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn importance_mass_is_rows_times_heads() {
        let mut s0 = Matrix::zeros(5, 5);
        let mut s1 = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                s0.set(i, j, ((i * 7 + j * 3) % 11) as f64 * 0.3 - 1.0);
                s1.set(i, j, ((i * 5 + j * 13) % 7) as f64 * 0.5 - 1.5);
            }
        }
        let imp = compute_importance(&[s0, s1], 3).unwrap();
        let total: f64 = imp.iter().sum();
        assert!((total - 10.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn importance_rejects_bad_input() {
        let s = Matrix::zeros(3, 4);
        assert!(matches!(
            compute_importance(&[s], 3),
            Err(Error::Shape(_))
        ));
        let mut s = Matrix::zeros(2, 2);
        s.set(0, 0, f64::NAN);
        assert!(compute_importance(&[s], 3).is_err());
        assert!(compute_importance(&[], 3).is_err());
    }

    #[test]
    fn delta_is_elementwise_difference() {
        let d = compute_delta(&[3.0, 1.0], &[1.0, 2.0]).unwrap();
        assert_eq!(d, vec![2.0, -1.0]);
        assert!(compute_delta(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn n_sigma_worked_example() {
        // Deltas [2, -1, -1, 0] over all four masked positions: mean 0,
        // population std sqrt(3/2) ~ 1.2247, cutoff 1.2247 -> only the 2.
        let delta = [2.0, -1.0, -1.0, 0.0];
        assert_eq!(compute_n_sigma(&delta, &set(&[0, 1, 2, 3])), 1);
    }

    #[test]
    fn n_sigma_equal_deltas_counts_all() {
        // Zero variance: cutoff equals the mean, comparison is >=, so every
        // masked position clears it.
        let delta = [0.7; 6];
        assert_eq!(compute_n_sigma(&delta, &set(&[1, 3, 5])), 3);
        assert_eq!(compute_n_sigma(&delta, &BTreeSet::new()), 0);
    }

    #[test]
    fn budget_worked_examples() {
        // alpha=1.5, mean=1, n_sigma=0 -> ceil(1.5)=2.
        let b = compute_budget(1.5, Some(1.0), 0, 32).unwrap();
        assert_eq!((b.k, b.k_hist), (2, 2));
        // alpha=1.5, mean=5.4, n_sigma=9 -> max(ceil(8.1)=9, 9)=9.
        let b = compute_budget(1.5, Some(5.4), 9, 32).unwrap();
        assert_eq!((b.k, b.k_hist), (9, 9));
        // Clamped to the block.
        let b = compute_budget(2.0, Some(30.0), 0, 32).unwrap();
        assert_eq!((b.k, b.k_hist), (32, 60));
        // First step: no history counts as mean 1.
        let b = compute_budget(3.0, None, 0, 8).unwrap();
        assert_eq!(b.k, 3);
    }

    #[test]
    fn budget_rejects_alpha_at_most_one() {
        assert!(compute_budget(1.0, Some(1.0), 0, 32).is_err());
        assert!(compute_budget(0.5, Some(1.0), 0, 32).is_err());
        assert!(compute_budget(f64::NAN, Some(1.0), 0, 32).is_err());
    }

    #[test]
    fn selection_worked_example() {
        // Block of 8. Decoded: 0,1 committed, 4 decoded but uncommitted.
        // Masked: 2,3,5,6,7 with 5,6,7 never forwarded. Budget 1, top
        // candidate is 6. Expected set {4,5,6}: 6 as the candidate, 5 as its
        // predecessor AND as a placeholder (never processed, left of 6), 4
        // forced by its uncommitted KV. 2 and 3 stay out: already forwarded
        // once, unselected, and nothing to their right drags them in - 4
        // joins after the predecessor pass, so it pulls no neighbour.
        let delta = [0.0, 0.0, -0.5, -0.2, 0.0, 0.1, 0.9, 0.3];
        let masked = set(&[2, 3, 5, 6, 7]);
        let never = set(&[5, 6, 7]);
        let uncached = set(&[4]);
        let budget = Budget {
            k: 1,
            k_hist: 1,
            n_sigma: 0,
            alpha: 1.5,
        };
        let sel = select_tokens(
            &delta,
            &masked,
            &never,
            &uncached,
            &budget,
            &SelectionStrategy::focus_top(),
            None,
        )
        .unwrap();
        assert_eq!(sel.indices, vec![4, 5, 6]);
        let p4 = sel.provenance[&4];
        assert!(p4.uncached_decoded && !p4.topk && !p4.predecessor && !p4.placeholder);
        let p5 = sel.provenance[&5];
        assert!(p5.predecessor && p5.placeholder && !p5.topk);
        let p6 = sel.provenance[&6];
        assert!(p6.topk && !p6.predecessor && !p6.placeholder);
    }

    #[test]
    fn selection_skips_predecessor_with_committed_kv() {
        // Position 1 decoded and committed (not in any input set), candidate
        // is 2: no predecessor pulled in.
        let delta = [0.0, 0.0, 1.0, 0.0];
        let masked = set(&[2, 3]);
        let sel = select_tokens(
            &delta,
            &masked,
            &BTreeSet::new(),
            &BTreeSet::new(),
            &Budget {
                k: 1,
                k_hist: 1,
                n_sigma: 0,
                alpha: 2.0,
            },
            &SelectionStrategy::focus_top(),
            None,
        )
        .unwrap();
        assert_eq!(sel.indices, vec![2]);
    }

    #[test]
    fn selection_min_retention_fallback() {
        // fixed_k = 0, nothing never-processed, nothing uncached: the set
        // would be empty, so the lowest masked index is kept.
        let delta = [0.0; 4];
        let masked = set(&[1, 3]);
        let sel = select_tokens(
            &delta,
            &masked,
            &BTreeSet::new(),
            &BTreeSet::new(),
            &Budget {
                k: 2,
                k_hist: 2,
                n_sigma: 0,
                alpha: 2.0,
            },
            &SelectionStrategy::fixed(StrategyKind::FixedTopK, 0),
            None,
        )
        .unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert!(sel.provenance[&1].min_retention);
    }

    #[test]
    fn selection_complete_block_is_an_error() {
        let delta = [0.0; 2];
        let r = select_tokens(
            &delta,
            &BTreeSet::new(),
            &BTreeSet::new(),
            &BTreeSet::new(),
            &Budget {
                k: 1,
                k_hist: 1,
                n_sigma: 0,
                alpha: 2.0,
            },
            &SelectionStrategy::focus_top(),
            None,
        );
        assert!(matches!(r, Err(Error::BlockComplete)));
    }

    #[test]
    fn selection_ties_break_to_lower_index() {
        let delta = [0.0, 0.5, 0.5, 0.5];
        let masked = set(&[1, 2, 3]);
        let sel = select_tokens(
            &delta,
            &masked,
            &BTreeSet::new(),
            &BTreeSet::new(),
            &Budget {
                k: 1,
                k_hist: 1,
                n_sigma: 0,
                alpha: 2.0,
            },
            &SelectionStrategy::focus_top(),
            None,
        )
        .unwrap();
        // Top candidate is 1 (lowest of the tie); 0 is cached-decoded so no
        // predecessor.
        assert_eq!(sel.indices, vec![1]);
    }

    #[test]
    fn random_strategy_is_seed_deterministic_and_masked_only() {
        let delta = [0.0; 16];
        let masked = set(&[3, 4, 7, 9, 12, 15]);
        let budget = Budget {
            k: 3,
            k_hist: 3,
            n_sigma: 0,
            alpha: 2.0,
        };
        let strat = SelectionStrategy::fixed(StrategyKind::FixedRandomK, 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = select_tokens(&delta, &masked, &set(&[]), &set(&[]), &budget, &strat, Some(&mut r1))
            .unwrap();
        let b = select_tokens(&delta, &masked, &set(&[]), &set(&[]), &budget, &strat, Some(&mut r2))
            .unwrap();
        assert_eq!(a.indices, b.indices);
        for (&i, p) in &a.provenance {
            if p.topk {
                assert!(masked.contains(&i));
            }
        }
    }

    #[test]
    fn compaction_plan_round_trip() {
        let plan = CompactionPlan::new(&[1, 4, 5], 8).unwrap();
        assert_eq!(plan.slot_of(4), Some(1));
        assert_eq!(plan.slot_of(2), None);
        assert_eq!(plan.position_of(2), Some(5));
        assert_eq!(plan.position_of(3), None);
        assert!(CompactionPlan::new(&[4, 1], 8).is_err());
        assert!(CompactionPlan::new(&[9], 8).is_err());
    }

    proptest! {
        #[test]
        fn importance_total_matches_mass(rows in 1usize..6, heads in 1usize..4, seed in 0u64..500) {
            let mut v = seed;
            let mut next = || {
                v = v.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((v >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            };
            let scores: Vec<Matrix> = (0..heads)
                .map(|_| {
                    let data: Vec<f64> = (0..rows * rows).map(|_| 3.0 * next()).collect();
                    Matrix::from_vec(rows, rows, data).unwrap()
                })
                .collect();
            let imp = compute_importance(&scores, 3).unwrap();
            let total: f64 = imp.iter().sum();
            prop_assert!((total - (rows * heads) as f64).abs() < 1e-9);
        }

        #[test]
        fn selection_is_never_empty_and_in_range(
            block in 1usize..24,
            mask_bits in 0u32..(1 << 23),
            k in 0usize..6,
        ) {
            let masked: BTreeSet<usize> =
                (0..block).filter(|i| mask_bits & (1 << i) != 0).collect();
            prop_assume!(!masked.is_empty());
            let delta = vec![0.25; block];
            let never: BTreeSet<usize> = masked.iter().copied().filter(|i| i % 2 == 0).collect();
            let budget = Budget { k: k.max(1).min(block), k_hist: k, n_sigma: 0, alpha: 2.0 };
            let sel = select_tokens(
                &delta,
                &masked,
                &never,
                &BTreeSet::new(),
                &budget,
                &SelectionStrategy::fixed(StrategyKind::FixedTopK, k),
                None,
            ).unwrap();
            prop_assert!(!sel.indices.is_empty());
            prop_assert!(sel.indices.iter().all(|&i| i < block));
            let sorted_unique = sel.indices.windows(2).all(|w| w[0] < w[1]);
            prop_assert!(sorted_unique);
        }

        #[test]
        fn compaction_is_a_bijection(indices in proptest::collection::btree_set(0usize..32, 1..16)) {
            let v: Vec<usize> = indices.iter().copied().collect();
            let plan = CompactionPlan::new(&v, 32).unwrap();
            for (slot, &pos) in v.iter().enumerate() {
                prop_assert_eq!(plan.slot_of(pos), Some(slot));
                prop_assert_eq!(plan.position_of(slot), Some(pos));
            }
        }
    }
}
