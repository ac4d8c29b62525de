//! Continuous-batching decode engine.
//!
//! One engine step advances every running sequence by one denoising step:
//!
//! 1. the active set (every uncommitted block position) goes through the
//!    early layers - a real model forward or a scripted trace line;
//! 2. intra-block attention turns into per-position importance, its layer
//!    shift ranks the masked positions, and the adaptive budget plus the
//!    structural closure rules pick the retained set;
//! 3. the retained set finishes the forward, positions whose confidence
//!    clears the threshold decode (with a best-effort fallback so every step
//!    with masked work decodes at least one token), statistics update, and
//!    the delayed-commit rule decides which positions freeze into the cache.
//!
//! A block whose positions have all decoded still needs one more forward
//! (the flush) so the final decodes are re-forwarded with their real tokens
//! and can commit; completed blocks append to the output whole. Hitting the
//! generation target mid-block ends the sequence with the partial block
//! discarded from the output (its decodes still count in the statistics).
//!
//! Admission is FIFO up to `max_batch`, and finished sequences free their
//! slot the same step. Sequences never interact - batching exists for
//! scheduling realism - so outputs are independent of batch size, and all
//! randomness comes from per-sequence ChaCha streams keyed by a stable hash
//! of the request id, making runs bit-reproducible.

use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheMode, CommitOutcome, DelayedCache, PagedKvStore, DEFAULT_PAGE_SIZE};
use crate::error::{Error, Result};
use crate::focus::{
    compute_budget, compute_delta, compute_importance, compute_n_sigma, select_tokens,
    SelectionStrategy, StrategyKind, DEFAULT_POOL_KERNEL,
};
use crate::metrics::{FlopsLedger, FlopsParams, SequenceReport};
use crate::model::{
    confidences, forward_dense, forward_prefix, forward_suffix, prefill_prompt, DenseOutput,
    ModelWeights, PrefixOutput,
};
use crate::tensor::Matrix;
use crate::trace::OracleTrace;

/// Which masked positions count as placeholders during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceholderMode {
    /// Every masked position is placeholder-eligible.
    AllMasked,
    /// Only positions right of the rightmost position ever retained (the
    /// ones that have never been through the late layers).
    UnprocessedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Budget multiplier on the mean decode rate; must be > 1.
    pub alpha: f64,
    /// Decode confidence threshold in (0, 1].
    pub conf_threshold: f64,
    pub block_size: usize,
    pub max_batch: usize,
    /// Hard cap on generated tokens per sequence.
    pub max_gen_len: usize,
    pub strategy: SelectionStrategy,
    pub cache_mode: CacheMode,
    pub placeholder_mode: PlaceholderMode,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            alpha: 1.5,
            conf_threshold: 0.9,
            block_size: 32,
            max_batch: 8,
            max_gen_len: 128,
            strategy: SelectionStrategy::focus_top(),
            cache_mode: CacheMode::DcPlus,
            placeholder_mode: PlaceholderMode::UnprocessedOnly,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 1.0 {
            return Err(Error::Config(format!("alpha must be > 1, got {}", self.alpha)));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "conf_threshold must be in (0, 1], got {}",
                self.conf_threshold
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("max_batch must be positive".into()));
        }
        if self.max_gen_len == 0 {
            return Err(Error::Config("max_gen_len must be positive".into()));
        }
        self.strategy.validate()
    }
}

/// One generation request.
#[derive(Debug, Clone)]
pub struct GenRequest {
    pub id: String,
    pub prompt: Vec<u32>,
    /// Desired generated length; the effective target is
    /// `min(target_len, max_gen_len)`.
    pub target_len: usize,
    /// Scripted oracle tape; sequences without one run the real model.
    pub trace: Option<OracleTrace>,
}

/// Running decode-rate statistics for one sequence: cumulative token count
/// over step count, carried across blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub token_sum: u64,
    pub total_steps: u64,
}

impl DecodeStats {
    pub fn update(&mut self, n_decoded: usize) {
        self.token_sum += n_decoded as u64;
        self.total_steps += 1;
    }

    /// Mean decoded per step; `None` before the first step.
    pub fn mean(&self) -> Option<f64> {
        if self.total_steps == 0 {
            None
        } else {
            Some(self.token_sum as f64 / self.total_steps as f64)
        }
    }
}

/// FNV-1a hash of a request id: the sequence key for the KV store and the
/// per-sequence RNG stream, stable across runs and platforms.
pub fn stable_id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in id.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pad a retained-set size to its scheduling bucket: next power of two up to
/// 128, then 256, then multiples of 256.
pub fn bucketize(n_retained: usize) -> Result<usize> {
    if n_retained == 0 {
        return Err(Error::InvalidArgument("cannot bucketize an empty set".into()));
    }
    Ok(if n_retained <= 128 {
        n_retained.next_power_of_two()
    } else if n_retained <= 256 {
        256
    } else {
        n_retained.div_ceil(256) * 256
    })
}

/// Greedy confidence decoding over the retained rows.
///
/// `logits` rows align with `retained`. Masked retained positions decode iff
/// their max softmax probability reaches `conf_threshold`; if none does, the
/// single best-confidence masked position decodes anyway so a step with
/// masked work can never stall. Token choice is greedy argmax with the mask
/// token excluded (ties to the lowest id). Returns position -> token.
pub fn decode_and_verify(
    logits: &Matrix,
    retained: &[usize],
    masked_retained: &BTreeSet<usize>,
    conf_threshold: f64,
    mask_token_id: u32,
) -> Result<std::collections::BTreeMap<usize, u32>> {
    if logits.rows() != retained.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} retained positions",
            logits.rows(),
            retained.len()
        )));
    }
    if logits.cols() < 2 {
        return Err(Error::InvalidArgument("vocab must be at least 2".into()));
    }
    for p in masked_retained {
        if !retained.contains(p) {
            return Err(Error::InvalidArgument(format!(
                "masked position {} not in the retained set",
                p
            )));
        }
    }
    let confs = confidences(logits);
    let pick = |row: usize| -> u32 {
        let r = logits.row(row);
        let mut best = usize::MAX;
        for (j, &v) in r.iter().enumerate() {
            if j as u32 == mask_token_id {
                continue;
            }
            if best == usize::MAX || v > r[best] {
                best = j;
            }
        }
        best as u32
    };
    let mut out = std::collections::BTreeMap::new();
    let mut best_fallback: Option<(usize, f64)> = None;
    for (row, &p) in retained.iter().enumerate() {
        if !masked_retained.contains(&p) {
            continue;
        }
        if confs[row] >= conf_threshold {
            out.insert(p, pick(row));
        }
        match best_fallback {
            Some((_, c)) if c >= confs[row] => {}
            _ => best_fallback = Some((row, confs[row])),
        }
    }
    if out.is_empty() {
        if let Some((row, _)) = best_fallback {
            out.insert(retained[row], pick(row));
        }
    }
    Ok(out)
}

/// Cost shape assumed for scripted (model-free) sequences.
pub const SCRIPTED_COST_MODEL: FlopsParams = FlopsParams {
    n_layers: 8,
    hidden: 64,
    d_ff: 256,
};

struct BlockRun {
    tokens: Vec<u32>,
    decoded: Vec<bool>,
    /// Highest block position ever retained; `None` maps to the "nothing
    /// processed yet" state.
    rightmost_processed: Option<usize>,
    delayed: DelayedCache,
    steps_in_block: u64,
}

impl BlockRun {
    fn new(block_size: usize, mask_token: u32) -> Self {
        BlockRun {
            tokens: vec![mask_token; block_size],
            decoded: vec![false; block_size],
            rightmost_processed: None,
            delayed: DelayedCache::new(block_size),
            steps_in_block: 0,
        }
    }
}

struct SeqRun {
    id: String,
    seq: u64,
    prompt_len: usize,
    gen_target: usize,
    trace: Option<OracleTrace>,
    generated: Vec<u32>,
    block: Option<BlockRun>,
    rng: ChaCha8Rng,
    stats: DecodeStats,
    local_step: u64,
    blocks_completed: u64,
    /// Absolute committed length: prompt plus completed blocks.
    committed_context: usize,
    finished: bool,
}

/// The batching engine. Construct, [`Engine::submit`] requests, then either
/// [`Engine::run_to_completion`] or single-step with [`Engine::step`].
pub struct Engine {
    cfg: EngineConfig,
    mask_token: u32,
    model: Option<ModelWeights>,
    store: Option<PagedKvStore>,
    queue: VecDeque<GenRequest>,
    running: Vec<SeqRun>,
    finished: Vec<SequenceReport>,
    ledger: FlopsLedger,
    global_step: u64,
    peak_pages: usize,
}

impl Engine {
    /// An engine backed by a real model, or model-free (`None`) for runs
    /// where every request carries a scripted trace.
    pub fn new(cfg: EngineConfig, model: Option<ModelWeights>) -> Result<Self> {
        cfg.validate()?;
        let (mask_token, store, params) = match &model {
            Some(w) => {
                w.cfg.validate()?;
                if w.cfg.block_size != cfg.block_size {
                    return Err(Error::Config(format!(
                        "model block size {} != engine block size {}",
                        w.cfg.block_size, cfg.block_size
                    )));
                }
                (
                    w.cfg.mask_token_id,
                    Some(PagedKvStore::new(w.cfg.n_layers, w.cfg.hidden, DEFAULT_PAGE_SIZE)?),
                    FlopsParams {
                        n_layers: w.cfg.n_layers as u64,
                        hidden: w.cfg.hidden as u64,
                        d_ff: w.cfg.d_ff as u64,
                    },
                )
            }
            None => (0, None, SCRIPTED_COST_MODEL),
        };
        Ok(Engine {
            cfg,
            mask_token,
            model,
            store,
            queue: VecDeque::new(),
            running: Vec::new(),
            finished: Vec::new(),
            ledger: FlopsLedger::new(params),
            global_step: 0,
            peak_pages: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn submit(&mut self, req: GenRequest) -> Result<()> {
        if req.id.is_empty() {
            return Err(Error::InvalidArgument("request id must be non-empty".into()));
        }
        if req.target_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "request {}: target_len must be positive",
                req.id
            )));
        }
        let dup = self.queue.iter().any(|r| r.id == req.id)
            || self.running.iter().any(|r| r.id == req.id)
            || self.finished.iter().any(|r| r.id == req.id);
        if dup {
            return Err(Error::InvalidArgument(format!(
                "duplicate request id {}",
                req.id
            )));
        }
        match (&req.trace, &self.model) {
            (Some(trace), _) => {
                if trace.block_len() != self.cfg.block_size {
                    return Err(Error::Config(format!(
                        "request {}: trace block {} != engine block {}",
                        req.id,
                        trace.block_len(),
                        self.cfg.block_size
                    )));
                }
            }
            (None, Some(w)) => {
                if let Some(&t) = req.prompt.iter().find(|&&t| t as usize >= w.cfg.vocab) {
                    return Err(Error::InvalidArgument(format!(
                        "request {}: prompt token {} outside vocab {}",
                        req.id, t, w.cfg.vocab
                    )));
                }
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "request {} has no trace and the engine has no model",
                    req.id
                )));
            }
        }
        self.queue.push_back(req);
        Ok(())
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.running.is_empty()
    }

    pub fn finished(&self) -> &[SequenceReport] {
        &self.finished
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    pub fn peak_pages(&self) -> usize {
        self.peak_pages
    }

    /// FIFO admission into free batch slots.
    fn admit(&mut self) -> Result<()> {
        while self.running.len() < self.cfg.max_batch {
            let Some(req) = self.queue.pop_front() else {
                break;
            };
            let seq = stable_id_hash(&req.id);
            let base_seed = self.cfg.strategy.rng_seed.unwrap_or(self.cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(seq);
            if req.trace.is_none() {
                let store = self.store.as_mut().expect("validated at submit");
                store.register_seq(seq)?;
                if !req.prompt.is_empty() {
                    let w = self.model.as_ref().expect("validated at submit");
                    prefill_prompt(store, seq, w, &req.prompt)?;
                    self.ledger.record_prefill(req.prompt.len(), 0);
                }
            }
            self.running.push(SeqRun {
                prompt_len: req.prompt.len(),
                seq,
                gen_target: req.target_len.min(self.cfg.max_gen_len),
                trace: req.trace,
                generated: Vec::new(),
                block: None,
                rng,
                stats: DecodeStats::default(),
                local_step: 0,
                blocks_completed: 0,
                committed_context: req.prompt.len(),
                finished: false,
                id: req.id,
            });
        }
        Ok(())
    }

    /// One engine iteration: admit, advance every running sequence one step,
    /// retire the ones that finished. Returns how many sequences stepped.
    pub fn step(&mut self) -> Result<usize> {
        self.admit()?;
        let stepped = self.running.len();
        for i in 0..self.running.len() {
            step_sequence(
                &self.cfg,
                self.mask_token,
                self.model.as_ref(),
                &mut self.store,
                &mut self.ledger,
                &mut self.global_step,
                &mut self.running[i],
            )?;
        }
        if let Some(store) = &self.store {
            self.peak_pages = self.peak_pages.max(store.pages_in_use());
        }
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].finished {
                let run = self.running.remove(i);
                if run.trace.is_none() {
                    if let Some(store) = self.store.as_mut() {
                        store.release_seq(run.seq);
                    }
                }
                self.finished.push(SequenceReport {
                    id: run.id,
                    prompt_len: run.prompt_len,
                    generated: run.generated,
                    steps: run.stats.total_steps,
                    decoded: run.stats.token_sum,
                    blocks_completed: run.blocks_completed,
                    committed_len: run.committed_context,
                });
            } else {
                i += 1;
            }
        }
        Ok(stepped)
    }

    pub fn run_to_completion(&mut self) -> Result<()> {
        while !self.is_idle() {
            self.step()?;
        }
        Ok(())
    }
}

enum Forwarded {
    Dense(DenseOutput),
    Split(PrefixOutput),
    Scripted,
}

fn step_sequence(
    cfg: &EngineConfig,
    mask_token: u32,
    model: Option<&ModelWeights>,
    store: &mut Option<PagedKvStore>,
    ledger: &mut FlopsLedger,
    global_step: &mut u64,
    run: &mut SeqRun,
) -> Result<()> {
    let block_size = cfg.block_size;
    if run.block.is_none() {
        if run.trace.is_none() {
            store
                .as_mut()
                .expect("model sequences have a store")
                .begin_block(run.seq, block_size)?;
        }
        run.block = Some(BlockRun::new(block_size, mask_token));
    }
    let base = run.committed_context;
    if run.trace.is_none() {
        let got = store.as_ref().unwrap().committed_len(run.seq)?;
        if got != base {
            return Err(Error::Invariant(format!(
                "sequence {}: cache committed length {} != tracked {}",
                run.id, got, base
            )));
        }
    }

    let block = run.block.as_mut().expect("just ensured");
    if block.steps_in_block > 2 * block_size as u64 + 2 {
        return Err(Error::Invariant(format!(
            "sequence {}: block stuck after {} steps",
            run.id, block.steps_in_block
        )));
    }
    let active = block.delayed.uncommitted();
    if active.is_empty() {
        return Err(Error::Invariant(format!(
            "sequence {}: fully committed block was not advanced",
            run.id
        )));
    }
    let decoded_before = block.decoded.clone();
    let masked: BTreeSet<usize> = active.iter().copied().filter(|&p| !block.decoded[p]).collect();
    let uncached_decoded: BTreeSet<usize> =
        active.iter().copied().filter(|&p| block.decoded[p]).collect();
    let tokens_active: Vec<u32> = active.iter().map(|&p| block.tokens[p]).collect();
    let committed_rows = base + (block_size - active.len());
    let tape_step = block.steps_in_block as usize;

    // Early layers: scores for every active position.
    let (imp0, imp1, fwd) = match (&run.trace, model) {
        (Some(trace), _) => {
            let s0 = trace.scores_at(tape_step, false, &active)?;
            let s1 = trace.scores_at(tape_step, true, &active)?;
            (
                compute_importance(&s0, DEFAULT_POOL_KERNEL)?,
                compute_importance(&s1, DEFAULT_POOL_KERNEL)?,
                Forwarded::Scripted,
            )
        }
        (None, Some(w)) => {
            let store = store.as_mut().expect("model sequences have a store");
            if cfg.strategy.kind == StrategyKind::None {
                let d = forward_dense(store, run.seq, w, &tokens_active, &active, base)?;
                (
                    compute_importance(&d.scores_l0, DEFAULT_POOL_KERNEL)?,
                    compute_importance(&d.scores_l1, DEFAULT_POOL_KERNEL)?,
                    Forwarded::Dense(d),
                )
            } else {
                let p = forward_prefix(store, run.seq, w, &tokens_active, &active, base)?;
                (
                    compute_importance(&p.scores_l0, DEFAULT_POOL_KERNEL)?,
                    compute_importance(&p.scores_l1, DEFAULT_POOL_KERNEL)?,
                    Forwarded::Split(p),
                )
            }
        }
        (None, None) => {
            return Err(Error::Invariant(format!(
                "sequence {} has neither trace nor model",
                run.id
            )))
        }
    };

    // Importance shift, expanded to block coordinates (committed slots 0).
    let delta_active = compute_delta(&imp1, &imp0)?;
    let mut delta = vec![0.0; block_size];
    for (slot, &p) in active.iter().enumerate() {
        delta[p] = delta_active[slot];
    }
    let n_sigma = compute_n_sigma(&delta, &masked);
    let budget = compute_budget(cfg.alpha, run.stats.mean(), n_sigma, block_size)?;

    let never_processed: BTreeSet<usize> = match cfg.placeholder_mode {
        PlaceholderMode::AllMasked => masked.clone(),
        PlaceholderMode::UnprocessedOnly => {
            let bound = block.rightmost_processed;
            masked
                .iter()
                .copied()
                .filter(|&p| bound.is_none_or(|r| p > r))
                .collect()
        }
    };

    let sel = select_tokens(
        &delta,
        &masked,
        &never_processed,
        &uncached_decoded,
        &budget,
        &cfg.strategy,
        Some(&mut run.rng),
    )?;
    for &p in &sel.indices {
        if block.delayed.is_committed(p) {
            return Err(Error::Invariant(format!(
                "sequence {}: committed position {} selected for forwarding",
                run.id, p
            )));
        }
    }

    // Late layers for the retained set only.
    let logits = match &fwd {
        Forwarded::Scripted => run.trace.as_ref().unwrap().logits_at(tape_step, &sel.indices)?,
        Forwarded::Dense(d) => {
            let slots: Vec<usize> = sel
                .indices
                .iter()
                .map(|p| {
                    active.binary_search(p).map_err(|_| {
                        Error::Invariant(format!("retained position {} not active", p))
                    })
                })
                .collect::<Result<_>>()?;
            d.logits.gather_rows(&slots)?
        }
        Forwarded::Split(prefix) => forward_suffix(
            store.as_mut().expect("model sequences have a store"),
            run.seq,
            model.expect("split path implies a model"),
            prefix,
            &sel.indices,
            base,
        )?,
    };

    block.delayed.mark_forwarded(&sel.indices, &decoded_before);

    let masked_retained: BTreeSet<usize> =
        sel.indices.iter().copied().filter(|p| masked.contains(p)).collect();
    let decoded_now = decode_and_verify(
        &logits,
        &sel.indices,
        &masked_retained,
        cfg.conf_threshold,
        mask_token,
    )?;
    for (&p, &tok) in &decoded_now {
        block.tokens[p] = tok;
        block.decoded[p] = true;
    }
    let n_decoded = decoded_now.len();
    run.stats.update(n_decoded);

    block.rightmost_processed = block
        .rightmost_processed
        .max(sel.indices.iter().copied().max());

    // Commit phase.
    let block_complete = block.decoded.iter().all(|d| *d);
    let outcome = match cfg.cache_mode {
        CacheMode::None => {
            if block.delayed.ready_for_bulk_commit(&block.decoded) {
                block.delayed.plain_delayed_commit(&block.decoded, true)?
            } else {
                CommitOutcome {
                    committed: Vec::new(),
                    block_reset: false,
                }
            }
        }
        CacheMode::Dc => block.delayed.plain_delayed_commit(&block.decoded, block_complete)?,
        CacheMode::DcPlus => block.delayed.commit_stable(&block.decoded, block_complete)?,
    };
    for p in &outcome.committed {
        if !sel.indices.contains(p) {
            return Err(Error::Invariant(format!(
                "sequence {}: position {} committed without being forwarded this step",
                run.id, p
            )));
        }
    }
    if run.trace.is_none() && !outcome.committed.is_empty() {
        store
            .as_mut()
            .unwrap()
            .mark_block_committed(run.seq, &outcome.committed)?;
    }

    block.steps_in_block += 1;
    run.local_step += 1;
    ledger.record_step(
        *global_step,
        run.seq,
        run.local_step - 1,
        active.len(),
        sel.indices.len(),
        n_decoded,
        budget.k,
        n_sigma,
        outcome.committed.len(),
        bucketize(sel.indices.len())?,
        committed_rows,
    )?;
    *global_step += 1;

    if outcome.block_reset {
        if run.trace.is_none() {
            store.as_mut().unwrap().advance_block(run.seq)?;
        }
        let done = run.block.take().expect("block present");
        run.generated.extend_from_slice(&done.tokens);
        run.committed_context += block_size;
        run.blocks_completed += 1;
        if run.generated.len() >= run.gen_target {
            run.finished = true;
        }
    } else if !block_complete {
        let decoded_in_block = block.decoded.iter().filter(|d| **d).count();
        if run.generated.len() + decoded_in_block >= run.gen_target {
            // Target hit mid-block: the partial block never reaches the
            // output, though its decodes already counted in the statistics.
            run.block = None;
            run.finished = true;
        }
    }
    Ok(())
}
