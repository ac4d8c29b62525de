//! Paged KV storage and the delayed commit state machine.
//!
//! A block position's KV states are rewritten every time the position is
//! forwarded, so committing it to the long-lived cache too early freezes a
//! state that was computed while the position (or its neighbourhood) was
//! still masked. Commitment is therefore delayed: a position becomes
//! immutable only once it has been decoded and then forwarded at least once
//! more (so its cached states reflect the real token), and - under the
//! stricter neighbour-aware rule - once the position to its right has decoded
//! too, since that right neighbour is the last context change that can still
//! perturb the state. Everything still uncommitted is re-forwarded and
//! rewritten on every step it is retained.
//!
//! Storage is paged: each sequence holds one page table per layer mapping
//! logical slots (absolute positions) to fixed-size pages from a shared pool,
//! which is what makes the scatter writes of a partially retained block and
//! the reuse of pages across sequences explicit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default rows per KV page.
pub const DEFAULT_PAGE_SIZE: usize = 16;

/// How decoded positions graduate into the immutable cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Never commit mid-block; the whole block is refreshed every step and
    /// committed in bulk when it completes.
    None,
    /// Delayed commit: decoded and forwarded once after decoding.
    Dc,
    /// Delayed commit plus the neighbour rule: additionally the position to
    /// the right must have decoded (block completion stands in for the
    /// missing right neighbour of the last position).
    DcPlus,
}

/// Positions newly committed by a commit call, and whether that call
/// completed the block (triggering a state reset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    pub committed: Vec<usize>,
    pub block_reset: bool,
}

/// Per-block delayed-commit state machine.
///
/// Tracks, for every block position, whether it is still uncached (mutable)
/// and whether it has been forwarded since it decoded. The scheduler reports
/// forwards via [`DelayedCache::mark_forwarded`] and then asks one of the
/// commit rules which positions freeze this step.
#[derive(Debug, Clone)]
pub struct DelayedCache {
    uncached: Vec<bool>,
    forwarded_after_decode: Vec<bool>,
    warmup: bool,
}

impl DelayedCache {
    pub fn new(block_len: usize) -> Self {
        DelayedCache {
            uncached: vec![true; block_len],
            forwarded_after_decode: vec![false; block_len],
            warmup: true,
        }
    }

    pub fn len(&self) -> usize {
        self.uncached.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uncached.is_empty()
    }

    /// True until the first forward of the block has happened.
    pub fn warmup(&self) -> bool {
        self.warmup
    }

    pub fn is_committed(&self, pos: usize) -> bool {
        !self.uncached[pos]
    }

    pub fn uncached_positions(&self) -> &[bool] {
        &self.uncached
    }

    /// Sorted indices of positions still uncommitted.
    pub fn uncommitted(&self) -> Vec<usize> {
        (0..self.uncached.len()).filter(|&i| self.uncached[i]).collect()
    }

    pub fn all_committed(&self) -> bool {
        self.uncached.iter().all(|u| !u)
    }

    /// Record that `retained` positions were just forwarded. Positions that
    /// were already decoded *before* this step's forward ran with their real
    /// token, so they become commit-eligible; positions decoded during the
    /// same step were still forwarded as masks and stay ineligible.
    pub fn mark_forwarded(&mut self, retained: &[usize], decoded_before: &[bool]) {
        self.warmup = false;
        for &p in retained {
            if self.uncached[p] && decoded_before[p] {
                self.forwarded_after_decode[p] = true;
            }
        }
    }

    /// Neighbour-aware commit rule: position i commits iff it is uncached,
    /// decoded, forwarded since decoding, and its right neighbour has decoded
    /// (`block_complete` substitutes for the missing neighbour of the last
    /// position). Resets the state if the whole block committed.
    pub fn commit_stable(&mut self, decoded: &[bool], block_complete: bool) -> Result<CommitOutcome> {
        self.commit_with_rule(decoded, block_complete, true)
    }

    /// Plain delayed commit: decoded and forwarded once after decoding; no
    /// neighbour condition.
    pub fn plain_delayed_commit(
        &mut self,
        decoded: &[bool],
        block_complete: bool,
    ) -> Result<CommitOutcome> {
        self.commit_with_rule(decoded, block_complete, false)
    }

    /// True when a bulk commit would freeze every position at once: all
    /// decoded and all forwarded with their real tokens. Used by
    /// [`CacheMode::None`], which refuses partial commits.
    pub fn ready_for_bulk_commit(&self, decoded: &[bool]) -> bool {
        decoded.iter().all(|d| *d)
            && self
                .uncached
                .iter()
                .zip(&self.forwarded_after_decode)
                .all(|(u, f)| !u || *f)
    }

    fn commit_with_rule(
        &mut self,
        decoded: &[bool],
        block_complete: bool,
        neighbour_rule: bool,
    ) -> Result<CommitOutcome> {
        let n = self.uncached.len();
        if decoded.len() != n {
            return Err(Error::Shape(format!(
                "commit got {} decode flags for a block of {}",
                decoded.len(),
                n
            )));
        }
        // Committed positions must stay decoded; anything else means the
        // caller's state went backwards.
        for (i, (&uncached, &dec)) in self.uncached.iter().zip(decoded).enumerate() {
            if !uncached && !dec {
                return Err(Error::Invariant(format!(
                    "committed position {} reported as undecoded",
                    i
                )));
            }
        }
        let mut newly = Vec::new();
        for i in 0..n {
            if !(self.uncached[i] && decoded[i] && self.forwarded_after_decode[i]) {
                continue;
            }
            let neighbour_ok = if !neighbour_rule {
                true
            } else if i + 1 < n {
                decoded[i + 1]
            } else {
                block_complete
            };
            if neighbour_ok {
                newly.push(i);
            }
        }
        for &i in &newly {
            self.uncached[i] = false;
        }
        let block_reset = !self.uncached.is_empty() && self.all_committed();
        if block_reset {
            self.reset();
        }
        Ok(CommitOutcome {
            committed: newly,
            block_reset,
        })
    }

    /// Block reset: everything uncached again, forwarded flags cleared,
    /// warmup re-armed.
    pub fn reset(&mut self) {
        for u in self.uncached.iter_mut() {
            *u = true;
        }
        for f in self.forwarded_after_decode.iter_mut() {
            *f = false;
        }
        self.warmup = true;
    }
}

/// One cached row: rotated key and value slices for an absolute position.
#[derive(Debug, Clone, Copy)]
pub struct KvRow<'a> {
    pub position: usize,
    pub k: &'a [f64],
    pub v: &'a [f64],
    /// Committed rows are immutable context; uncommitted rows are referable
    /// but may be rewritten on a later step.
    pub committed: bool,
}

struct Page {
    k: Vec<f64>,
    v: Vec<f64>,
}

struct SeqCache {
    committed_len: usize,
    block_len: usize,
    block_committed: Vec<bool>,
    /// Per layer, per block position: has this slot been written during the
    /// current block?
    filled: Vec<Vec<bool>>,
    /// Per layer: logical page index -> pool page id.
    tables: Vec<Vec<usize>>,
}

/// Paged KV pool shared by all sequences in a run.
pub struct PagedKvStore {
    page_size: usize,
    hidden: usize,
    n_layers: usize,
    pages: Vec<Page>,
    free: Vec<usize>,
    seqs: BTreeMap<u64, SeqCache>,
}

impl PagedKvStore {
    pub fn new(n_layers: usize, hidden: usize, page_size: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(Error::InvalidArgument("page size must be positive".into()));
        }
        Ok(PagedKvStore {
            page_size,
            hidden,
            n_layers,
            pages: Vec::new(),
            free: Vec::new(),
            seqs: BTreeMap::new(),
        })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Pages currently allocated to live sequences.
    pub fn pages_in_use(&self) -> usize {
        self.pages.len() - self.free.len()
    }

    pub fn register_seq(&mut self, seq: u64) -> Result<()> {
        if self.seqs.contains_key(&seq) {
            return Err(Error::InvalidArgument(format!(
                "sequence {} already registered",
                seq
            )));
        }
        self.seqs.insert(
            seq,
            SeqCache {
                committed_len: 0,
                block_len: 0,
                block_committed: Vec::new(),
                filled: vec![Vec::new(); self.n_layers],
                tables: vec![Vec::new(); self.n_layers],
            },
        );
        Ok(())
    }

    /// Drop a sequence and return its pages to the pool.
    pub fn release_seq(&mut self, seq: u64) {
        if let Some(state) = self.seqs.remove(&seq) {
            for table in state.tables {
                self.free.extend(table);
            }
        }
    }

    pub fn committed_len(&self, seq: u64) -> Result<usize> {
        Ok(self.seq(seq)?.committed_len)
    }

    pub fn block_len(&self, seq: u64) -> Result<usize> {
        Ok(self.seq(seq)?.block_len)
    }

    /// Open a block of `block_len` fresh slots after the committed prefix.
    pub fn begin_block(&mut self, seq: u64, block_len: usize) -> Result<()> {
        let n_layers = self.n_layers;
        let state = self.seq_mut(seq)?;
        if state.block_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "sequence {} already has an open block",
                seq
            )));
        }
        if block_len == 0 {
            return Err(Error::InvalidArgument("block length must be positive".into()));
        }
        state.block_len = block_len;
        state.block_committed = vec![false; block_len];
        for l in 0..n_layers {
            state.filled[l] = vec![false; block_len];
        }
        Ok(())
    }

    /// Scatter-write KV rows for the given block positions at one layer.
    /// Row i of `k`/`v` lands at block position `positions[i]`. Writing to a
    /// committed position is an error.
    pub fn fill_block_kv(
        &mut self,
        seq: u64,
        layer: usize,
        positions: &[usize],
        k: &Matrix,
        v: &Matrix,
    ) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} layers)",
                layer, self.n_layers
            )));
        }
        if k.rows() != positions.len()
            || v.rows() != positions.len()
            || k.cols() != self.hidden
            || v.cols() != self.hidden
        {
            return Err(Error::Shape(format!(
                "kv fill: {} positions, k {}x{}, v {}x{}, hidden {}",
                positions.len(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols(),
                self.hidden
            )));
        }
        let state = self.seqs.get(&seq).ok_or_else(|| unknown_seq(seq))?;
        let base = state.committed_len;
        let block_len = state.block_len;
        for &p in positions {
            if p >= block_len {
                return Err(Error::Shape(format!(
                    "block position {} out of range (block of {})",
                    p, block_len
                )));
            }
            if state.block_committed[p] {
                return Err(Error::CommittedWrite { layer, position: p });
            }
        }
        for (i, &p) in positions.iter().enumerate() {
            let slot = base + p;
            let (page, row) = self.ensure_slot(seq, layer, slot)?;
            let off = row * self.hidden;
            self.pages[page].k[off..off + self.hidden].copy_from_slice(k.row(i));
            self.pages[page].v[off..off + self.hidden].copy_from_slice(v.row(i));
        }
        let state = self.seq_mut(seq)?;
        for &p in positions {
            state.filled[layer][p] = true;
        }
        Ok(())
    }

    /// Freeze block positions (typically the newly committed set from a
    /// [`DelayedCache`] commit). Every frozen position must have been filled
    /// at every layer, otherwise a later reader would see a hole.
    pub fn mark_block_committed(&mut self, seq: u64, positions: &[usize]) -> Result<()> {
        let state = self.seqs.get_mut(&seq).ok_or_else(|| unknown_seq(seq))?;
        for &p in positions {
            if p >= state.block_len {
                return Err(Error::Shape(format!(
                    "commit position {} out of range (block of {})",
                    p, state.block_len
                )));
            }
            for l in 0..state.filled.len() {
                if !state.filled[l][p] {
                    return Err(Error::Invariant(format!(
                        "committing block position {} with no KV at layer {}",
                        p, l
                    )));
                }
            }
            state.block_committed[p] = true;
        }
        Ok(())
    }

    /// Close a fully committed block: its slots join the committed prefix.
    pub fn advance_block(&mut self, seq: u64) -> Result<()> {
        let state = self.seqs.get_mut(&seq).ok_or_else(|| unknown_seq(seq))?;
        if state.block_len == 0 {
            return Err(Error::InvalidArgument("no open block to advance".into()));
        }
        if !state.block_committed.iter().all(|c| *c) {
            return Err(Error::Invariant(
                "advancing a block with uncommitted positions".into(),
            ));
        }
        state.committed_len += state.block_len;
        state.block_len = 0;
        state.block_committed.clear();
        for f in state.filled.iter_mut() {
            f.clear();
        }
        Ok(())
    }

    /// All referable rows for one layer, sorted by absolute position:
    /// the committed prefix, then every filled block slot with its commit
    /// flag. Uncommitted rows are readable but may be stale for layers where
    /// the position was not recently forwarded; the model decides which of
    /// them to attend to.
    pub fn layer_rows(&self, seq: u64, layer: usize) -> Result<Vec<KvRow<'_>>> {
        if layer >= self.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} layers)",
                layer, self.n_layers
            )));
        }
        let state = self.seq(seq)?;
        let mut rows = Vec::with_capacity(state.committed_len + state.block_len);
        for slot in 0..state.committed_len {
            rows.push(self.row_at(state, layer, slot, true)?);
        }
        for p in 0..state.block_len {
            if state.filled[layer][p] {
                rows.push(self.row_at(
                    state,
                    layer,
                    state.committed_len + p,
                    state.block_committed[p],
                )?);
            }
        }
        Ok(rows)
    }

    fn row_at<'a>(
        &'a self,
        state: &SeqCache,
        layer: usize,
        slot: usize,
        committed: bool,
    ) -> Result<KvRow<'a>> {
        let table = &state.tables[layer];
        let page_idx = slot / self.page_size;
        let row = slot % self.page_size;
        let page = *table.get(page_idx).ok_or_else(|| {
            Error::Invariant(format!("slot {} has no page at layer {}", slot, layer))
        })?;
        let off = row * self.hidden;
        Ok(KvRow {
            position: slot,
            k: &self.pages[page].k[off..off + self.hidden],
            v: &self.pages[page].v[off..off + self.hidden],
            committed,
        })
    }

    fn ensure_slot(&mut self, seq: u64, layer: usize, slot: usize) -> Result<(usize, usize)> {
        let page_idx = slot / self.page_size;
        let row = slot % self.page_size;
        let need_pages = page_idx + 1;
        let have = self.seq(seq)?.tables[layer].len();
        for _ in have..need_pages {
            let page = self.alloc_page();
            self.seq_mut(seq)?.tables[layer].push(page);
        }
        let page = self.seq(seq)?.tables[layer][page_idx];
        Ok((page, row))
    }

    fn alloc_page(&mut self) -> usize {
        if let Some(id) = self.free.pop() {
            // Reused pages are zeroed so stale tenants can never leak through.
            self.pages[id].k.iter_mut().for_each(|x| *x = 0.0);
            self.pages[id].v.iter_mut().for_each(|x| *x = 0.0);
            id
        } else {
            self.pages.push(Page {
                k: vec![0.0; self.page_size * self.hidden],
                v: vec![0.0; self.page_size * self.hidden],
            });
            self.pages.len() - 1
        }
    }

    fn seq(&self, seq: u64) -> Result<&SeqCache> {
        self.seqs.get(&seq).ok_or_else(|| unknown_seq(seq))
    }

    fn seq_mut(&mut self, seq: u64) -> Result<&mut SeqCache> {
        self.seqs.get_mut(&seq).ok_or_else(|| unknown_seq(seq))
    }
}

fn unknown_seq(seq: u64) -> Error {
    Error::InvalidArgument(format!("unknown sequence {}", seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn decoded(n: usize, set: &[usize]) -> Vec<bool> {
        let mut d = vec![false; n];
        for &i in set {
            d[i] = true;
        }
        d
    }

    /// Hand trace, B=4, decode order {0}, {1}, {2,3}, then the completion
    /// flush. Forward f runs before decode at every step; every uncommitted
    /// position is forwarded (full retention).
    #[test]
    fn neighbour_commit_hand_trace() {
        let mut dc = DelayedCache::new(4);
        let all = [0usize, 1, 2, 3];

        // Step 0: forward all (nothing decoded yet), decode {0}.
        dc.mark_forwarded(&all, &decoded(4, &[]));
        let out = dc.commit_stable(&decoded(4, &[0]), false).unwrap();
        assert!(out.committed.is_empty()); // 0 awaits its post-decode forward

        // Step 1: forward again (0 now carries its real token), decode {1}.
        dc.mark_forwarded(&all, &decoded(4, &[0]));
        let out = dc.commit_stable(&decoded(4, &[0, 1]), false).unwrap();
        assert_eq!(out.committed, vec![0]); // forwarded once + neighbour 1 decoded

        // Step 2: decode {2,3}; block is now fully decoded but 2 and 3 were
        // forwarded as masks this step, so only 1 can freeze.
        dc.mark_forwarded(&[1, 2, 3], &decoded(4, &[0, 1]));
        let out = dc.commit_stable(&decoded(4, &[0, 1, 2, 3]), true).unwrap();
        assert_eq!(out.committed, vec![1]);
        assert!(!out.block_reset);

        // Step 3 (flush): 2 and 3 re-forwarded with real tokens -> commit,
        // full block -> reset.
        dc.mark_forwarded(&[2, 3], &decoded(4, &[0, 1, 2, 3]));
        let out = dc.commit_stable(&decoded(4, &[0, 1, 2, 3]), true).unwrap();
        assert_eq!(out.committed, vec![2, 3]);
        assert!(out.block_reset);
        assert!(dc.uncommitted().len() == 4 && dc.warmup());
    }

    #[test]
    fn plain_commit_ignores_neighbour() {
        let mut dc = DelayedCache::new(3);
        dc.mark_forwarded(&[0, 1, 2], &decoded(3, &[]));
        assert!(dc
            .plain_delayed_commit(&decoded(3, &[0]), false)
            .unwrap()
            .committed
            .is_empty());
        // One more forward: 0 commits even though 1 is still masked.
        dc.mark_forwarded(&[0, 1, 2], &decoded(3, &[0]));
        let out = dc.plain_delayed_commit(&decoded(3, &[0]), false).unwrap();
        assert_eq!(out.committed, vec![0]);
    }

    #[test]
    fn simultaneous_decode_then_single_flush_commits_all() {
        let mut dc = DelayedCache::new(4);
        dc.mark_forwarded(&[0, 1, 2, 3], &decoded(4, &[]));
        let out = dc.commit_stable(&decoded(4, &[0, 1, 2, 3]), true).unwrap();
        assert!(out.committed.is_empty()); // all decoded this very step
        dc.mark_forwarded(&[0, 1, 2, 3], &decoded(4, &[0, 1, 2, 3]));
        let out = dc.commit_stable(&decoded(4, &[0, 1, 2, 3]), true).unwrap();
        assert_eq!(out.committed, vec![0, 1, 2, 3]);
        assert!(out.block_reset);
    }

    #[test]
    fn last_position_needs_block_complete() {
        let mut dc = DelayedCache::new(2);
        dc.mark_forwarded(&[0, 1], &decoded(2, &[]));
        dc.commit_stable(&decoded(2, &[1]), false).unwrap();
        dc.mark_forwarded(&[0, 1], &decoded(2, &[1]));
        // 1 is decoded and forwarded, but the block is not complete.
        let out = dc.commit_stable(&decoded(2, &[1]), false).unwrap();
        assert!(out.committed.is_empty());
    }

    #[test]
    fn neighbour_commits_subset_of_plain() {
        // Same event history through both rules: DC+ never commits a
        // position the plain rule would not.
        let events: [(&[usize], &[usize]); 4] =
            [(&[0, 1, 2, 3], &[1]), (&[0, 1, 2, 3], &[3]), (&[1, 3], &[0]), (&[0, 2], &[2])];
        let mut plus = DelayedCache::new(4);
        let mut plain = DelayedCache::new(4);
        let mut dec: Vec<bool> = vec![false; 4];
        let mut committed_plus = vec![];
        let mut committed_plain = vec![];
        for (fwd, newly) in events {
            let before = dec.clone();
            plus.mark_forwarded(fwd, &before);
            plain.mark_forwarded(fwd, &before);
            for &i in newly {
                dec[i] = true;
            }
            let complete = dec.iter().all(|d| *d);
            committed_plus.extend(plus.commit_stable(&dec, complete).unwrap().committed);
            committed_plain.extend(plain.plain_delayed_commit(&dec, complete).unwrap().committed);
            for c in &committed_plus {
                assert!(committed_plain.contains(c));
            }
        }
    }

    #[test]
    fn committed_regression_is_an_invariant_error() {
        let mut dc = DelayedCache::new(2);
        dc.mark_forwarded(&[0, 1], &decoded(2, &[]));
        dc.mark_forwarded(&[0, 1], &decoded(2, &[0]));
        dc.commit_stable(&decoded(2, &[0, 1]), true).unwrap();
        // 0 committed; reporting it undecoded now is a caller bug.
        let r = dc.commit_stable(&decoded(2, &[1]), false);
        assert!(matches!(r, Err(Error::Invariant(_))));
    }

    fn kv(n: usize, h: usize, base: f64) -> (Matrix, Matrix) {
        let k: Vec<f64> = (0..n * h).map(|i| base + i as f64).collect();
        let v: Vec<f64> = (0..n * h).map(|i| -(base + i as f64)).collect();
        (
            Matrix::from_vec(n, h, k).unwrap(),
            Matrix::from_vec(n, h, v).unwrap(),
        )
    }

    #[test]
    fn store_scatter_fill_and_view() {
        let mut store = PagedKvStore::new(2, 4, DEFAULT_PAGE_SIZE).unwrap();
        store.register_seq(1).unwrap();
        store.begin_block(1, 8).unwrap();
        let (k, v) = kv(3, 4, 10.0);
        store.fill_block_kv(1, 0, &[1, 4, 6], &k, &v).unwrap();
        let rows = store.layer_rows(1, 0).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(
            rows.iter().map(|r| r.position).collect::<Vec<_>>(),
            vec![1, 4, 6]
        );
        assert_eq!(rows[1].k, k.row(1));
        assert_eq!(rows[1].v, v.row(1));
        assert!(rows.iter().all(|r| !r.committed));
        // Other layer untouched.
        assert!(store.layer_rows(1, 1).unwrap().is_empty());
    }

    #[test]
    fn store_rejects_committed_write() {
        let mut store = PagedKvStore::new(1, 2, 4).unwrap();
        store.register_seq(9).unwrap();
        store.begin_block(9, 4).unwrap();
        let (k, v) = kv(4, 2, 0.0);
        store.fill_block_kv(9, 0, &[0, 1, 2, 3], &k, &v).unwrap();
        store.mark_block_committed(9, &[2]).unwrap();
        let (k1, v1) = kv(1, 2, 5.0);
        let err = store.fill_block_kv(9, 0, &[2], &k1, &v1);
        assert!(matches!(
            err,
            Err(Error::CommittedWrite { layer: 0, position: 2 })
        ));
        // Uncommitted neighbours still writable.
        store.fill_block_kv(9, 0, &[3], &k1, &v1).unwrap();
    }

    #[test]
    fn store_commit_requires_filled_all_layers() {
        let mut store = PagedKvStore::new(2, 2, 4).unwrap();
        store.register_seq(2).unwrap();
        store.begin_block(2, 2).unwrap();
        let (k, v) = kv(2, 2, 0.0);
        store.fill_block_kv(2, 0, &[0, 1], &k, &v).unwrap();
        // Layer 1 never written -> commit must refuse.
        assert!(matches!(
            store.mark_block_committed(2, &[0]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn store_advance_block_and_absolute_positions() {
        let mut store = PagedKvStore::new(1, 2, 4).unwrap();
        store.register_seq(3).unwrap();
        store.begin_block(3, 3).unwrap();
        let (k, v) = kv(3, 2, 1.0);
        store.fill_block_kv(3, 0, &[0, 1, 2], &k, &v).unwrap();
        store.mark_block_committed(3, &[0, 1, 2]).unwrap();
        store.advance_block(3).unwrap();
        assert_eq!(store.committed_len(3).unwrap(), 3);

        store.begin_block(3, 2).unwrap();
        let (k2, v2) = kv(2, 2, 100.0);
        store.fill_block_kv(3, 0, &[0, 1], &k2, &v2).unwrap();
        let rows = store.layer_rows(3, 0).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.position).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(rows[2].committed && !rows[3].committed);
        assert_eq!(rows[3].k, k2.row(0));
    }

    #[test]
    fn store_pages_allocated_on_demand_and_reused() {
        let mut store = PagedKvStore::new(1, 2, 4).unwrap();
        store.register_seq(1).unwrap();
        store.begin_block(1, 10).unwrap();
        let (k, v) = kv(1, 2, 0.0);
        store.fill_block_kv(1, 0, &[0], &k, &v).unwrap();
        assert_eq!(store.pages_in_use(), 1);
        store.fill_block_kv(1, 0, &[9], &k, &v).unwrap();
        // Slot 9 lives on page 2; page 1 gets allocated along the way.
        assert_eq!(store.pages_in_use(), 3);
        store.release_seq(1);
        assert_eq!(store.pages_in_use(), 0);
        // A new sequence reuses the freed pages instead of growing the pool.
        store.register_seq(2).unwrap();
        store.begin_block(2, 4).unwrap();
        store.fill_block_kv(2, 0, &[0], &k, &v).unwrap();
        assert_eq!(store.pages_in_use(), 1);
        let rows = store.layer_rows(2, 0).unwrap();
        assert_eq!(rows.len(), 1);
    }
}
