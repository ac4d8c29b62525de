//! A tiny pre-norm transformer and the split forward path used for eviction.
//!
//! The model is deliberately desk-scale (f64, scalar loops, seeded random
//! weights) but structurally faithful: RMS-norm before attention and MLP,
//! rotary positions on queries and keys, SiLU MLP, per-layer KV written into
//! the paged cache. Block positions attend bidirectionally within their block
//! and to everything committed before it.
//!
//! The forward pass is split to match how eviction works:
//!
//! * [`forward_prefix`] runs layer 0 in full and layer 1 up to its Q/K/V
//!   projections for every uncommitted block position, writing layer-0/1 KV
//!   for all of them *before* anything is evicted. It returns the two
//!   intra-block score sets that feed importance scoring.
//! * [`forward_suffix`] finishes layer 1 for the retained positions only -
//!   their queries still attend to every filled layer-1 KV row, including
//!   evicted positions - and then runs layers 2.. with queries and keys
//!   restricted to retained positions plus the committed cache.
//!
//! [`forward_dense`] is the monolithic reference: all layers, full block,
//! same kernels. With nothing evicted the split path reproduces it exactly.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{KvRow, PagedKvStore};
use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};
use crate::theory::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Total transformer layers; at least 2 (the split needs layers 0 and 1).
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Generation block width.
    pub block_size: usize,
    pub mask_token_id: u32,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden: 32,
            n_heads: 4,
            d_ff: 64,
            vocab: 64,
            block_size: 32,
            mask_token_id: 0,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layers for the split forward, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden {} must divide into {} heads",
                self.hidden, self.n_heads
            )));
        }
        if !(self.hidden / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.hidden / self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        if self.mask_token_id as usize >= self.vocab {
            return Err(Error::Config(format!(
                "mask token {} outside vocab {}",
                self.mask_token_id, self.vocab
            )));
        }
        if self.rope_base.is_nan() || self.rope_base <= 0.0 {
            return Err(Error::Config("rope base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_gain: Vec<f64>,
    pub mlp_gain: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub lm_head: Matrix,
}

/// Seeded weight init: every parameter is drawn from N(0, 1/hidden) via the
/// inverse-CDF transform of a single ChaCha8 stream, in a fixed order, so one
/// seed always yields bit-identical weights.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cfg.hidden as f64).sqrt();
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| std * normal_quantile(rng.gen()))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized buffer")
    };
    let embedding = draw(cfg.vocab, cfg.hidden);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: draw(cfg.hidden, cfg.hidden),
            wk: draw(cfg.hidden, cfg.hidden),
            wv: draw(cfg.hidden, cfg.hidden),
            wo: draw(cfg.hidden, cfg.hidden),
            w_up: draw(cfg.hidden, cfg.d_ff),
            w_down: draw(cfg.d_ff, cfg.hidden),
            attn_gain: vec![1.0; cfg.hidden],
            mlp_gain: vec![1.0; cfg.hidden],
        });
    }
    let lm_head = draw(cfg.hidden, cfg.vocab);
    Ok(ModelWeights {
        cfg: *cfg,
        embedding,
        layers,
        final_gain: vec![1.0; cfg.hidden],
        lm_head,
    })
}

/// Embedding rows for the given tokens.
pub fn embed(w: &ModelWeights, tokens: &[u32]) -> Result<Matrix> {
    let mut x = Matrix::zeros(tokens.len(), w.cfg.hidden);
    for (r, &t) in tokens.iter().enumerate() {
        if t as usize >= w.cfg.vocab {
            return Err(Error::InvalidArgument(format!(
                "token {} outside vocab {}",
                t, w.cfg.vocab
            )));
        }
        x.row_mut(r).copy_from_slice(w.embedding.row(t as usize));
    }
    Ok(x)
}

/// Per-row confidence: the max softmax probability of each logits row.
pub fn confidences(logits: &Matrix) -> Vec<f64> {
    let probs = tensor::row_softmax(logits);
    (0..probs.rows())
        .map(|r| probs.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Which cached rows a layer's attention may read.
enum KeyScope<'a> {
    /// Committed context plus every referable block row.
    All,
    /// Rows at absolute position <= bound (autoregressive prefill).
    Causal(usize),
    /// Committed rows plus uncommitted rows at the given absolute positions
    /// (eviction layers: retained positions only, stale rows excluded).
    CommittedOrIn(&'a BTreeSet<usize>),
}

impl KeyScope<'_> {
    fn admits(&self, row: &KvRow<'_>) -> bool {
        match self {
            KeyScope::All => true,
            KeyScope::Causal(bound) => row.position <= *bound,
            KeyScope::CommittedOrIn(set) => row.committed || set.contains(&row.position),
        }
    }
}

/// Rotary embedding applied per head: each head's columns are rotated
/// independently with the head-local pair index.
fn rope_heads(m: &Matrix, positions: &[usize], n_heads: usize, base: f64) -> Result<Matrix> {
    let hd = m.cols() / n_heads;
    let mut out = m.clone();
    for h in 0..n_heads {
        let mut slice = Matrix::zeros(m.rows(), hd);
        for r in 0..m.rows() {
            slice.row_mut(r).copy_from_slice(&m.row(r)[h * hd..(h + 1) * hd]);
        }
        let rotated = tensor::apply_rope(&slice, positions, base)?;
        for r in 0..m.rows() {
            out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(rotated.row(r));
        }
    }
    Ok(out)
}

/// Normed Q/K/V projections with rotary positions on Q and K.
fn project_qkv(
    lw: &LayerWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    abs_positions: &[usize],
) -> Result<(Matrix, Matrix, Matrix)> {
    let xn = tensor::rms_norm(x, &lw.attn_gain)?;
    let q = rope_heads(
        &tensor::matmul(&xn, &lw.wq)?,
        abs_positions,
        cfg.n_heads,
        cfg.rope_base,
    )?;
    let k = rope_heads(
        &tensor::matmul(&xn, &lw.wk)?,
        abs_positions,
        cfg.n_heads,
        cfg.rope_base,
    )?;
    let v = tensor::matmul(&xn, &lw.wv)?;
    Ok((q, k, v))
}

/// Multi-head attention of `q` rows against cached key rows.
///
/// Returns the concatenated per-head mixes (before the output projection) and
/// each head's pre-softmax score matrix, with key columns in cache order
/// (ascending absolute position), plus those key positions.
fn attend(q: &Matrix, keys: &[KvRow<'_>], n_heads: usize) -> (Matrix, Vec<Matrix>, Vec<usize>) {
    let hd = q.cols() / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n_q = q.rows();
    let n_k = keys.len();
    let mut mix = Matrix::zeros(n_q, q.cols());
    let mut scores = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * hd;
        let hi = lo + hd;
        let mut s = Matrix::zeros(n_q, n_k);
        for i in 0..n_q {
            let qh = &q.row(i)[lo..hi];
            for (j, key) in keys.iter().enumerate() {
                let kh = &key.k[lo..hi];
                let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                s.set(i, j, dot * scale);
            }
        }
        let w = tensor::row_softmax(&s);
        for i in 0..n_q {
            let out = &mut mix.row_mut(i)[lo..hi];
            for (j, key) in keys.iter().enumerate() {
                let wj = w.get(i, j);
                for (o, &vv) in out.iter_mut().zip(&key.v[lo..hi]) {
                    *o += wj * vv;
                }
            }
        }
        scores.push(s);
    }
    let positions = keys.iter().map(|k| k.position).collect();
    (mix, scores, positions)
}

fn mlp(lw: &LayerWeights, x: &Matrix) -> Result<Matrix> {
    let xn = tensor::rms_norm(x, &lw.mlp_gain)?;
    let up = tensor::silu(&tensor::matmul(&xn, &lw.w_up)?);
    let down = tensor::matmul(&up, &lw.w_down)?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, d) in out.row_mut(r).iter_mut().zip(down.row(r)) {
            *o += d;
        }
    }
    Ok(out)
}

fn add_rows(x: &Matrix, delta: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, d) in out.row_mut(r).iter_mut().zip(delta.row(r)) {
            *o += d;
        }
    }
    out
}

/// One full layer (attention + MLP) over `x`, writing this block's KV and
/// reading keys within `scope`. Returns the new residual stream, per-head
/// scores against the scoped keys, and the scoped key positions.
#[allow(clippy::too_many_arguments)]
fn layer_forward(
    store: &mut PagedKvStore,
    seq: u64,
    layer: usize,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    block_positions: &[usize],
    abs_base: usize,
    scope: KeyScope<'_>,
) -> Result<(Matrix, Vec<Matrix>, Vec<usize>)> {
    let abs: Vec<usize> = block_positions.iter().map(|p| abs_base + p).collect();
    let (q, k, v) = project_qkv(lw, cfg, x, &abs)?;
    store.fill_block_kv(seq, layer, block_positions, &k, &v)?;
    let rows = store.layer_rows(seq, layer)?;
    let keys: Vec<KvRow<'_>> = rows.into_iter().filter(|r| scope.admits(r)).collect();
    let (mix, scores, key_pos) = attend(&q, &keys, cfg.n_heads);
    let attn = tensor::matmul(&mix, &lw.wo)?;
    let x = add_rows(x, &attn);
    let x = mlp(lw, &x)?;
    Ok((x, scores, key_pos))
}

/// Slice per-head score matrices down to the columns of the given absolute
/// positions (the intra-block square used for importance).
fn intra_block_scores(
    scores: &[Matrix],
    key_positions: &[usize],
    wanted_abs: &[usize],
) -> Result<Vec<Matrix>> {
    let mut col_of = Vec::with_capacity(wanted_abs.len());
    for w in wanted_abs {
        let idx = key_positions.iter().position(|p| p == w).ok_or_else(|| {
            Error::Invariant(format!("intra-block key position {} missing from view", w))
        })?;
        col_of.push(idx);
    }
    scores
        .iter()
        .map(|s| {
            let mut m = Matrix::zeros(s.rows(), col_of.len());
            for i in 0..s.rows() {
                for (c, &j) in col_of.iter().enumerate() {
                    m.set(i, c, s.get(i, j));
                }
            }
            Ok(m)
        })
        .collect()
}

/// Output of the early (pre-eviction) part of a step.
#[derive(Debug, Clone)]
pub struct PrefixOutput {
    /// Block-relative positions forwarded, sorted ascending; rows of every
    /// matrix below align with this list.
    pub active: Vec<usize>,
    /// Residual stream after layer 0.
    pub hidden_l0: Matrix,
    /// Layer-1 rotary queries for all active positions.
    pub q1: Matrix,
    /// Per-head intra-block pre-softmax scores from layer 0.
    pub scores_l0: Vec<Matrix>,
    /// Per-head intra-block pre-softmax scores from the layer-1 projections.
    pub scores_l1: Vec<Matrix>,
}

/// Layer 0 in full plus the layer-1 projections for every active position.
/// Layer-0 and layer-1 KV for the whole active set is in the cache when this
/// returns, so later eviction can never orphan a position's layer-1 state.
pub fn forward_prefix(
    store: &mut PagedKvStore,
    seq: u64,
    w: &ModelWeights,
    tokens: &[u32],
    active: &[usize],
    abs_base: usize,
) -> Result<PrefixOutput> {
    if tokens.len() != active.len() || active.is_empty() {
        return Err(Error::Shape(format!(
            "prefix: {} tokens for {} active positions",
            tokens.len(),
            active.len()
        )));
    }
    let cfg = &w.cfg;
    let x = embed(w, tokens)?;
    let (x0, s0, keys0) = layer_forward(
        store,
        seq,
        0,
        &w.layers[0],
        cfg,
        &x,
        active,
        abs_base,
        KeyScope::All,
    )?;
    let active_abs: Vec<usize> = active.iter().map(|p| abs_base + p).collect();
    let scores_l0 = intra_block_scores(&s0, &keys0, &active_abs)?;

    // Layer 1 stops at the projections; its block KV is written before any
    // eviction decision is taken.
    let lw1 = &w.layers[1];
    let (q1, k1, v1) = project_qkv(lw1, cfg, &x0, &active_abs)?;
    store.fill_block_kv(seq, 1, active, &k1, &v1)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores_l1 = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let lo = h * hd;
        let hi = lo + hd;
        let mut s = Matrix::zeros(active.len(), active.len());
        for i in 0..active.len() {
            for j in 0..active.len() {
                let dot: f64 = q1.row(i)[lo..hi]
                    .iter()
                    .zip(&k1.row(j)[lo..hi])
                    .map(|(a, b)| a * b)
                    .sum();
                s.set(i, j, dot * scale);
            }
        }
        scores_l1.push(s);
    }

    Ok(PrefixOutput {
        active: active.to_vec(),
        hidden_l0: x0,
        q1,
        scores_l0,
        scores_l1,
    })
}

/// Finish the step for the retained subset: complete layer 1 (queries read
/// every filled layer-1 row, evicted positions included), then run layers 2..
/// with keys restricted to retained positions plus the committed cache.
/// Returns logits rows aligned with `retained`.
pub fn forward_suffix(
    store: &mut PagedKvStore,
    seq: u64,
    w: &ModelWeights,
    prefix: &PrefixOutput,
    retained: &[usize],
    abs_base: usize,
) -> Result<Matrix> {
    if retained.is_empty() {
        return Err(Error::InvalidArgument(
            "suffix forward needs at least one retained position".into(),
        ));
    }
    let cfg = &w.cfg;
    let mut row_of = Vec::with_capacity(retained.len());
    for &p in retained {
        let idx = prefix
            .active
            .iter()
            .position(|&a| a == p)
            .ok_or_else(|| Error::Invariant(format!("retained position {} was not forwarded", p)))?;
        row_of.push(idx);
    }
    let h0 = prefix.hidden_l0.gather_rows(&row_of)?;
    let q1 = prefix.q1.gather_rows(&row_of)?;

    // Layer 1 completion: attend over everything with layer-1 KV.
    let lw1 = &w.layers[1];
    let rows = store.layer_rows(seq, 1)?;
    let (mix, _, _) = attend(&q1, &rows, cfg.n_heads);
    let attn = tensor::matmul(&mix, &lw1.wo)?;
    let x = add_rows(&h0, &attn);
    let mut x = mlp(lw1, &x)?;

    let retained_abs: BTreeSet<usize> = retained.iter().map(|p| abs_base + p).collect();
    for layer in 2..cfg.n_layers {
        let (nx, _, _) = layer_forward(
            store,
            seq,
            layer,
            &w.layers[layer],
            cfg,
            &x,
            retained,
            abs_base,
            KeyScope::CommittedOrIn(&retained_abs),
        )?;
        x = nx;
    }
    let xn = tensor::rms_norm(&x, &w.final_gain)?;
    tensor::matmul(&xn, &w.lm_head)
}

/// Monolithic reference forward: every layer, every given position, same
/// kernels and key ordering as the split path. Used by the no-eviction
/// baseline and as the equivalence target for prefix+suffix.
pub fn forward_dense(
    store: &mut PagedKvStore,
    seq: u64,
    w: &ModelWeights,
    tokens: &[u32],
    active: &[usize],
    abs_base: usize,
) -> Result<DenseOutput> {
    if tokens.len() != active.len() || active.is_empty() {
        return Err(Error::Shape(format!(
            "dense: {} tokens for {} active positions",
            tokens.len(),
            active.len()
        )));
    }
    let cfg = &w.cfg;
    let active_abs: Vec<usize> = active.iter().map(|p| abs_base + p).collect();
    let mut x = embed(w, tokens)?;
    let mut scores_l0 = Vec::new();
    let mut scores_l1 = Vec::new();
    for layer in 0..cfg.n_layers {
        let (nx, scores, key_pos) = layer_forward(
            store,
            seq,
            layer,
            &w.layers[layer],
            cfg,
            &x,
            active,
            abs_base,
            KeyScope::All,
        )?;
        x = nx;
        if layer < 2 {
            let intra = intra_block_scores(&scores, &key_pos, &active_abs)?;
            if layer == 0 {
                scores_l0 = intra;
            } else {
                scores_l1 = intra;
            }
        }
    }
    let xn = tensor::rms_norm(&x, &w.final_gain)?;
    let logits = tensor::matmul(&xn, &w.lm_head)?;
    Ok(DenseOutput {
        logits,
        scores_l0,
        scores_l1,
    })
}

/// Full-block reference output: logits for every active position plus the
/// intra-block score sets of the first two layers.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    pub logits: Matrix,
    pub scores_l0: Vec<Matrix>,
    pub scores_l1: Vec<Matrix>,
}

/// Autoregressive prompt prefill: positions are forwarded one at a time with
/// causal attention, their KV committed immediately. Returns the number of
/// (position, layer) forwards for cost accounting.
pub fn prefill_prompt(
    store: &mut PagedKvStore,
    seq: u64,
    w: &ModelWeights,
    prompt: &[u32],
) -> Result<usize> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be non-empty".into()));
    }
    let cfg = &w.cfg;
    let base = store.committed_len(seq)?;
    store.begin_block(seq, prompt.len())?;
    for (i, &tok) in prompt.iter().enumerate() {
        let mut x = embed(w, &[tok])?;
        for layer in 0..cfg.n_layers {
            let (nx, _, _) = layer_forward(
                store,
                seq,
                layer,
                &w.layers[layer],
                cfg,
                &x,
                &[i],
                base,
                KeyScope::Causal(base + i),
            )?;
            x = nx;
        }
    }
    let all: Vec<usize> = (0..prompt.len()).collect();
    store.mark_block_committed(seq, &all)?;
    store.advance_block(seq)?;
    Ok(prompt.len() * cfg.n_layers)
}
