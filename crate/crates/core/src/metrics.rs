//! Cost accounting and run reports.
//!
//! Compute is charged in FLOPs from a closed-form per-token-per-layer cost
//! (attention projections, score/mix against a context of length L, and the
//! MLP; see [`flops_per_token_layer`]). Every decode step appends one
//! [`StepRecord`]; totals, the layer-2+ redundancy ratio, and the
//! decoded-per-step histogram all derive from those records so the report
//! can be rebuilt or cross-checked from the CSV alone.
//!
//! Report structures keep deterministic field and key order (struct-order
//! serde fields, `BTreeMap` keys) so the same run always serialises to the
//! same bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FLOPs for one token passing through one transformer layer against a
/// key/value context of length `l_ctx`:
///
/// * `8 * hidden^2` for the Q, K, V, and output projections (a matvec is
///   `2 * hidden^2`);
/// * `4 * d_ff * hidden` for the two MLP matmuls;
/// * `4 * hidden * l_ctx` for the score and mix products against the context.
pub fn flops_per_token_layer(hidden: u64, d_ff: u64, l_ctx: u64) -> u64 {
    8 * hidden * hidden + 4 * d_ff * hidden + 4 * hidden * l_ctx
}

/// Model shape parameters the ledger needs for costing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsParams {
    pub n_layers: u64,
    pub hidden: u64,
    pub d_ff: u64,
}

/// One decode step of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Engine-global step counter.
    pub step: u64,
    pub seq: u64,
    /// Step index within the sequence.
    pub local_step: u64,
    /// Uncommitted block positions forwarded through the early layers.
    pub n_active: usize,
    /// Retained positions forwarded through the remaining layers.
    pub s_size: usize,
    /// Tokens newly decoded this step.
    pub n_decoded: usize,
    pub budget_k: usize,
    pub n_sigma: usize,
    /// Positions committed to the cache this step.
    pub committed: usize,
    /// Padded batch-shape bucket the step was scheduled in.
    pub bucket: usize,
    /// Committed context length when the step ran.
    pub context_len: usize,
    /// Total FLOPs charged to this step.
    pub flops: u64,
}

/// Append-only cost ledger for a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub params: Option<FlopsParams>,
    pub steps: Vec<StepRecord>,
    /// FLOPs spent on prompt prefill, outside the decode loop.
    pub prefill_flops: u64,
}

impl FlopsLedger {
    pub fn new(params: FlopsParams) -> Self {
        FlopsLedger {
            params: Some(params),
            steps: Vec::new(),
            prefill_flops: 0,
        }
    }

    /// Cost one step and append its record. The early layers (0 and 1) run
    /// all `n_active` positions; layers 2.. run only the `s_size` retained
    /// ones. Context length for the score/mix term is the committed prefix
    /// plus the active block itself.
    #[allow(clippy::too_many_arguments)]
    pub fn record_step(
        &mut self,
        step: u64,
        seq: u64,
        local_step: u64,
        n_active: usize,
        s_size: usize,
        n_decoded: usize,
        budget_k: usize,
        n_sigma: usize,
        committed: usize,
        bucket: usize,
        context_len: usize,
    ) -> Result<&StepRecord> {
        let p = self
            .params
            .ok_or_else(|| Error::Invariant("ledger has no model params".into()))?;
        if s_size > n_active {
            return Err(Error::Invariant(format!(
                "retained {} exceeds active {}",
                s_size, n_active
            )));
        }
        let l_ctx = (context_len + n_active) as u64;
        let f = flops_per_token_layer(p.hidden, p.d_ff, l_ctx);
        let flops = (n_active as u64) * 2 * f + (s_size as u64) * (p.n_layers - 2) * f;
        self.steps.push(StepRecord {
            step,
            seq,
            local_step,
            n_active,
            s_size,
            n_decoded,
            budget_k,
            n_sigma,
            committed,
            bucket,
            context_len,
            flops,
        });
        Ok(self.steps.last().expect("just pushed"))
    }

    pub fn record_prefill(&mut self, tokens: usize, context_before: usize) {
        if let Some(p) = self.params {
            // Causal prefill: token i sees context_before + i + 1 keys.
            for i in 0..tokens {
                let l = (context_before + i + 1) as u64;
                self.prefill_flops +=
                    p.n_layers * flops_per_token_layer(p.hidden, p.d_ff, l);
            }
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.prefill_flops + self.steps.iter().map(|s| s.flops).sum::<u64>()
    }

    pub fn total_decoded(&self) -> u64 {
        self.steps.iter().map(|s| s.n_decoded as u64).sum()
    }

    /// Late-layer forwards per decoded token: sum of retained-set sizes over
    /// sum of decodes. 1.0 would mean every late-layer forward produced a
    /// token; the no-eviction baseline is typically far above that. `None`
    /// until something decodes.
    pub fn redundancy_ratio(&self) -> Option<f64> {
        let decoded = self.total_decoded();
        if decoded == 0 {
            return None;
        }
        let forwards: u64 = self.steps.iter().map(|s| s.s_size as u64).sum();
        Some(forwards as f64 / decoded as f64)
    }
}

/// Distribution of tokens decoded per step. Steps that decode nothing (e.g.
/// the forward that only flushes KV after the last decode) count in the `0`
/// bin and drag the mean down, matching wall-clock yield.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeHistogram {
    pub counts: BTreeMap<usize, u64>,
    pub total_steps: u64,
    pub total_decoded: u64,
    /// Mean decodes per step; `None` (JSON `null`) for an empty run.
    pub mean: Option<f64>,
    /// Mean as a fraction of the block size.
    pub mean_fraction_of_block: Option<f64>,
}

pub fn histogram_decoded_per_step(
    decodes_per_step: &[usize],
    block_size: usize,
) -> DecodeHistogram {
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &d in decodes_per_step {
        *counts.entry(d).or_insert(0) += 1;
    }
    let total_steps = decodes_per_step.len() as u64;
    let total_decoded: u64 = decodes_per_step.iter().map(|&d| d as u64).sum();
    let mean = if total_steps == 0 {
        None
    } else {
        Some(total_decoded as f64 / total_steps as f64)
    };
    let mean_fraction_of_block = mean.map(|m| m / block_size as f64);
    DecodeHistogram {
        counts,
        total_steps,
        total_decoded,
        mean,
        mean_fraction_of_block,
    }
}

/// Per-sequence slice of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub prompt_len: usize,
    pub generated: Vec<u32>,
    pub steps: u64,
    pub decoded: u64,
    pub blocks_completed: u64,
    /// Final committed cache length (prompt + committed generation).
    pub committed_len: usize,
}

/// Whole-run totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub sequences: usize,
    pub steps: u64,
    pub decoded: u64,
    pub decode_flops: u64,
    pub prefill_flops: u64,
    pub total_flops: u64,
    /// Late-layer forwards per decoded token.
    pub redundancy_ratio: Option<f64>,
    pub histogram: DecodeHistogram,
    /// Peak KV pages allocated across the run.
    pub peak_pages: usize,
}

/// Top-level run report. Field order is the serialisation order; every map
/// is a `BTreeMap`, so equal runs produce byte-equal JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// Engine configuration as loosely-typed JSON for forward compatibility.
    pub config: serde_json::Value,
    pub model: serde_json::Value,
    pub sequences: Vec<SequenceReport>,
    pub totals: RunTotals,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fixed CSV header for step records.
pub const STEP_CSV_HEADER: &str =
    "step,seq,local_step,n_active,s_size,n_decoded,budget_k,n_sigma,committed,bucket,context_len,flops";

/// Step records as CSV (header + one line per step), matching
/// [`STEP_CSV_HEADER`] exactly.
pub fn steps_to_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from(STEP_CSV_HEADER);
    out.push('\n');
    for s in steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.step,
            s.seq,
            s.local_step,
            s.n_active,
            s.s_size,
            s.n_decoded,
            s.budget_k,
            s.n_sigma,
            s.committed,
            s.bucket,
            s.context_len,
            s.flops
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_token_layer_flops_hand_value() {
        // 8*64^2 + 4*256*64 + 4*64*100 = 32768 + 65536 + 25600.
        assert_eq!(flops_per_token_layer(64, 256, 100), 123_904);
        assert_eq!(flops_per_token_layer(1, 1, 0), 12);
    }

    #[test]
    fn ledger_matches_independent_summation() {
        let p = FlopsParams {
            n_layers: 4,
            hidden: 16,
            d_ff: 32,
        };
        let mut ledger = FlopsLedger::new(p);
        // (n_active, s_size, context_len)
        let steps = [(8usize, 3usize, 0usize), (8, 2, 0), (6, 6, 8)];
        for (i, &(a, s, c)) in steps.iter().enumerate() {
            ledger
                .record_step(i as u64, 1, i as u64, a, s, 1, 2, 0, 0, a.next_power_of_two(), c)
                .unwrap();
        }
        let mut want = 0u64;
        for &(a, s, c) in &steps {
            let f = flops_per_token_layer(16, 32, (c + a) as u64);
            want += (a as u64) * 2 * f + (s as u64) * 2 * f;
        }
        assert_eq!(ledger.total_flops(), want);

        ledger.record_prefill(3, 0);
        // Causal: contexts 1, 2, 3 across 4 layers each.
        let pre: u64 = (1..=3u64)
            .map(|l| 4 * flops_per_token_layer(16, 32, l))
            .sum();
        assert_eq!(ledger.prefill_flops, pre);
        assert_eq!(ledger.total_flops(), want + pre);
    }

    #[test]
    fn ledger_rejects_retained_above_active() {
        let mut ledger = FlopsLedger::new(FlopsParams {
            n_layers: 2,
            hidden: 4,
            d_ff: 8,
        });
        assert!(ledger.record_step(0, 1, 0, 2, 3, 0, 1, 0, 0, 2, 0).is_err());
    }

    #[test]
    fn redundancy_ratio_counts_late_layer_forwards() {
        let mut ledger = FlopsLedger::new(FlopsParams {
            n_layers: 4,
            hidden: 4,
            d_ff: 8,
        });
        assert_eq!(ledger.redundancy_ratio(), None);
        ledger.record_step(0, 1, 0, 4, 3, 1, 1, 0, 0, 4, 0).unwrap();
        ledger.record_step(1, 1, 1, 4, 2, 2, 1, 0, 0, 4, 0).unwrap();
        // (3 + 2) retained forwards for 3 decodes.
        assert!((ledger.redundancy_ratio().unwrap() - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_hand_example() {
        let h = histogram_decoded_per_step(&[1, 1, 2], 4);
        let mut want = BTreeMap::new();
        want.insert(1, 2);
        want.insert(2, 1);
        assert_eq!(h.counts, want);
        assert_eq!(h.total_steps, 3);
        assert_eq!(h.total_decoded, 4);
        assert!((h.mean.unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!((h.mean_fraction_of_block.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_zero_decode_steps() {
        let h = histogram_decoded_per_step(&[2, 0, 2], 4);
        assert_eq!(h.counts[&0], 1);
        assert!((h.mean.unwrap() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_empty_run_serialises_mean_null() {
        let h = histogram_decoded_per_step(&[], 4);
        assert_eq!(h.mean, None);
        let json = serde_json::to_string(&h).unwrap();
        assert!(json.contains("\"mean\":null"));
    }

    #[test]
    fn histogram_conserves_decodes() {
        let steps = [3usize, 0, 1, 1, 4, 0, 2];
        let h = histogram_decoded_per_step(&steps, 8);
        let from_bins: u64 = h.counts.iter().map(|(&v, &c)| v as u64 * c).sum();
        assert_eq!(from_bins, h.total_decoded);
        let total_steps: u64 = h.counts.values().sum();
        assert_eq!(total_steps, h.total_steps);
    }

    #[test]
    fn csv_shape_matches_header() {
        let mut ledger = FlopsLedger::new(FlopsParams {
            n_layers: 3,
            hidden: 4,
            d_ff: 8,
        });
        ledger.record_step(0, 7, 0, 4, 2, 1, 2, 1, 0, 4, 5).unwrap();
        let csv = steps_to_csv(&ledger.steps);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(header, STEP_CSV_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), header.split(',').count());
        assert!(row.starts_with("0,7,0,4,2,1,2,1,0,4,5,"));
    }
}
