//! Synthetic workloads and scripted decodability tapes.
//!
//! A workload is a JSONL file of requests (`id`, `prompt_len`, `target_len`,
//! optional `oracle` trace path). The scripted tapes this module builds make
//! decodability *visible to the selector*: positions become ready left to
//! right at a fixed per-step rate, a ready position's logits row goes one-hot
//! (confidence ~1) while unready rows stay flat, and the layer-1 score
//! columns light up exactly on the ready positions so the importance shift
//! points at what is actually decodable. That coupling is what lets the
//! selection strategies be compared on yield: following the shift finds the
//! decodable tokens, inverting it does not.
//!
//! Everything here is deterministic in (seed, parameters); the seed varies
//! token identities and per-request shapes, never the step arithmetic.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::stable_id_hash;
use crate::trace::{OracleTrace, ScriptedStep};

/// One workload line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadEntry {
    pub id: String,
    pub prompt_len: usize,
    pub target_len: usize,
    /// Path to a scripted trace, relative to the workload file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
}

pub fn read_workload<P: AsRef<Path>>(path: P) -> Result<Vec<WorkloadEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: WorkloadEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("workload line {}: {}", i + 1, e))
        })?;
        if entry.id.is_empty() {
            return Err(Error::Config(format!("workload line {}: empty id", i + 1)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_workload<W: Write>(mut w: W, entries: &[WorkloadEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Deterministic prompt tokens for a request: uniform over the vocabulary
/// minus the mask token, on a stream keyed by (seed, id).
pub fn synth_prompt(seed: u64, id: &str, len: usize, vocab: usize, mask_id: u32) -> Result<Vec<u32>> {
    if vocab < 2 {
        return Err(Error::InvalidArgument("vocab must be at least 2".into()));
    }
    if (mask_id as usize) >= vocab {
        return Err(Error::InvalidArgument(format!(
            "mask token {} outside vocab {}",
            mask_id, vocab
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_id_hash(id) ^ 0x9e37_79b9_7f4a_7c15);
    Ok((0..len)
        .map(|_| {
            let t = rng.gen_range(0..vocab as u32 - 1);
            if t >= mask_id {
                t + 1
            } else {
                t
            }
        })
        .collect())
}

/// Shape of a scripted decodability ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    pub block_size: usize,
    /// Inclusive range of per-step ready rates sampled per request.
    pub rate: (usize, usize),
    pub vocab: usize,
    pub heads: usize,
}

impl Default for ScriptedProfile {
    fn default() -> Self {
        ScriptedProfile {
            block_size: 32,
            rate: (1, 2),
            vocab: 8,
            heads: 1,
        }
    }
}

/// How many steps a scripted position stays decodable after it lights up.
pub const READY_WINDOW: usize = 4;

/// Build one ramp tape: position `j` becomes ready at step `j / rate` (so
/// `rate` new positions per step, left to right) and stays ready for
/// [`READY_WINDOW`] further steps before going cold again; a consumer that
/// retains each position the step it lights up never sees the expiry, while
/// one that ignores the signal is left decoding cold rows one forced guess
/// at a time. The tape has `block_size + 1` lines so even that worst case
/// plus its commit flush never runs out. Ready logits rows are one-hot at a
/// seed-permuted token (never the mask token 0); ready layer-1 score columns
/// carry a large constant while layer 0 stays flat.
pub fn build_scripted_trace(
    block_size: usize,
    rate: usize,
    vocab: usize,
    heads: usize,
    seed: u64,
) -> Result<OracleTrace> {
    if block_size == 0 || rate == 0 {
        return Err(Error::InvalidArgument(
            "block size and rate must be positive".into(),
        ));
    }
    if vocab < 2 || heads == 0 {
        return Err(Error::InvalidArgument(
            "need vocab >= 2 and at least one head".into(),
        ));
    }
    let tok = |j: usize| -> usize { 1 + ((j + seed as usize) % (vocab - 1)) };
    let ready = |j: usize, t: usize| -> bool { t >= j / rate && t <= j / rate + READY_WINDOW };
    let mut steps = Vec::with_capacity(block_size + 1);
    for t in 0..=block_size {
        let logits: Vec<Vec<f64>> = (0..block_size)
            .map(|j| {
                let mut row = vec![0.0; vocab];
                if ready(j, t) {
                    row[tok(j)] = 20.0;
                }
                row
            })
            .collect();
        let flat = vec![vec![vec![0.0; block_size]; block_size]; heads];
        let mut hot = vec![vec![vec![0.0; block_size]; block_size]; heads];
        for head in hot.iter_mut() {
            for row in head.iter_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    if ready(j, t) {
                        *v = 8.0;
                    }
                }
            }
        }
        steps.push(ScriptedStep {
            step: t,
            logits,
            scores_l0: flat,
            scores_l1: hot,
        });
    }
    OracleTrace::new(steps)
}

/// A generated request: the workload line (with `oracle` left unset) plus
/// its tape, if the profile asked for one. The caller decides trace file
/// layout and fills in `entry.oracle`.
#[derive(Debug, Clone)]
pub struct GeneratedRequest {
    pub entry: WorkloadEntry,
    pub trace: Option<OracleTrace>,
}

/// Generate `n_requests` requests with shapes drawn from the given inclusive
/// ranges. With a scripted profile every request also gets a ramp tape whose
/// rate is sampled from the profile's range and whose target length snaps to
/// a whole number of blocks.
pub fn gen_workload(
    n_requests: usize,
    prompt_len: (usize, usize),
    target_len: (usize, usize),
    seed: u64,
    scripted: Option<ScriptedProfile>,
) -> Result<Vec<GeneratedRequest>> {
    if n_requests == 0 {
        return Err(Error::InvalidArgument("need at least one request".into()));
    }
    if prompt_len.0 > prompt_len.1 || target_len.0 > target_len.1 || target_len.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "bad ranges: prompt {:?}, target {:?}",
            prompt_len, target_len
        )));
    }
    if let Some(p) = &scripted {
        if p.block_size == 0 || p.rate.0 == 0 || p.rate.0 > p.rate.1 {
            return Err(Error::InvalidArgument(format!(
                "bad scripted profile: block {}, rate {:?}",
                p.block_size, p.rate
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_requests);
    for i in 0..n_requests {
        let id = format!("req-{:04}", i);
        let p = rng.gen_range(prompt_len.0..=prompt_len.1);
        let mut t = rng.gen_range(target_len.0..=target_len.1).max(1);
        let trace = match &scripted {
            Some(profile) => {
                let rate = rng.gen_range(profile.rate.0..=profile.rate.1);
                // Whole blocks so a run never ends on a discarded partial.
                t = t.div_ceil(profile.block_size).max(1) * profile.block_size;
                Some(build_scripted_trace(
                    profile.block_size,
                    rate,
                    profile.vocab,
                    profile.heads,
                    seed.wrapping_add(i as u64),
                )?)
            }
            None => None,
        };
        out.push(GeneratedRequest {
            entry: WorkloadEntry {
                id,
                prompt_len: p,
                target_len: t,
                oracle: None,
            },
            trace,
        });
    }
    Ok(out)
}
